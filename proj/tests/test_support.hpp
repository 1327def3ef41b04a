#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

#include "kvatlas/matrix.hpp"
#include "kvatlas/sae.hpp"
#include "oracles.hpp"

namespace testing_support {

inline kvatlas::SaeModel random_model(std::size_t d, std::size_t m, std::size_t k,
                                      std::uint64_t seed,
                                      kvatlas::SaeVariant variant = kvatlas::SaeVariant::TopK,
                                      double lambda = 0.0) {
  auto model = kvatlas::SaeModel::zeros(d, m, k, variant, lambda);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (double& v : model.w_enc.flat()) v = g(rng);
  for (double& v : model.w_dec.flat()) v = g(rng);
  for (double& v : model.b_enc) v = 0.3 * g(rng);
  for (double& v : model.b_dec) v = 0.3 * g(rng);
  return model;
}

/// M = 2d model whose rows are +e_t and -e_t; at budget >= d it reproduces
/// any input exactly.
inline kvatlas::SaeModel identity_model(std::size_t d) {
  auto model = kvatlas::SaeModel::zeros(d, 2 * d, d);
  for (std::size_t t = 0; t < d; ++t) {
    model.w_enc(t, t) = 1.0;
    model.w_dec(t, t) = 1.0;
    model.w_enc(d + t, t) = -1.0;
    model.w_dec(d + t, t) = -1.0;
  }
  return model;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  std::vector<double> v(n);
  for (double& x : v) x = g(rng);
  return v;
}

inline oracle::Mat to_rows(const kvatlas::Matrix& m) {
  oracle::Mat out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i].assign(m.row(i).begin(), m.row(i).end());
  return out;
}

inline kvatlas::Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng,
                                     double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  kvatlas::Matrix m(r, c);
  for (double& v : m.flat()) v = g(rng);
  return m;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() / ("kvatlas_" + name + "_" +
                                                        std::to_string(::getpid()))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
