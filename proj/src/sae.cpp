#include "kvatlas/sae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>

#include "binary_io.hpp"

namespace kvatlas {

namespace {

constexpr char kModelMagic[4] = {'S', 'A', 'E', '1'};

void require_dim(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw std::invalid_argument(std::string("dimension mismatch for ") + what + ": expected " +
                                std::to_string(want) + ", got " + std::to_string(got));
  }
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

const char* to_string(SaeVariant variant) {
  return variant == SaeVariant::TopK ? "topk" : "l1";
}

SaeModel SaeModel::zeros(std::size_t d_head, std::size_t latent_size, std::size_t k_train,
                         SaeVariant variant, double lambda) {
  SaeModel m;
  m.variant = variant;
  m.lambda = variant == SaeVariant::L1 ? lambda : 0.0;
  m.d_head = d_head;
  m.latent_size = latent_size;
  m.k_train = k_train;
  m.w_enc = Matrix(latent_size, d_head);
  m.b_enc.assign(latent_size, 0.0);
  m.w_dec = Matrix(latent_size, d_head);
  m.b_dec.assign(d_head, 0.0);
  return m;
}

void SaeModel::validate() const {
  if (d_head == 0) throw std::invalid_argument("d_head >= 1 violated");
  if (latent_size == 0) throw std::invalid_argument("latent size must be positive");
  if (k_train == 0 || k_train > latent_size) {
    throw std::invalid_argument("k_train must be in [1, M]");
  }
  if (variant == SaeVariant::L1 && !(lambda >= 0.0)) {
    throw std::invalid_argument("L1 lambda must be non-negative");
  }
  require_dim(w_enc.rows(), latent_size, "w_enc rows");
  require_dim(w_enc.cols(), d_head, "w_enc cols");
  require_dim(w_dec.rows(), latent_size, "w_dec rows");
  require_dim(w_dec.cols(), d_head, "w_dec cols");
  require_dim(b_enc.size(), latent_size, "b_enc");
  require_dim(b_dec.size(), d_head, "b_dec");
  if (!all_finite(w_enc.flat()) || !all_finite(b_enc) || !all_finite(w_dec.flat()) ||
      !all_finite(b_dec)) {
    throw std::invalid_argument("model parameters must be finite");
  }
}

SaeModel SaeModel::rounded_to_float() const {
  SaeModel out = *this;
  auto round = [](std::span<double> v) {
    for (double& x : v) x = static_cast<float>(x);
  };
  round(out.w_enc.flat());
  round(out.b_enc);
  round(out.w_dec.flat());
  round(out.b_dec);
  out.lambda = static_cast<float>(out.lambda);
  return out;
}

LatentCode::LatentCode(std::vector<std::uint32_t> indices, std::vector<double> values,
                       std::size_t m)
    : indices_(std::move(indices)), values_(std::move(values)), m_(m) {
  if (indices_.size() != values_.size()) {
    throw std::invalid_argument("latent code indices/values length mismatch");
  }
  for (std::size_t i = 0; i < indices_.size(); ++i) {
    if (indices_[i] >= m_) throw std::invalid_argument("latent index out of range");
    if (i > 0 && indices_[i] <= indices_[i - 1]) {
      throw std::invalid_argument("latent indices must be strictly increasing");
    }
    if (!(values_[i] > 0.0)) throw std::invalid_argument("latent values must be positive");
  }
}

LatentCode LatentCode::scaled(double factor) const {
  std::vector<double> v(values_);
  for (double& x : v) x *= factor;
  return {indices_, std::move(v), m_};
}

std::vector<double> LatentCode::densify() const {
  std::vector<double> dense(m_, 0.0);
  for (std::size_t i = 0; i < indices_.size(); ++i) dense[indices_[i]] = values_[i];
  return dense;
}

std::vector<double> encode_pre(const SaeModel& model, std::span<const double> x) {
  require_dim(x.size(), model.d_head, "input vector");
  std::vector<double> centered(model.d_head);
  for (std::size_t t = 0; t < model.d_head; ++t) centered[t] = x[t] - model.b_dec[t];
  std::vector<double> z(model.latent_size);
  for (std::size_t i = 0; i < model.latent_size; ++i) {
    const double pre = dot(model.w_enc.row(i), centered) + model.b_enc[i];
    z[i] = pre > 0.0 ? pre : 0.0;
  }
  return z;
}

LatentCode topk_gate(std::span<const double> z_pre, std::size_t k) {
  if (k == 0) throw std::invalid_argument("top-k budget must be >= 1");
  std::vector<std::uint32_t> positive;
  for (std::size_t i = 0; i < z_pre.size(); ++i) {
    if (z_pre[i] > 0.0) positive.push_back(static_cast<std::uint32_t>(i));
  }
  if (positive.size() > k) {
    auto by_rank = [&](std::uint32_t a, std::uint32_t b) {
      return z_pre[a] > z_pre[b] || (z_pre[a] == z_pre[b] && a < b);
    };
    std::nth_element(positive.begin(), positive.begin() + static_cast<std::ptrdiff_t>(k - 1),
                     positive.end(), by_rank);
    positive.resize(k);
    std::sort(positive.begin(), positive.end());
  }
  std::vector<double> values(positive.size());
  for (std::size_t j = 0; j < positive.size(); ++j) values[j] = z_pre[positive[j]];
  return {std::move(positive), std::move(values), z_pre.size()};
}

LatentCode positive_code(std::span<const double> z_pre) {
  return topk_gate(z_pre, std::max<std::size_t>(z_pre.size(), 1));
}

std::vector<double> decode(const SaeModel& model, const LatentCode& code) {
  require_dim(code.m(), model.latent_size, "latent code size");
  std::vector<double> x_hat(model.b_dec);
  const auto idx = code.indices();
  const auto val = code.values();
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] >= model.latent_size) throw std::out_of_range("latent index out of range");
    const auto atom = model.w_dec.row(idx[j]);
    for (std::size_t t = 0; t < model.d_head; ++t) x_hat[t] += val[j] * atom[t];
  }
  return x_hat;
}

Reconstruction reconstruct(const SaeModel& model, std::span<const double> x, std::size_t k) {
  if (k == 0 || k > model.latent_size) {
    throw std::invalid_argument("budget k must satisfy 1 <= k <= M (k=" + std::to_string(k) +
                                ", M=" + std::to_string(model.latent_size) + ")");
  }
  auto code = topk_gate(encode_pre(model, x), k);
  auto x_hat = decode(model, code);
  return {std::move(code), std::move(x_hat)};
}

LatentCode l1_encode(const SaeModel& model, std::span<const double> x) {
  if (model.variant != SaeVariant::L1) {
    throw std::invalid_argument("l1_encode requires an L1 model");
  }
  return positive_code(encode_pre(model, x));
}

Reconstruction reconstruct_any(const SaeModel& model, std::span<const double> x, std::size_t k) {
  if (model.variant == SaeVariant::L1) {
    auto code = l1_encode(model, x);
    auto x_hat = decode(model, code);
    return {std::move(code), std::move(x_hat)};
  }
  return reconstruct(model, x, k);
}

void save_model(const SaeModel& model, const std::filesystem::path& path) {
  model.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kModelMagic, 4);
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(model.variant));
  detail::put_f32(out, static_cast<float>(model.variant == SaeVariant::L1 ? model.lambda : 0.0));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.d_head));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.latent_size));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.k_train));
  auto block = [&](std::span<const double> v) {
    for (double x : v) detail::put_f32(out, static_cast<float>(x));
  };
  block(model.w_enc.flat());
  block(model.b_enc);
  block(model.w_dec.flat());
  block(model.b_dec);
  out.close();
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

SaeModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string() + ": missing file");
  detail::Reader reader(in, path.string());
  char magic[4];
  reader.read_exact(magic, 4, "header");
  if (!std::equal(magic, magic + 4, kModelMagic)) {
    throw std::runtime_error(path.string() + ": bad magic (expected SAE1)");
  }
  const auto variant_code = reader.get<std::uint8_t>("header");
  if (variant_code > 1) {
    throw std::runtime_error(path.string() + ": unknown SAE variant " +
                             std::to_string(variant_code));
  }
  const float lambda = reader.get_f32("header");
  const auto d = reader.get<std::uint32_t>("header");
  const auto m = reader.get<std::uint32_t>("header");
  const auto k = reader.get<std::uint32_t>("header");
  auto model = SaeModel::zeros(d, m, k, static_cast<SaeVariant>(variant_code), lambda);
  auto block = [&](std::span<double> v, const char* what) {
    for (double& x : v) x = reader.get_f32(what);
  };
  block(model.w_enc.flat(), "w_enc");
  block(model.b_enc, "b_enc");
  block(model.w_dec.flat(), "w_dec");
  block(model.b_dec, "b_dec");
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  return model;
}

}  // namespace kvatlas
