#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "kvatlas/matrix.hpp"

namespace kvatlas {

enum class SaeVariant : std::uint8_t { TopK = 0, L1 = 1 };

const char* to_string(SaeVariant variant);

/// Sparse autoencoder over head vectors.
///
/// Encoder rows produce one pre-activation each; decoder rows are the
/// dictionary atoms. For the Top-K variant the decoder rows are kept at unit
/// norm by the trainer so coefficients are comparable across features.
struct SaeModel {
  SaeVariant variant = SaeVariant::TopK;
  double lambda = 0.0;  // L1 penalty weight; zero for TopK
  std::size_t d_head = 0;
  std::size_t latent_size = 0;
  std::size_t k_train = 0;

  Matrix w_enc;                 // latent_size x d_head
  std::vector<double> b_enc;    // latent_size
  Matrix w_dec;                 // latent_size x d_head
  std::vector<double> b_dec;    // d_head

  static SaeModel zeros(std::size_t d_head, std::size_t latent_size, std::size_t k_train,
                        SaeVariant variant = SaeVariant::TopK, double lambda = 0.0);

  /// Throws std::invalid_argument on shape mismatch, non-finite entries or k_train > M.
  void validate() const;

  /// Copy with every parameter rounded through float32, i.e. what a save/load cycle yields.
  SaeModel rounded_to_float() const;

  bool operator==(const SaeModel&) const = default;
};

/// Sparse code: strictly increasing indices in [0, m) with positive values.
class LatentCode {
 public:
  LatentCode() = default;
  /// Validates the invariants; throws std::invalid_argument.
  LatentCode(std::vector<std::uint32_t> indices, std::vector<double> values, std::size_t m);

  std::span<const std::uint32_t> indices() const noexcept { return indices_; }
  std::span<const double> values() const noexcept { return values_; }
  std::size_t m() const noexcept { return m_; }
  std::size_t nnz() const noexcept { return indices_.size(); }
  bool empty() const noexcept { return indices_.empty(); }

  LatentCode scaled(double factor) const;
  std::vector<double> densify() const;

  bool operator==(const LatentCode&) const = default;

 private:
  std::vector<std::uint32_t> indices_;
  std::vector<double> values_;
  std::size_t m_ = 0;
};

/// z_pre = ReLU(w_enc (x - b_dec) + b_enc).
std::vector<double> encode_pre(const SaeModel& model, std::span<const double> x);

/// Keeps the k largest strictly positive entries; ties go to the lower index.
LatentCode topk_gate(std::span<const double> z_pre, std::size_t k);

/// Every strictly positive entry, no gating.
LatentCode positive_code(std::span<const double> z_pre);

std::vector<double> decode(const SaeModel& model, const LatentCode& code);

struct Reconstruction {
  LatentCode code;
  std::vector<double> x_hat;
};

/// Re-gates the pre-activations at budget k (1 <= k <= M) and decodes.
Reconstruction reconstruct(const SaeModel& model, std::span<const double> x, std::size_t k);

/// Ungated encoding for L1 models. Throws std::invalid_argument for TopK models.
LatentCode l1_encode(const SaeModel& model, std::span<const double> x);

/// Top-K models re-gate at k; L1 models ignore k and use l1_encode.
Reconstruction reconstruct_any(const SaeModel& model, std::span<const double> x, std::size_t k);

void save_model(const SaeModel& model, const std::filesystem::path& path);
SaeModel load_model(const std::filesystem::path& path);

}  // namespace kvatlas
