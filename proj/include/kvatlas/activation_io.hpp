#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kvatlas/matrix.hpp"

namespace kvatlas {

enum class VectorKind : std::uint8_t { Key = 0, Value = 1, Query = 2 };

const char* to_string(VectorKind kind);
VectorKind parse_vector_kind(const std::string& text);

/// Head-dimension vectors of one kind taken from one (layer, head).
/// Payload is kept as float32 so dumps round-trip bit-exactly; analysis code
/// upcasts rows through `row_as_double` or `to_matrix`.
class ActivationDataset {
 public:
  ActivationDataset() = default;
  ActivationDataset(std::size_t d_head, VectorKind kind, std::vector<float> values,
                    std::uint32_t layer_index = 0, std::uint32_t head_index = 0,
                    std::string model_tag = "");

  std::size_t count() const noexcept { return d_head_ == 0 ? 0 : values_.size() / d_head_; }
  std::size_t d_head() const noexcept { return d_head_; }
  VectorKind kind() const noexcept { return kind_; }
  std::uint32_t layer_index() const noexcept { return layer_index_; }
  std::uint32_t head_index() const noexcept { return head_index_; }
  const std::string& model_tag() const noexcept { return model_tag_; }

  std::span<const float> row(std::size_t i) const noexcept {
    return {values_.data() + i * d_head_, d_head_};
  }
  std::vector<double> row_as_double(std::size_t i) const;
  std::span<const float> values() const noexcept { return values_; }

  Matrix to_matrix() const;
  /// Copy of the listed rows with the same metadata.
  ActivationDataset subset(std::span<const std::size_t> indices) const;

  /// Throws std::invalid_argument naming the violated invariant.
  void validate() const;

  bool operator==(const ActivationDataset&) const = default;

 private:
  std::size_t d_head_ = 0;
  VectorKind kind_ = VectorKind::Key;
  std::uint32_t layer_index_ = 0;
  std::uint32_t head_index_ = 0;
  std::string model_tag_;
  std::vector<float> values_;
};

ActivationDataset dataset_from_matrix(const Matrix& rows, VectorKind kind,
                                      std::uint32_t layer_index = 0,
                                      std::uint32_t head_index = 0,
                                      std::string model_tag = "");

inline constexpr std::size_t kDumpFixedHeaderBytes = 32;

/// Size in bytes of a dump header carrying a model tag of `tag_bytes` bytes.
constexpr std::size_t dump_header_bytes(std::size_t tag_bytes) {
  return kDumpFixedHeaderBytes + tag_bytes;
}

void write_dump(const ActivationDataset& dataset, const std::filesystem::path& path);
ActivationDataset read_dump(const std::filesystem::path& path);

/// Stream-level forms; a scenario bundle is several dumps back to back.
void write_dump(const ActivationDataset& dataset, std::ostream& out);
ActivationDataset read_dump(std::istream& in, const std::string& source_name);

struct SyntheticSpec {
  std::uint32_t true_dict_size = 64;
  std::uint32_t d_head = 32;
  std::uint32_t atoms_per_sample = 4;
  double coeff_low = 0.5;
  double coeff_high = 1.5;
  double noise_sigma = 0.01;
  std::uint64_t sample_count = 50'000;
  std::uint64_t seed = 0;
  VectorKind kind = VectorKind::Key;

  void validate() const;
};

struct GroundTruth {
  std::uint32_t atoms_per_sample = 0;
  Matrix atoms;  // true_dict_size x d_head, unit rows
  std::vector<std::uint32_t> indices;  // sample_count x atoms_per_sample
  std::vector<float> coefficients;     // sample_count x atoms_per_sample

  std::size_t sample_count() const noexcept {
    return atoms_per_sample == 0 ? 0 : indices.size() / atoms_per_sample;
  }
  std::span<const std::uint32_t> sample_indices(std::size_t i) const noexcept {
    return {indices.data() + i * atoms_per_sample, atoms_per_sample};
  }
  std::span<const float> sample_coefficients(std::size_t i) const noexcept {
    return {coefficients.data() + i * atoms_per_sample, atoms_per_sample};
  }
};

struct SyntheticData {
  ActivationDataset dataset;
  GroundTruth truth;
};

SyntheticData generate_synthetic(const SyntheticSpec& spec);

std::filesystem::path ground_truth_path(const std::filesystem::path& dump_path);
void write_ground_truth(const GroundTruth& truth, const std::filesystem::path& path);
GroundTruth read_ground_truth(const std::filesystem::path& path);

}  // namespace kvatlas
