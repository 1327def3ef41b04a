#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvatlas/activation_io.hpp"
#include "kvatlas/kernels.hpp"
#include "kvatlas/sae.hpp"

namespace kvatlas {

struct BudgetPolicy {
  std::size_t k_key = 8;
  std::size_t k_val = 16;

  void validate() const;
  bool operator==(const BudgetPolicy&) const = default;
};

struct CurveMeta {
  VectorKind kind = VectorKind::Key;
  std::uint32_t layer_index = 0;
  std::string model_tag;
};

/// Fidelity F(K) = mean per-vector cosine between x and its budget-K reconstruction.
struct FidelityCurve {
  std::vector<std::size_t> budgets;
  std::vector<double> mean_cosine;
  std::vector<double> std_cosine;
  std::vector<double> mean_mse;
  std::vector<double> marginal_gains;  // F(K_j) - F(K_{j-1}); first entry F(K_0)
  std::optional<std::size_t> elbow;
  CurveMeta meta;

  std::size_t size() const noexcept { return budgets.size(); }
  /// Checks alignment, strictly increasing budgets and cosines in [-1, 1].
  void validate() const;
  /// Fills marginal_gains from mean_cosine.
  void compute_marginal_gains();
};

inline constexpr double kDefaultElbowTau = 0.01;
inline constexpr double kFidelityThreshold = 0.80;
inline constexpr std::size_t kDefaultKeyBudget = 8;
inline constexpr std::size_t kDefaultValueBudget = 16;

/// {1,2,4,...,128} restricted to [1, M].
std::vector<std::size_t> default_budgets(std::size_t latent_size);

FidelityCurve sweep_fidelity(const SaeModel& model, const ActivationDataset& data,
                             std::span<const std::size_t> budgets,
                             Backend backend = Backend::Parallel);
FidelityCurve sweep_fidelity(const SaeModel& model, const Matrix& data,
                             std::span<const std::size_t> budgets,
                             Backend backend = Backend::Parallel);

/// Smallest budget after which every per-unit-K gain (dF/dK) is below tau.
/// The last budget never qualifies on its own (it has no tail to judge).
std::optional<std::size_t> detect_elbow(const FidelityCurve& curve,
                                        double tau = kDefaultElbowTau);

/// Smallest budget with F >= threshold, if any.
std::optional<std::size_t> crossing_budget(const FidelityCurve& curve,
                                           double threshold = kFidelityThreshold);

enum class LayerDepth { Shallow, Deep };

LayerDepth parse_layer_depth(const std::string& text);

BudgetPolicy recommend_budget(const FidelityCurve& key_curve, const FidelityCurve& value_curve,
                              LayerDepth depth, double tau = kDefaultElbowTau);

struct AsymmetryReport {
  std::vector<std::size_t> budgets;
  std::vector<double> key_fidelity;
  std::vector<double> value_fidelity;
  std::vector<double> gap;  // key - value
  std::optional<std::size_t> key_crossing;
  std::optional<std::size_t> value_crossing;
  std::optional<std::size_t> key_elbow;
  std::optional<std::size_t> value_elbow;
  BudgetPolicy policy;
  LayerDepth depth = LayerDepth::Deep;
};

/// Throws std::invalid_argument when the budget grids differ.
AsymmetryReport asymmetry_report(const FidelityCurve& key_curve,
                                 const FidelityCurve& value_curve,
                                 LayerDepth depth = LayerDepth::Deep,
                                 double tau = kDefaultElbowTau);

void write_asymmetry_report(const AsymmetryReport& report, std::ostream& out);

struct FeatureActivation {
  std::uint32_t feature = 0;
  double activation = 0.0;
};

struct TraceRecord {
  LatentCode code;
  std::vector<FeatureActivation> top;  // sorted by activation, descending
};

struct FeatureTrace {
  std::vector<std::string> tokens;
  std::vector<TraceRecord> records;
};

FeatureTrace trace_features(const SaeModel& model, const ActivationDataset& vectors,
                            std::vector<std::string> token_labels, std::size_t k,
                            std::size_t top_n = 5);

/// Dense grid over the union of active features: rows are features
/// (ascending index), columns are positions.
struct HeatmapGrid {
  std::vector<std::uint32_t> features;
  Matrix activations;  // features.size() x positions
};

HeatmapGrid heatmap_grid(const FeatureTrace& trace);

// CSV / TSV emitters and the curve reader.
void write_curve_csv(const FidelityCurve& curve, std::ostream& out);
FidelityCurve read_curve_csv(std::istream& in);
void write_trace_csv(const FeatureTrace& trace, std::ostream& out);
void write_heatmap_tsv(const HeatmapGrid& grid, const FeatureTrace& trace, std::ostream& out);

}  // namespace kvatlas
