#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "kvatlas/activation_io.hpp"
#include "kvatlas/analysis.hpp"
#include "kvatlas/matrix.hpp"
#include "kvatlas/sae.hpp"

namespace kvatlas {

/// Single-head scaled dot-product attention inputs.
struct AttentionScenario {
  Matrix queries;  // T_q x d_head
  Matrix keys;     // T_k x d_head
  Matrix values;   // T_k x d_head
  bool causal = false;
  double scale = 0.0;  // <= 0 means 1/sqrt(d_head)

  std::size_t d_head() const noexcept { return queries.cols(); }
  double effective_scale() const;
  void validate() const;
};

struct AttentionOutput {
  Matrix logits;   // T_q x T_k, -inf where masked
  Matrix probs;    // T_q x T_k
  Matrix outputs;  // T_q x d_head
};

AttentionOutput attend(const AttentionScenario& scenario);

struct InjectionReport {
  double mean_kl = 0.0;
  double max_kl = 0.0;
  double max_abs_logit_diff = 0.0;
  double mean_output_rel_err = 0.0;
};

enum class InjectionMode { KeysOnly, ValuesOnly, Both };

/// KL(p || q) in nats for two probability rows; masked (zero) entries of p contribute nothing.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Compares attention on two scenarios that share queries.
InjectionReport compare_attention(const AttentionScenario& original,
                                  const AttentionScenario& reconstructed);

struct InjectionResult {
  InjectionReport report;
  AttentionScenario reconstructed;
};

/// Replaces key rows and/or value rows with their SAE reconstructions at the
/// policy's budgets and reports how far attention moves.
InjectionResult inject(const AttentionScenario& scenario, const SaeModel& key_model,
                       const SaeModel& value_model, const BudgetPolicy& policy,
                       InjectionMode mode = InjectionMode::Both);

struct FrontierCell {
  BudgetPolicy policy;
  InjectionReport report;
};

/// inject() over key_budgets x val_budgets, row-major in (key, value) order.
std::vector<FrontierCell> budget_frontier(const AttentionScenario& scenario,
                                          const SaeModel& key_model, const SaeModel& value_model,
                                          std::span<const std::size_t> key_budgets,
                                          std::span<const std::size_t> val_budgets);

void write_frontier_csv(std::span<const FrontierCell> cells, std::ostream& out);

/// Reconstructs every row of `rows` at budget k.
Matrix reconstruct_matrix(const SaeModel& model, const Matrix& rows, std::size_t k);

}  // namespace kvatlas

namespace kvatlas {

/// Scenario bundle file: three dumps back to back (Query, Key, Value).
void write_scenario_bundle(const ActivationDataset& queries, const ActivationDataset& keys,
                           const ActivationDataset& values, const std::filesystem::path& path);

struct ScenarioBundle {
  ActivationDataset queries;
  ActivationDataset keys;
  ActivationDataset values;
};

ScenarioBundle read_scenario_bundle(const std::filesystem::path& path);

AttentionScenario make_scenario(const ActivationDataset& queries, const ActivationDataset& keys,
                                const ActivationDataset& values, bool causal = false,
                                double scale = 0.0);

}  // namespace kvatlas
