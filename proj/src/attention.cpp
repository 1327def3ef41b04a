#include "kvatlas/attention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "kvatlas/kernels.hpp"

namespace kvatlas {

namespace {

void require_finite(const Matrix& m, const char* what) {
  for (double v : m.flat()) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + " must be finite");
  }
}

}  // namespace

double AttentionScenario::effective_scale() const {
  return scale > 0.0 ? scale : 1.0 / std::sqrt(static_cast<double>(d_head()));
}

void AttentionScenario::validate() const {
  if (queries.rows() == 0 || keys.rows() == 0) {
    throw std::invalid_argument("scenario needs T_q, T_k >= 1");
  }
  if (queries.cols() == 0 || keys.cols() != queries.cols() || values.cols() != queries.cols()) {
    throw std::invalid_argument("scenario d_head mismatch between queries, keys and values");
  }
  if (values.rows() != keys.rows()) throw std::invalid_argument("keys and values need equal T_k");
  if (causal && queries.rows() != keys.rows()) {
    throw std::invalid_argument("causal attention requires T_q == T_k");
  }
  if (!std::isfinite(scale) || scale < 0.0) throw std::invalid_argument("scale must be positive");
  require_finite(queries, "queries");
  require_finite(keys, "keys");
  require_finite(values, "values");
}

AttentionOutput attend(const AttentionScenario& sc) {
  sc.validate();
  const std::size_t tq = sc.queries.rows(), tk = sc.keys.rows(), d = sc.d_head();
  const double scale = sc.effective_scale();
  AttentionOutput out{Matrix(tq, tk), Matrix(tq, tk), Matrix(tq, d)};
  constexpr double kMasked = -std::numeric_limits<double>::infinity();

  for (std::size_t i = 0; i < tq; ++i) {
    auto logits = out.logits.row(i);
    auto probs = out.probs.row(i);
    double row_max = kMasked;
    for (std::size_t j = 0; j < tk; ++j) {
      logits[j] = (sc.causal && j > i) ? kMasked : scale * dot(sc.queries.row(i), sc.keys.row(j));
      row_max = std::max(row_max, logits[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < tk; ++j) {
      probs[j] = logits[j] == kMasked ? 0.0 : std::exp(logits[j] - row_max);
      total += probs[j];
    }
    auto o = out.outputs.row(i);
    for (std::size_t j = 0; j < tk; ++j) {
      probs[j] /= total;
      if (probs[j] == 0.0) continue;
      const auto v = sc.values.row(j);
      for (std::size_t t = 0; t < d; ++t) o[t] += probs[j] * v[t];
    }
  }
  return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  double kl = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] > 0.0) kl += p[j] * (std::log(p[j]) - std::log(q[j]));
  }
  // Rounding can push an all-but-identical pair slightly negative.
  return std::max(kl, 0.0);
}

InjectionReport compare_attention(const AttentionScenario& original,
                                  const AttentionScenario& reconstructed) {
  const auto a = attend(original);
  const auto b = attend(reconstructed);
  if (a.probs.rows() != b.probs.rows() || a.probs.cols() != b.probs.cols()) {
    throw std::invalid_argument("compare_attention: scenario shapes differ");
  }
  InjectionReport r;
  const std::size_t tq = a.probs.rows();
  std::size_t err_rows = 0;
  for (std::size_t i = 0; i < tq; ++i) {
    const double kl = kl_divergence(a.probs.row(i), b.probs.row(i));
    r.mean_kl += kl;
    r.max_kl = std::max(r.max_kl, kl);
    for (std::size_t j = 0; j < a.logits.cols(); ++j) {
      if (std::isinf(a.logits(i, j))) continue;
      r.max_abs_logit_diff = std::max(r.max_abs_logit_diff, std::abs(a.logits(i, j) - b.logits(i, j)));
    }
    const auto o = a.outputs.row(i);
    const auto oh = b.outputs.row(i);
    double diff = 0.0;
    for (std::size_t t = 0; t < o.size(); ++t) diff += (o[t] - oh[t]) * (o[t] - oh[t]);
    const double norm = std::sqrt(squared_norm(o));
    if (norm < kNormFloor) continue;
    r.mean_output_rel_err += std::sqrt(diff) / norm;
    ++err_rows;
  }
  r.mean_kl /= static_cast<double>(tq);
  if (err_rows > 0) r.mean_output_rel_err /= static_cast<double>(err_rows);
  return r;
}

Matrix reconstruct_matrix(const SaeModel& model, const Matrix& rows, std::size_t k) {
  if (rows.cols() != model.d_head) {
    throw std::invalid_argument("model d_head (" + std::to_string(model.d_head) +
                                ") does not match scenario (" + std::to_string(rows.cols()) + ")");
  }
  if (k == 0 || k > model.latent_size) {
    throw std::invalid_argument("budget " + std::to_string(k) + " outside [1, M=" +
                                std::to_string(model.latent_size) + "]");
  }
  Matrix out(rows.rows(), rows.cols());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows.rows()); ++r) {
    const auto rec = reconstruct_any(model, rows.row(static_cast<std::size_t>(r)), k);
    std::copy(rec.x_hat.begin(), rec.x_hat.end(), out.row(static_cast<std::size_t>(r)).begin());
  }
  return out;
}

InjectionResult inject(const AttentionScenario& scenario, const SaeModel& key_model,
                       const SaeModel& value_model, const BudgetPolicy& policy,
                       InjectionMode mode) {
  scenario.validate();
  policy.validate();
  InjectionResult result{{}, scenario};
  if (mode != InjectionMode::ValuesOnly) {
    result.reconstructed.keys = reconstruct_matrix(key_model, scenario.keys, policy.k_key);
  }
  if (mode != InjectionMode::KeysOnly) {
    result.reconstructed.values = reconstruct_matrix(value_model, scenario.values, policy.k_val);
  }
  result.report = compare_attention(scenario, result.reconstructed);
  return result;
}

std::vector<FrontierCell> budget_frontier(const AttentionScenario& scenario,
                                          const SaeModel& key_model, const SaeModel& value_model,
                                          std::span<const std::size_t> key_budgets,
                                          std::span<const std::size_t> val_budgets) {
  if (key_budgets.empty() || val_budgets.empty()) {
    throw std::invalid_argument("budget_frontier: budget lists must be non-empty");
  }
  std::vector<FrontierCell> cells;
  cells.reserve(key_budgets.size() * val_budgets.size());
  for (std::size_t kk : key_budgets) {
    for (std::size_t kv : val_budgets) {
      const BudgetPolicy policy{kk, kv};
      cells.push_back({policy, inject(scenario, key_model, value_model, policy).report});
    }
  }
  return cells;
}

void write_frontier_csv(std::span<const FrontierCell> cells, std::ostream& out) {
  std::ostringstream s;
  s << std::setprecision(std::numeric_limits<double>::max_digits10);
  s << "k_key,k_val,mean_kl,max_kl,max_abs_logit_diff,mean_output_rel_err\n";
  for (const auto& c : cells) {
    s << c.policy.k_key << ',' << c.policy.k_val << ',' << c.report.mean_kl << ','
      << c.report.max_kl << ',' << c.report.max_abs_logit_diff << ','
      << c.report.mean_output_rel_err << '\n';
  }
  out << s.str();
}

}  // namespace kvatlas

namespace kvatlas {

void write_scenario_bundle(const ActivationDataset& queries, const ActivationDataset& keys,
                           const ActivationDataset& values, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_dump(queries, out);
  write_dump(keys, out);
  write_dump(values, out);
  out.close();
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

ScenarioBundle read_scenario_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string() + ": missing file");
  ScenarioBundle b;
  b.queries = read_dump(in, path.string() + " [queries]");
  b.keys = read_dump(in, path.string() + " [keys]");
  b.values = read_dump(in, path.string() + " [values]");
  return b;
}

AttentionScenario make_scenario(const ActivationDataset& queries, const ActivationDataset& keys,
                                const ActivationDataset& values, bool causal, double scale) {
  AttentionScenario sc{queries.to_matrix(), keys.to_matrix(), values.to_matrix(), causal, scale};
  sc.validate();
  return sc;
}

}  // namespace kvatlas
