#include "kvatlas/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace kvatlas {

namespace {

// Gains exactly at tau (up to rounding of the subtraction) do not count as below it.
constexpr double kGainSlack = 1e-12;

std::string format_optional(const std::optional<std::size_t>& v) {
  return v ? std::to_string(*v) : std::string("none");
}

std::string csv_field(const std::string& text) {
  if (text.find_first_of(",\"\n\r") == std::string::npos) return text;
  std::string quoted = "\"";
  for (char c : text) {
    if (c == '"') quoted += '"';
    quoted += c;
  }
  return quoted + '"';
}

}  // namespace

void BudgetPolicy::validate() const {
  if (k_key == 0 || k_val == 0) throw std::invalid_argument("budget policy entries must be >= 1");
}

void FidelityCurve::validate() const {
  const std::size_t n = budgets.size();
  if (mean_cosine.size() != n || std_cosine.size() != n || mean_mse.size() != n ||
      marginal_gains.size() != n) {
    throw std::invalid_argument("fidelity curve arrays are not length-aligned");
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (budgets[j] == 0) throw std::invalid_argument("budgets must be positive");
    if (j > 0 && budgets[j] <= budgets[j - 1]) {
      throw std::invalid_argument("budgets must be strictly increasing");
    }
    if (!(mean_cosine[j] >= -1.0 - 1e-12 && mean_cosine[j] <= 1.0 + 1e-12)) {
      throw std::invalid_argument("mean cosine outside [-1, 1]");
    }
  }
}

void FidelityCurve::compute_marginal_gains() {
  marginal_gains.resize(mean_cosine.size());
  for (std::size_t j = 0; j < mean_cosine.size(); ++j) {
    marginal_gains[j] = j == 0 ? mean_cosine[0] : mean_cosine[j] - mean_cosine[j - 1];
  }
}

std::vector<std::size_t> default_budgets(std::size_t latent_size) {
  std::vector<std::size_t> out;
  for (std::size_t k = 1; k <= 128 && k <= latent_size; k *= 2) out.push_back(k);
  return out;
}

FidelityCurve sweep_fidelity(const SaeModel& model, const Matrix& data,
                             std::span<const std::size_t> budgets, Backend backend) {
  if (data.rows() == 0) throw std::invalid_argument("sweep_fidelity: empty data");
  if (budgets.empty()) throw std::invalid_argument("sweep_fidelity: no budgets");
  FidelityCurve curve;
  for (std::size_t k : budgets) {
    if (k == 0 || k > model.latent_size) {
      throw std::invalid_argument("budget " + std::to_string(k) + " outside [1, M=" +
                                  std::to_string(model.latent_size) + "]");
    }
    const auto stats = reconstruct_rows(model, data, k, backend);
    double sum = 0.0, sum_sq = 0.0, err = 0.0;
    std::size_t counted = 0;
    for (const auto& s : stats) {
      err += s.sq_error;
      if (s.x_norm < kNormFloor) continue;
      ++counted;
      sum += s.cosine;
      sum_sq += s.cosine * s.cosine;
    }
    if (counted == 0) throw std::invalid_argument("sweep_fidelity: all vectors near zero");
    const double n = static_cast<double>(counted);
    const double mean = sum / n;
    curve.budgets.push_back(k);
    curve.mean_cosine.push_back(mean);
    curve.std_cosine.push_back(std::sqrt(std::max(0.0, sum_sq / n - mean * mean)));
    curve.mean_mse.push_back(err / static_cast<double>(stats.size()));
  }
  curve.compute_marginal_gains();
  curve.validate();
  curve.elbow = curve.size() >= 2 ? detect_elbow(curve) : std::nullopt;
  return curve;
}

FidelityCurve sweep_fidelity(const SaeModel& model, const ActivationDataset& data,
                             std::span<const std::size_t> budgets, Backend backend) {
  data.validate();
  auto curve = sweep_fidelity(model, data.to_matrix(), budgets, backend);
  curve.meta = {data.kind(), data.layer_index(), data.model_tag()};
  return curve;
}

std::optional<std::size_t> detect_elbow(const FidelityCurve& curve, double tau) {
  const std::size_t n = curve.budgets.size();
  if (n < 2) throw std::invalid_argument("detect_elbow needs at least two budgets");
  if (curve.mean_cosine.size() != n) throw std::invalid_argument("curve arrays misaligned");
  // Walk backwards: the tail [i+1, n) stays below tau while i decreases.
  std::optional<std::size_t> elbow;
  for (std::size_t i = n - 1; i-- > 0;) {
    const double per_k = (curve.mean_cosine[i + 1] - curve.mean_cosine[i]) /
                         static_cast<double>(curve.budgets[i + 1] - curve.budgets[i]);
    if (!(per_k < tau - kGainSlack)) break;
    elbow = curve.budgets[i];
  }
  return elbow;
}

std::optional<std::size_t> crossing_budget(const FidelityCurve& curve, double threshold) {
  for (std::size_t j = 0; j < curve.size(); ++j) {
    if (curve.mean_cosine[j] >= threshold) return curve.budgets[j];
  }
  return std::nullopt;
}

LayerDepth parse_layer_depth(const std::string& text) {
  if (text == "shallow") return LayerDepth::Shallow;
  if (text == "deep") return LayerDepth::Deep;
  throw std::invalid_argument("unknown layer depth '" + text + "' (expected shallow|deep)");
}

BudgetPolicy recommend_budget(const FidelityCurve& key_curve, const FidelityCurve& value_curve,
                              LayerDepth depth, double tau) {
  BudgetPolicy policy;
  const auto elbow = key_curve.size() >= 2 ? detect_elbow(key_curve, tau) : std::nullopt;
  policy.k_key = std::max<std::size_t>(elbow.value_or(kDefaultKeyBudget), 1);
  if (depth == LayerDepth::Shallow) {
    policy.k_val = policy.k_key;
    return policy;
  }
  policy.k_val = kDefaultValueBudget;
  for (std::size_t j = 0; j < value_curve.size(); ++j) {
    const std::size_t k = value_curve.budgets[j];
    if (k < policy.k_key || value_curve.mean_cosine[j] < kFidelityThreshold) continue;
    if (k <= 2 * policy.k_key) policy.k_val = k;
    break;
  }
  return policy;
}

AsymmetryReport asymmetry_report(const FidelityCurve& key_curve,
                                 const FidelityCurve& value_curve, LayerDepth depth,
                                 double tau) {
  if (key_curve.budgets != value_curve.budgets) {
    throw std::invalid_argument("asymmetry_report: key and value curves use different budgets");
  }
  AsymmetryReport r;
  r.budgets = key_curve.budgets;
  r.key_fidelity = key_curve.mean_cosine;
  r.value_fidelity = value_curve.mean_cosine;
  for (std::size_t j = 0; j < r.budgets.size(); ++j) {
    r.gap.push_back(r.key_fidelity[j] - r.value_fidelity[j]);
  }
  r.key_crossing = crossing_budget(key_curve);
  r.value_crossing = crossing_budget(value_curve);
  if (r.budgets.size() >= 2) {
    r.key_elbow = detect_elbow(key_curve, tau);
    r.value_elbow = detect_elbow(value_curve, tau);
  }
  r.depth = depth;
  r.policy = recommend_budget(key_curve, value_curve, depth, tau);
  return r;
}

void write_asymmetry_report(const AsymmetryReport& r, std::ostream& out) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4);
  s << "K\tkey_F\tvalue_F\tgap\n";
  for (std::size_t j = 0; j < r.budgets.size(); ++j) {
    s << r.budgets[j] << '\t' << r.key_fidelity[j] << '\t' << r.value_fidelity[j] << '\t'
      << r.gap[j] << '\n';
  }
  s << "key_crossing_0.80: " << format_optional(r.key_crossing) << '\n';
  s << "value_crossing_0.80: " << format_optional(r.value_crossing) << '\n';
  s << "key_elbow: " << format_optional(r.key_elbow) << '\n';
  s << "value_elbow: " << format_optional(r.value_elbow) << '\n';
  s << "layer_depth: " << (r.depth == LayerDepth::Deep ? "deep" : "shallow") << '\n';
  s << "recommended_budget: k_key=" << r.policy.k_key << " k_val=" << r.policy.k_val << '\n';
  out << s.str();
}

FeatureTrace trace_features(const SaeModel& model, const ActivationDataset& vectors,
                            std::vector<std::string> token_labels, std::size_t k,
                            std::size_t top_n) {
  vectors.validate();
  if (token_labels.size() != vectors.count()) {
    throw std::invalid_argument("token label count (" + std::to_string(token_labels.size()) +
                                ") does not match vector count (" +
                                std::to_string(vectors.count()) + ")");
  }
  FeatureTrace trace;
  trace.tokens = std::move(token_labels);
  trace.records.reserve(vectors.count());
  for (std::size_t p = 0; p < vectors.count(); ++p) {
    auto rec = reconstruct_any(model, vectors.row_as_double(p), k);
    TraceRecord record;
    const auto idx = rec.code.indices();
    const auto val = rec.code.values();
    for (std::size_t j = 0; j < idx.size(); ++j) record.top.push_back({idx[j], val[j]});
    std::stable_sort(record.top.begin(), record.top.end(),
                     [](const FeatureActivation& a, const FeatureActivation& b) {
                       return a.activation > b.activation;
                     });
    if (record.top.size() > top_n) record.top.resize(top_n);
    record.code = std::move(rec.code);
    trace.records.push_back(std::move(record));
  }
  return trace;
}

HeatmapGrid heatmap_grid(const FeatureTrace& trace) {
  std::set<std::uint32_t> active;
  for (const auto& r : trace.records) {
    for (std::uint32_t i : r.code.indices()) active.insert(i);
  }
  HeatmapGrid grid;
  grid.features.assign(active.begin(), active.end());
  grid.activations = Matrix(grid.features.size(), trace.records.size());
  std::map<std::uint32_t, std::size_t> row_of;
  for (std::size_t f = 0; f < grid.features.size(); ++f) row_of[grid.features[f]] = f;
  for (std::size_t p = 0; p < trace.records.size(); ++p) {
    const auto& code = trace.records[p].code;
    for (std::size_t j = 0; j < code.nnz(); ++j) {
      grid.activations(row_of[code.indices()[j]], p) = code.values()[j];
    }
  }
  return grid;
}

void write_curve_csv(const FidelityCurve& curve, std::ostream& out) {
  std::ostringstream s;
  s << std::setprecision(std::numeric_limits<double>::max_digits10);
  s << "K,mean_cos,std_cos,mean_mse,marginal_gain\n";
  for (std::size_t j = 0; j < curve.size(); ++j) {
    s << curve.budgets[j] << ',' << curve.mean_cosine[j] << ',' << curve.std_cosine[j] << ','
      << curve.mean_mse[j] << ',' << curve.marginal_gains[j] << '\n';
  }
  out << s.str();
}

FidelityCurve read_curve_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("curve CSV: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "K,mean_cos,std_cos,mean_mse,marginal_gain") {
    throw std::runtime_error("curve CSV: unexpected header '" + line + "'");
  }
  FidelityCurve curve;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::istringstream fields(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(fields, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) {
      throw std::runtime_error("curve CSV line " + std::to_string(line_no) +
                               ": expected 5 fields");
    }
    try {
      curve.budgets.push_back(std::stoull(cells[0]));
      curve.mean_cosine.push_back(std::stod(cells[1]));
      curve.std_cosine.push_back(std::stod(cells[2]));
      curve.mean_mse.push_back(std::stod(cells[3]));
      curve.marginal_gains.push_back(std::stod(cells[4]));
    } catch (const std::logic_error&) {
      throw std::runtime_error("curve CSV line " + std::to_string(line_no) + ": bad number");
    }
  }
  if (curve.budgets.empty()) throw std::runtime_error("curve CSV: no rows");
  try {
    curve.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("curve CSV: ") + e.what());
  }
  curve.elbow = curve.size() >= 2 ? detect_elbow(curve) : std::nullopt;
  return curve;
}

void write_trace_csv(const FeatureTrace& trace, std::ostream& out) {
  std::ostringstream s;
  s << std::setprecision(std::numeric_limits<double>::max_digits10);
  s << "pos,token,rank,feature,activation\n";
  for (std::size_t p = 0; p < trace.records.size(); ++p) {
    const auto& top = trace.records[p].top;
    for (std::size_t r = 0; r < top.size(); ++r) {
      s << p << ',' << csv_field(trace.tokens[p]) << ',' << r << ',' << top[r].feature << ','
        << top[r].activation << '\n';
    }
  }
  out << s.str();
}

void write_heatmap_tsv(const HeatmapGrid& grid, const FeatureTrace& trace, std::ostream& out) {
  std::ostringstream s;
  s << std::setprecision(std::numeric_limits<double>::max_digits10);
  s << "feature";
  for (std::size_t p = 0; p < trace.tokens.size(); ++p) s << '\t' << p << ':' << trace.tokens[p];
  s << '\n';
  for (std::size_t f = 0; f < grid.features.size(); ++f) {
    s << grid.features[f];
    for (std::size_t p = 0; p < grid.activations.cols(); ++p) s << '\t' << grid.activations(f, p);
    s << '\n';
  }
  out << s.str();
}

}  // namespace kvatlas
