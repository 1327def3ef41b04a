// kvatlas: generate synthetic K/V dumps, train sparse autoencoders on them,
// sweep reconstruction fidelity, compare Key/Value curves, inject
// reconstructions into attention and trace per-token features.
//
// Exit codes: 0 success, 1 runtime/computation failure, 2 usage/validation.

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kvatlas/activation_io.hpp"
#include "kvatlas/analysis.hpp"
#include "kvatlas/attention.hpp"
#include "kvatlas/kernels.hpp"
#include "kvatlas/sae.hpp"
#include "kvatlas/training.hpp"
#include "run_support.hpp"

namespace fs = std::filesystem;
using namespace kvatlas;
using namespace kvatlas::cli;

namespace {

struct GlobalOptions {
  std::uint64_t seed = 0;
  int threads = 0;
  bool quiet = false;
};

std::string str(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
std::string str(const T& v) {
  return std::to_string(v);
}

fs::path manifest_path_for(const fs::path& output) {
  auto p = output;
  p += ".manifest.json";
  return p;
}

/// Emits `text` to `output` atomically, or to stdout when no path is given.
void emit(const std::optional<fs::path>& output, const std::string& text) {
  if (output) {
    write_text_atomically(*output, text);
  } else {
    std::cout << text << std::flush;
  }
}

void maybe_manifest(const RunManifest& manifest, const std::optional<fs::path>& output,
                    const std::optional<fs::path>& explicit_path) {
  if (explicit_path) {
    write_manifest(manifest, *explicit_path);
  } else if (output) {
    write_manifest(manifest, manifest_path_for(*output));
  }
}

// ---------------------------------------------------------------- gen

struct GenOptions {
  SyntheticSpec spec;
  std::string kind = "key";
  fs::path output;
  std::optional<fs::path> scenario_out;
  std::size_t scenario_tokens = 64;
};

void add_gen(CLI::App& app, GenOptions& o) {
  auto* cmd = app.add_subcommand("gen", "Generate a synthetic ground-truth-dictionary dump");
  cmd->add_option("--dict,--true-dict-size", o.spec.true_dict_size, "Number of true atoms M*");
  cmd->add_option("--dim,--d-head", o.spec.d_head, "Vector dimension");
  cmd->add_option("--sparsity,--atoms-per-sample", o.spec.atoms_per_sample,
                  "Atoms per sample s");
  cmd->add_option("--coeff-low", o.spec.coeff_low, "Lower coefficient bound");
  cmd->add_option("--coeff-high", o.spec.coeff_high, "Upper coefficient bound");
  cmd->add_option("--noise,--noise-sigma", o.spec.noise_sigma, "Additive noise sigma");
  cmd->add_option("--n,--sample-count", o.spec.sample_count, "Number of samples");
  cmd->add_option("--kind", o.kind, "key|value|query")->check(CLI::IsMember({"key", "value", "query"}));
  cmd->add_option("-o,--output", o.output, "Output dump path (sidecar gets .gt)")->required();
  cmd->add_option("--scenario-out", o.scenario_out,
                  "Also write an attention scenario bundle drawn from the same dictionary");
  cmd->add_option("--scenario-tokens", o.scenario_tokens, "Tokens per scenario role")
      ->check(CLI::PositiveNumber);
}

int run_gen(GenOptions o, const GlobalOptions& g) {
  o.spec.seed = g.seed;
  o.spec.kind = parse_vector_kind(o.kind);
  try {
    o.spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const std::uint64_t n = o.spec.sample_count;
  auto spec = o.spec;
  if (o.scenario_out) spec.sample_count += 3 * o.scenario_tokens;

  std::map<std::string, std::string> cfg{
      {"true_dict_size", str(o.spec.true_dict_size)},
      {"d_head", str(o.spec.d_head)},
      {"atoms_per_sample", str(o.spec.atoms_per_sample)},
      {"coeff_low", str(o.spec.coeff_low)},
      {"coeff_high", str(o.spec.coeff_high)},
      {"noise_sigma", str(o.spec.noise_sigma)},
      {"sample_count", str(o.spec.sample_count)},
      {"kind", o.kind},
      {"scenario_tokens", o.scenario_out ? str(o.scenario_tokens) : "0"}};
  write_manifest(make_manifest("gen", cfg, g.seed, {}), manifest_path_for(o.output));

  auto data = generate_synthetic(spec);
  std::vector<std::size_t> main_rows(n);
  std::iota(main_rows.begin(), main_rows.end(), std::size_t{0});
  auto dump = data.dataset.subset(main_rows);
  GroundTruth truth = data.truth;
  truth.indices.resize(n * truth.atoms_per_sample);
  truth.coefficients.resize(n * truth.atoms_per_sample);

  write_atomically(o.output, [&](const fs::path& tmp) { write_dump(dump, tmp); });
  write_atomically(ground_truth_path(o.output),
                   [&](const fs::path& tmp) { write_ground_truth(truth, tmp); });

  if (o.scenario_out) {
    auto block = [&](std::size_t b, VectorKind kind) {
      std::vector<std::size_t> rows(o.scenario_tokens);
      std::iota(rows.begin(), rows.end(), n + b * o.scenario_tokens);
      auto ds = data.dataset.subset(rows);
      return ActivationDataset(ds.d_head(), kind, std::vector<float>(ds.values().begin(), ds.values().end()),
                               0, 0, ds.model_tag());
    };
    const auto q = block(0, VectorKind::Query);
    const auto k = block(1, VectorKind::Key);
    const auto v = block(2, VectorKind::Value);
    write_atomically(*o.scenario_out,
                     [&](const fs::path& tmp) { write_scenario_bundle(q, k, v, tmp); });
  }
  if (!g.quiet) {
    std::cerr << "wrote " << o.output.string() << " (" << n << " x " << o.spec.d_head << ") and "
              << ground_truth_path(o.output).string() << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainOptions {
  fs::path data;
  TrainConfig config;
  std::string variant = "topk";
  fs::path output;
  std::optional<double> target_code_length;
  bool serial = false;
};

void add_train(CLI::App& app, TrainOptions& o) {
  auto* cmd = app.add_subcommand("train", "Train a Top-K or L1 sparse autoencoder");
  cmd->add_option("data", o.data, "Activation dump")->required()->check(CLI::ExistingFile);
  cmd->add_option("--steps", o.config.steps, "Optimizer steps");
  cmd->add_option("--batch-size", o.config.batch_size, "Batch size")->check(CLI::PositiveNumber);
  cmd->add_option("--lr,--learning-rate", o.config.learning_rate, "Adam learning rate");
  cmd->add_option("--adam-beta1", o.config.adam_beta1);
  cmd->add_option("--adam-beta2", o.config.adam_beta2);
  cmd->add_option("--adam-eps", o.config.adam_eps);
  cmd->add_option("--k-train", o.config.k_train, "Top-K training budget")->check(CLI::PositiveNumber);
  cmd->add_option("--expansion,--expansion-factor", o.config.expansion_factor,
                  "M = expansion * d_head")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--lambda", o.config.lambda, "L1 penalty weight");
  cmd->add_option("--dead-window", o.config.dead_window, "Dead-feature window in samples");
  cmd->add_option("--holdout-fraction", o.config.holdout_fraction);
  cmd->add_option("--log-every", o.config.log_every, "Log interval in steps");
  cmd->add_option("--variant", o.variant, "topk|l1")->check(CLI::IsMember({"topk", "l1"}));
  cmd->add_option("--target-code-length", o.target_code_length,
                  "L1 only: bisect lambda to this mean code length (+-20%)");
  cmd->add_flag("--serial", o.serial, "Use the serial reference kernels");
  cmd->add_option("-o,--output", o.output, "Model output path")->required();
}

int run_train(TrainOptions o, const GlobalOptions& g) {
  o.config.seed = g.seed;
  o.config.backend = o.serial ? Backend::Serial : Backend::Parallel;
  const auto variant = o.variant == "l1" ? SaeVariant::L1 : SaeVariant::TopK;
  if (o.target_code_length && variant != SaeVariant::L1) {
    throw UsageError("--target-code-length requires --variant l1");
  }
  try {
    o.config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  std::map<std::string, std::string> cfg{
      {"steps", str(o.config.steps)},
      {"batch_size", str(o.config.batch_size)},
      {"learning_rate", str(o.config.learning_rate)},
      {"adam_beta1", str(o.config.adam_beta1)},
      {"adam_beta2", str(o.config.adam_beta2)},
      {"adam_eps", str(o.config.adam_eps)},
      {"k_train", str(o.config.k_train)},
      {"expansion_factor", str(o.config.expansion_factor)},
      {"lambda", str(o.config.lambda)},
      {"dead_window", str(o.config.dead_window)},
      {"holdout_fraction", str(o.config.holdout_fraction)},
      {"log_every", str(o.config.log_every)},
      {"variant", o.variant},
      {"target_code_length", o.target_code_length ? str(*o.target_code_length) : "none"}};
  write_manifest(make_manifest("train", cfg, g.seed, {o.data}), manifest_path_for(o.output));

  const auto data = read_dump(o.data);
  if (o.config.k_train > o.config.expansion_factor * data.d_head()) {
    throw UsageError("k_train <= M violated");
  }
  if (data.count() < o.config.batch_size) {
    throw UsageError("data count (" + std::to_string(data.count()) + ") < batch_size");
  }

  TrainResult result;
  if (o.target_code_length) {
    auto search = calibrate_l1_lambda(data, o.config, *o.target_code_length);
    if (!g.quiet) {
      std::cerr << "lambda=" << search.lambda << " mean_code_length=" << search.mean_code_length
                << " trainings=" << search.trainings
                << (search.within_tolerance ? "" : " (outside tolerance)") << '\n';
    }
    result = std::move(search.result);
  } else {
    TrainHooks hooks;
    if (!g.quiet) hooks.log = &std::cerr;
    result = train(data, o.config, variant, hooks);
  }

  write_atomically(o.output, [&](const fs::path& tmp) { save_model(result.model, tmp); });

  std::ostringstream csv;
  csv << std::setprecision(17) << "step,mse,l1_term\n";
  for (const auto& r : result.report.loss_history) {
    csv << r.step << ',' << r.mse << ',' << r.l1_term << '\n';
  }
  auto report_path = o.output;
  report_path += ".report.csv";
  write_text_atomically(report_path, csv.str());

  const auto& rep = result.report;
  std::ostringstream summary;
  summary << std::setprecision(10);
  summary << "variant: " << to_string(result.model.variant) << '\n'
          << "lambda: " << result.model.lambda << '\n'
          << "d_head: " << result.model.d_head << '\n'
          << "latent_size: " << result.model.latent_size << '\n'
          << "k_train: " << result.model.k_train << '\n'
          << "steps: " << o.config.steps << '\n'
          << "optimizer: adam lr=" << o.config.learning_rate << " beta1=" << o.config.adam_beta1
          << " beta2=" << o.config.adam_beta2 << " eps=" << o.config.adam_eps << '\n'
          << "final_train_mse: " << rep.final_train_mse << '\n'
          << "final_holdout_mse: " << rep.final_holdout_mse << '\n'
          << "holdout_mean_cosine: " << rep.holdout_mean_cosine << '\n'
          << "holdout_mean_code_length: " << rep.holdout_mean_code_length << '\n'
          << "dead_feature_fraction: " << rep.dead_feature_fraction << '\n'
          << "mean_norm_ratio: " << rep.mean_norm_ratio << '\n';
  auto summary_path = o.output;
  summary_path += ".summary.txt";
  write_text_atomically(summary_path, summary.str());
  return 0;
}

// ---------------------------------------------------------------- sweep

struct SweepOptions {
  fs::path model;
  fs::path data;
  std::string budgets;
  std::optional<fs::path> output;
  std::optional<fs::path> manifest;
};

void add_sweep(CLI::App& app, SweepOptions& o) {
  auto* cmd = app.add_subcommand("sweep", "Fidelity-vs-budget curve (CSV)");
  cmd->add_option("model", o.model, "Model file")->required()->check(CLI::ExistingFile);
  cmd->add_option("data", o.data, "Activation dump")->required()->check(CLI::ExistingFile);
  cmd->add_option("--budgets", o.budgets, "Comma-separated budgets (default 1,2,4,...,128 within M)");
  cmd->add_option("-o,--output", o.output, "Curve CSV (stdout if omitted)");
  cmd->add_option("--manifest", o.manifest, "Manifest path (default <output>.manifest.json)");
}

int run_sweep(const SweepOptions& o, const GlobalOptions& g) {
  std::optional<std::vector<std::size_t>> budgets;
  if (!o.budgets.empty()) budgets = parse_budget_list(o.budgets);
  maybe_manifest(make_manifest("sweep", {{"budgets", o.budgets.empty() ? "default" : o.budgets}},
                               g.seed, {o.model, o.data}),
                 o.output, o.manifest);
  const auto model = load_model(o.model);
  const auto data = read_dump(o.data);
  if (data.d_head() != model.d_head) throw UsageError("model and data d_head differ");
  const auto grid = budgets ? *budgets : default_budgets(model.latent_size);
  for (std::size_t k : grid) {
    if (k > model.latent_size) {
      throw UsageError("budget " + std::to_string(k) + " exceeds M=" +
                       std::to_string(model.latent_size));
    }
  }
  const auto curve = sweep_fidelity(model, data, grid);
  std::ostringstream out;
  write_curve_csv(curve, out);
  emit(o.output, out.str());
  if (!g.quiet) {
    std::cerr << "elbow(tau=" << kDefaultElbowTau << "): "
              << (curve.elbow ? std::to_string(*curve.elbow) : std::string("none")) << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------- analyze

struct AnalyzeOptions {
  fs::path key_curve;
  fs::path value_curve;
  std::string depth = "deep";
  double tau = kDefaultElbowTau;
  std::optional<fs::path> output;
  std::optional<fs::path> manifest;
};

void add_analyze(CLI::App& app, AnalyzeOptions& o) {
  auto* cmd = app.add_subcommand("analyze", "Key/Value asymmetry report and budget recommendation");
  cmd->add_option("key_curve", o.key_curve, "Key curve CSV")->required()->check(CLI::ExistingFile);
  cmd->add_option("value_curve", o.value_curve, "Value curve CSV")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--depth", o.depth, "shallow|deep")->check(CLI::IsMember({"shallow", "deep"}));
  cmd->add_option("--tau", o.tau, "Elbow threshold on per-unit-K gain")->check(CLI::PositiveNumber);
  cmd->add_option("-o,--output", o.output, "Report path (stdout if omitted)");
  cmd->add_option("--manifest", o.manifest);
}

FidelityCurve load_curve(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return read_curve_csv(in);
  } catch (const std::runtime_error& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

int run_analyze(const AnalyzeOptions& o, const GlobalOptions& g) {
  maybe_manifest(make_manifest("analyze", {{"depth", o.depth}, {"tau", str(o.tau)}}, g.seed,
                               {o.key_curve, o.value_curve}),
                 o.output, o.manifest);
  const auto key = load_curve(o.key_curve);
  const auto value = load_curve(o.value_curve);
  if (key.budgets != value.budgets) throw UsageError("key and value curves use different budgets");
  const auto report = asymmetry_report(key, value, parse_layer_depth(o.depth), o.tau);
  std::ostringstream out;
  write_asymmetry_report(report, out);
  emit(o.output, out.str());
  return 0;
}

// ---------------------------------------------------------------- inject

struct InjectOptions {
  fs::path key_model;
  fs::path value_model;
  std::optional<fs::path> scenario;
  std::optional<fs::path> queries, keys, values;
  std::size_t k_key = kDefaultKeyBudget;
  std::size_t k_val = kDefaultValueBudget;
  std::string key_budgets;
  std::string val_budgets;
  std::string mode = "both";
  bool causal = false;
  double scale = 0.0;
  std::optional<fs::path> output;
  std::optional<fs::path> manifest;
};

void add_inject(CLI::App& app, InjectOptions& o) {
  auto* cmd = app.add_subcommand("inject", "Attention distortion under reconstructed K/V");
  cmd->add_option("--key-model", o.key_model)->required()->check(CLI::ExistingFile);
  cmd->add_option("--value-model", o.value_model)->required()->check(CLI::ExistingFile);
  auto* sc = cmd->add_option("--scenario", o.scenario, "Scenario bundle (Q, K, V dumps)")
                 ->check(CLI::ExistingFile);
  auto* q = cmd->add_option("--queries", o.queries)->check(CLI::ExistingFile);
  auto* k = cmd->add_option("--keys", o.keys)->check(CLI::ExistingFile);
  auto* v = cmd->add_option("--values", o.values)->check(CLI::ExistingFile);
  sc->excludes(q)->excludes(k)->excludes(v);
  q->needs(k)->needs(v);
  cmd->add_option("--k-key", o.k_key)->check(CLI::PositiveNumber);
  cmd->add_option("--k-val", o.k_val)->check(CLI::PositiveNumber);
  cmd->add_option("--key-budgets", o.key_budgets, "Frontier grid: key budgets");
  cmd->add_option("--val-budgets", o.val_budgets, "Frontier grid: value budgets");
  cmd->add_option("--mode", o.mode, "both|keys|values")
      ->check(CLI::IsMember({"both", "keys", "values"}));
  cmd->add_flag("--causal", o.causal);
  cmd->add_option("--scale", o.scale, "Logit scale (default 1/sqrt(d_head))");
  cmd->add_option("-o,--output", o.output, "Report CSV (stdout if omitted)");
  cmd->add_option("--manifest", o.manifest);
}

int run_inject(const InjectOptions& o, const GlobalOptions& g) {
  if (!o.scenario && !o.queries) throw UsageError("need --scenario or --queries/--keys/--values");
  const bool grid = !o.key_budgets.empty() || !o.val_budgets.empty();
  if (grid && o.mode != "both") throw UsageError("--mode applies to single-policy runs only");
  std::vector<fs::path> inputs{o.key_model, o.value_model};
  if (o.scenario) {
    inputs.push_back(*o.scenario);
  } else {
    inputs.insert(inputs.end(), {*o.queries, *o.keys, *o.values});
  }
  std::map<std::string, std::string> cfg{{"k_key", str(o.k_key)},
                                         {"k_val", str(o.k_val)},
                                         {"key_budgets", o.key_budgets},
                                         {"val_budgets", o.val_budgets},
                                         {"mode", o.mode},
                                         {"causal", o.causal ? "true" : "false"},
                                         {"scale", str(o.scale)}};
  const auto key_budgets = o.key_budgets.empty() ? std::vector<std::size_t>{o.k_key}
                                                 : parse_budget_list(o.key_budgets);
  const auto val_budgets = o.val_budgets.empty() ? std::vector<std::size_t>{o.k_val}
                                                 : parse_budget_list(o.val_budgets);
  maybe_manifest(make_manifest("inject", cfg, g.seed, inputs), o.output, o.manifest);

  const auto key_model = load_model(o.key_model);
  const auto value_model = load_model(o.value_model);
  ScenarioBundle bundle = o.scenario ? read_scenario_bundle(*o.scenario)
                                     : ScenarioBundle{read_dump(*o.queries), read_dump(*o.keys),
                                                      read_dump(*o.values)};
  if (!g.quiet && (bundle.keys.model_tag() != bundle.queries.model_tag() ||
                   bundle.values.model_tag() != bundle.queries.model_tag())) {
    std::cerr << "warning: scenario dumps carry different model tags ('"
              << bundle.queries.model_tag() << "', '" << bundle.keys.model_tag() << "', '"
              << bundle.values.model_tag() << "')\n";
  }
  AttentionScenario scenario;
  try {
    scenario = make_scenario(bundle.queries, bundle.keys, bundle.values, o.causal, o.scale);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (key_model.d_head != scenario.d_head() || value_model.d_head != scenario.d_head()) {
    throw UsageError("model d_head does not match scenario");
  }
  for (std::size_t k : key_budgets) {
    if (k > key_model.latent_size) throw UsageError("key budget exceeds key model M");
  }
  for (std::size_t k : val_budgets) {
    if (k > value_model.latent_size) throw UsageError("value budget exceeds value model M");
  }

  std::vector<FrontierCell> cells;
  if (grid) {
    cells = budget_frontier(scenario, key_model, value_model, key_budgets, val_budgets);
  } else {
    const auto mode = o.mode == "keys"     ? InjectionMode::KeysOnly
                      : o.mode == "values" ? InjectionMode::ValuesOnly
                                           : InjectionMode::Both;
    const BudgetPolicy policy{o.k_key, o.k_val};
    cells.push_back({policy, inject(scenario, key_model, value_model, policy, mode).report});
  }
  std::ostringstream out;
  write_frontier_csv(cells, out);
  emit(o.output, out.str());
  return 0;
}

// ---------------------------------------------------------------- trace

struct TraceOptions {
  fs::path model;
  fs::path data;
  std::optional<fs::path> labels;
  std::size_t k = 8;
  std::size_t top_n = 5;
  std::optional<std::size_t> limit;
  std::optional<fs::path> output;
  std::optional<fs::path> heatmap;
  std::optional<fs::path> manifest;
};

void add_trace(CLI::App& app, TraceOptions& o) {
  auto* cmd = app.add_subcommand("trace", "Per-token top feature activations");
  cmd->add_option("model", o.model)->required()->check(CLI::ExistingFile);
  cmd->add_option("data", o.data)->required()->check(CLI::ExistingFile);
  cmd->add_option("--labels", o.labels, "Token labels, one per line")->check(CLI::ExistingFile);
  cmd->add_option("--k", o.k, "Budget")->check(CLI::PositiveNumber);
  cmd->add_option("--top-n", o.top_n, "Features reported per position")->check(CLI::PositiveNumber);
  cmd->add_option("--limit", o.limit, "Trace only the first N vectors")->check(CLI::PositiveNumber);
  cmd->add_option("-o,--output", o.output, "Trace CSV (stdout if omitted)");
  cmd->add_option("--heatmap", o.heatmap, "Heatmap TSV (features x positions)");
  cmd->add_option("--manifest", o.manifest);
}

int run_trace(const TraceOptions& o, const GlobalOptions& g) {
  std::vector<fs::path> inputs{o.model, o.data};
  if (o.labels) inputs.push_back(*o.labels);
  maybe_manifest(make_manifest("trace",
                               {{"k", str(o.k)},
                                {"top_n", str(o.top_n)},
                                {"limit", o.limit ? str(*o.limit) : "none"}},
                               g.seed, inputs),
                 o.output, o.manifest);
  const auto model = load_model(o.model);
  auto data = read_dump(o.data);
  if (data.d_head() != model.d_head) throw UsageError("model and data d_head differ");
  if (o.k > model.latent_size) throw UsageError("budget exceeds M");
  if (o.limit && *o.limit < data.count()) {
    std::vector<std::size_t> rows(*o.limit);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    data = data.subset(rows);
  }
  std::vector<std::string> labels;
  if (o.labels) {
    std::ifstream in(*o.labels);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      labels.push_back(line);
    }
    if (labels.size() != data.count()) {
      throw UsageError("label count (" + std::to_string(labels.size()) +
                       ") does not match vector count (" + std::to_string(data.count()) + ")");
    }
  } else {
    for (std::size_t p = 0; p < data.count(); ++p) labels.push_back("t" + std::to_string(p));
  }
  const auto trace = trace_features(model, data, std::move(labels), o.k, o.top_n);
  std::ostringstream out;
  write_trace_csv(trace, out);
  emit(o.output, out.str());
  if (o.heatmap) {
    std::ostringstream tsv;
    write_heatmap_tsv(heatmap_grid(trace), trace, tsv);
    write_text_atomically(*o.heatmap, tsv.str());
  }
  return 0;
}

int resolve_threads(int flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("KVATLAS_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v > 0) return v;
    } catch (const std::logic_error&) {
    }
    throw UsageError(std::string("KVATLAS_THREADS must be a positive integer, got '") + env + "'");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kvatlas: sparse autoencoder toolkit for attention Key/Value vectors"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_version_flag("--version", tool_version());

  GlobalOptions global;
  app.add_option("--seed", global.seed, "Seed for every random stream")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.add_option("--threads", global.threads, "OpenMP threads (fallback: KVATLAS_THREADS)");
  app.add_flag("--quiet", global.quiet, "Suppress progress output");

  GenOptions gen;
  TrainOptions tr;
  SweepOptions sw;
  AnalyzeOptions an;
  InjectOptions inj;
  TraceOptions tc;
  add_gen(app, gen);
  add_train(app, tr);
  add_sweep(app, sw);
  add_analyze(app, an);
  add_inject(app, inj);
  add_trace(app, tc);
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  std::vector<std::string> args(argv, argv + argc);
  try {
    args = expand_config_args(args, {"gen", "train", "sweep", "analyze", "inject", "trace"});
    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  }

  try {
    set_thread_count(resolve_threads(global.threads));
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "gen") return run_gen(gen, global);
    if (name == "train") return run_train(tr, global);
    if (name == "sweep") return run_sweep(sw, global);
    if (name == "analyze") return run_analyze(an, global);
    if (name == "inject") return run_inject(inj, global);
    if (name == "trace") return run_trace(tc, global);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
