#include "kvatlas/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace kvatlas {

namespace {

// Independent seeded streams for the split, initialization and batch sampler.
enum class Stream : std::uint64_t { Split = 1, Init = 2, Batches = 3 };

std::mt19937_64 make_rng(std::uint64_t seed, Stream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

class Adam {
 public:
  Adam(const SaeModel& model, const TrainConfig& config)
      : config_(config),
        m_(SaeGrads::zeros_like(model)),
        v_(SaeGrads::zeros_like(model)) {}

  void step(SaeModel& model, const SaeGrads& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.adam_beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.adam_beta2, static_cast<double>(t_));
    update(model.w_enc.flat(), grads.w_enc.flat(), m_.w_enc.flat(), v_.w_enc.flat(), c1, c2);
    update(model.b_enc, grads.b_enc, m_.b_enc, v_.b_enc, c1, c2);
    update(model.w_dec.flat(), grads.w_dec.flat(), m_.w_dec.flat(), v_.w_dec.flat(), c1, c2);
    update(model.b_dec, grads.b_dec, m_.b_dec, v_.b_dec, c1, c2);
  }

 private:
  void update(std::span<double> p, std::span<const double> g, std::span<double> m,
              std::span<double> v, double c1, double c2) const {
    const double b1 = config_.adam_beta1, b2 = config_.adam_beta2;
    const double lr = config_.learning_rate, eps = config_.adam_eps;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(p.size()); ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }

  const TrainConfig& config_;
  SaeGrads m_;
  SaeGrads v_;
  std::uint64_t t_ = 0;
};

class DeadFeatureTracker {
 public:
  DeadFeatureTracker(std::size_t latent_size, std::size_t window)
      : last_active_(latent_size, 0), window_(window) {}

  void observe(std::span<const LatentCode> codes) {
    for (const auto& code : codes) {
      ++samples_seen_;
      for (std::uint32_t i : code.indices()) last_active_[i] = samples_seen_;
    }
  }

  double dead_fraction() const {
    if (samples_seen_ == 0 || last_active_.empty()) return 0.0;
    const std::uint64_t window_start = samples_seen_ > window_ ? samples_seen_ - window_ : 0;
    const auto dead = std::count_if(last_active_.begin(), last_active_.end(),
                                    [&](std::uint64_t s) { return s <= window_start; });
    return static_cast<double>(dead) / static_cast<double>(last_active_.size());
  }

 private:
  std::vector<std::uint64_t> last_active_;  // 1-based sample number, 0 = never
  std::uint64_t samples_seen_ = 0;
  std::uint64_t window_;
};

Matrix rows_of(const ActivationDataset& data, std::span<const std::size_t> indices) {
  Matrix m(indices.size(), data.d_head());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto src = data.row(indices[r]);
    std::copy(src.begin(), src.end(), m.row(r).begin());
  }
  return m;
}

double mean_sq_error(const SaeModel& model, const Matrix& data, Backend backend) {
  if (data.rows() == 0) return 0.0;
  const auto stats = reconstruct_rows(model, data, model.k_train, backend);
  double sum = 0.0;
  for (const auto& s : stats) sum += s.sq_error;
  return sum / static_cast<double>(stats.size());
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (!(adam_eps > 0.0)) throw std::invalid_argument("adam_eps must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw std::invalid_argument("adam betas must lie in [0, 1)");
  }
  if (k_train == 0) throw std::invalid_argument("k_train must be positive");
  if (expansion_factor == 0) throw std::invalid_argument("expansion_factor must be positive");
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
  if (dead_window == 0) throw std::invalid_argument("dead_window must be positive");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw std::invalid_argument("holdout_fraction must lie in (0, 1)");
  }
}

TrainingDiverged::TrainingDiverged(std::uint64_t step, double loss)
    : std::runtime_error("training diverged at step " + std::to_string(step) +
                         " (loss=" + std::to_string(loss) + ")"),
      step_(step) {}

HoldoutSplit split_holdout(std::size_t count, double fraction, std::uint64_t seed) {
  if (count < 2) throw std::invalid_argument("need at least two rows to split a holdout");
  std::vector<std::size_t> perm(count);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  auto rng = make_rng(seed, Stream::Split);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto n_hold = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(count)));
  n_hold = std::clamp<std::size_t>(n_hold, 1, count - 1);
  HoldoutSplit split;
  split.holdout.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_hold));
  split.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_hold), perm.end());
  std::sort(split.holdout.begin(), split.holdout.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

void normalize_decoder_rows(SaeModel& model) {
  for (std::size_t i = 0; i < model.latent_size; ++i) {
    auto row = model.w_dec.row(i);
    const double norm = std::sqrt(squared_norm(row));
    if (norm > 0.0) {
      for (double& v : row) v /= norm;
    }
  }
}

SaeModel init_model(std::size_t d_head, const TrainConfig& config, const Matrix& data_sample,
                    SaeVariant variant) {
  config.validate();
  if (data_sample.rows() == 0) throw std::invalid_argument("init_model needs a non-empty sample");
  if (data_sample.cols() != d_head) throw std::invalid_argument("sample dimension mismatch");
  const std::size_t m = config.expansion_factor * d_head;
  if (config.k_train > m) {
    throw std::invalid_argument("k_train <= M violated (k_train=" +
                                std::to_string(config.k_train) + ", M=" + std::to_string(m) + ")");
  }
  auto model = SaeModel::zeros(d_head, m, config.k_train, variant, config.lambda);

  const std::size_t n = std::min<std::size_t>(data_sample.rows(), 10'000);
  for (std::size_t r = 0; r < n; ++r) {
    const auto x = data_sample.row(r);
    for (std::size_t t = 0; t < d_head; ++t) model.b_dec[t] += x[t];
  }
  for (double& v : model.b_dec) v /= static_cast<double>(n);

  auto rng = make_rng(config.seed, Stream::Init);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t i = 0; i < m; ++i) {
    auto row = model.w_dec.row(i);
    do {
      for (double& v : row) v = gauss(rng);
    } while (squared_norm(row) < 1e-12);
  }
  normalize_decoder_rows(model);
  model.w_enc = model.w_dec;
  return model;
}

SaeModel init_model(std::size_t d_head, const TrainConfig& config,
                    const ActivationDataset& data_sample, SaeVariant variant) {
  data_sample.validate();
  const std::size_t n = std::min<std::size_t>(data_sample.count(), 10'000);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return init_model(d_head, config, rows_of(data_sample, idx), variant);
}

TrainResult train(const ActivationDataset& data, const TrainConfig& config, SaeVariant variant,
                  const TrainHooks& hooks) {
  config.validate();
  data.validate();
  if (data.count() < config.batch_size) {
    throw std::invalid_argument("data count >= batch_size violated (" +
                                std::to_string(data.count()) + " < " +
                                std::to_string(config.batch_size) + ")");
  }
  const auto split = split_holdout(data.count(), config.holdout_fraction, config.seed);
  const Matrix train_rows = rows_of(data, split.train);
  const Matrix holdout_rows = rows_of(data, split.holdout);

  TrainResult result{init_model(data.d_head(), config, train_rows, variant), {}};
  SaeModel& model = result.model;
  TrainReport& report = result.report;
  report.holdout_indices = split.holdout;

  Adam adam(model, config);
  DeadFeatureTracker dead(model.latent_size, config.dead_window);
  SaeGrads grads = SaeGrads::zeros_like(model);
  auto rng = make_rng(config.seed, Stream::Batches);
  std::uniform_int_distribution<std::size_t> pick(0, train_rows.rows() - 1);
  std::vector<std::size_t> batch(config.batch_size);
  std::vector<std::size_t> batch_dataset_rows(config.batch_size);
  std::vector<LatentCode> codes;

  for (std::uint64_t step = 0; step < config.steps; ++step) {
    for (std::size_t b = 0; b < batch.size(); ++b) {
      batch[b] = pick(rng);
      batch_dataset_rows[b] = split.train[batch[b]];
    }
    if (hooks.on_batch) hooks.on_batch(step, batch_dataset_rows);

    const auto parts = loss_and_grads(model, train_rows, batch, grads, &codes, config.backend);
    if (!std::isfinite(parts.loss)) throw TrainingDiverged(step, parts.loss);
    dead.observe(codes);

    const bool log_now = step == 0 || step + 1 == config.steps ||
                         (config.log_every > 0 && step % config.log_every == 0);
    if (log_now) {
      report.loss_history.push_back({step, parts.mse, parts.l1_term});
      if (hooks.log) {
        std::ostringstream line;
        line << "step=" << step << " mse=" << parts.mse;
        if (variant == SaeVariant::L1) line << " l1=" << parts.l1_term;
        line << " dead=" << dead.dead_fraction() << '\n';
        *hooks.log << line.str() << std::flush;
      }
    }

    adam.step(model, grads);
    normalize_decoder_rows(model);
    if (hooks.after_step) hooks.after_step(step, model);
  }

  report.final_train_mse = mean_sq_error(model, train_rows, config.backend);
  report.final_holdout_mse = mean_sq_error(model, holdout_rows, config.backend);
  report.dead_feature_fraction = dead.dead_fraction();
  const auto shrink = measure_shrinkage(model, holdout_rows, model.k_train, config.backend);
  report.mean_norm_ratio = shrink.mean_norm_ratio;
  report.holdout_mean_cosine = shrink.mean_cosine;
  report.holdout_mean_code_length = shrink.mean_code_length;
  return result;
}

ShrinkageStats measure_shrinkage(const SaeModel& model, const Matrix& data, std::size_t k,
                                 Backend backend) {
  if (data.rows() == 0) throw std::invalid_argument("measure_shrinkage needs data");
  const auto stats = reconstruct_rows(model, data, k, backend);
  ShrinkageStats out;
  std::size_t counted = 0;
  for (const auto& s : stats) {
    if (s.x_norm < kNormFloor) continue;
    ++counted;
    out.mean_norm_ratio += s.x_hat_norm / s.x_norm;
    out.mean_cosine += s.cosine;
    out.mean_code_length += static_cast<double>(s.nnz);
  }
  if (counted == 0) throw std::invalid_argument("all vectors are near zero");
  const auto n = static_cast<double>(counted);
  out.mean_norm_ratio /= n;
  out.mean_cosine /= n;
  out.mean_code_length /= n;
  return out;
}

ShrinkageStats measure_shrinkage(const SaeModel& model, const ActivationDataset& data,
                                 std::size_t k, Backend backend) {
  data.validate();
  return measure_shrinkage(model, data.to_matrix(), k, backend);
}

LambdaSearch calibrate_l1_lambda(const ActivationDataset& data, TrainConfig config,
                                 double target_length, double tolerance, double lambda_low,
                                 double lambda_high, int max_trainings) {
  if (!(target_length > 0.0)) throw std::invalid_argument("target code length must be positive");
  if (!(lambda_low > 0.0 && lambda_low < lambda_high)) {
    throw std::invalid_argument("invalid lambda bracket");
  }
  LambdaSearch best;
  double best_gap = std::numeric_limits<double>::infinity();
  double lo = lambda_low, hi = lambda_high;
  for (int i = 0; i < max_trainings; ++i) {
    config.lambda = std::sqrt(lo * hi);
    auto run = train(data, config, SaeVariant::L1);
    const double length = run.report.holdout_mean_code_length;
    const double gap = std::abs(length - target_length) / target_length;
    ++best.trainings;
    if (gap < best_gap) {
      best_gap = gap;
      best.lambda = config.lambda;
      best.mean_code_length = length;
      best.within_tolerance = gap <= tolerance;
      best.result = std::move(run);
    }
    if (gap <= tolerance) break;
    // Larger lambda gives shorter codes.
    if (length > target_length) {
      lo = config.lambda;
    } else {
      hi = config.lambda;
    }
  }
  return best;
}

}  // namespace kvatlas
