#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "kvatlas/activation_io.hpp"
#include "kvatlas/kernels.hpp"
#include "kvatlas/sae.hpp"

namespace kvatlas {

struct TrainConfig {
  std::uint64_t steps = 30'000;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t k_train = 32;
  std::size_t expansion_factor = 32;
  double lambda = 0.0;
  std::size_t dead_window = 5'000;
  std::uint64_t seed = 0;
  double holdout_fraction = 0.05;
  std::uint64_t log_every = 1'000;
  Backend backend = Backend::Parallel;

  void validate() const;
};

struct LossRecord {
  std::uint64_t step = 0;
  double mse = 0.0;
  double l1_term = 0.0;
};

struct TrainReport {
  double final_train_mse = 0.0;
  double final_holdout_mse = 0.0;
  double dead_feature_fraction = 0.0;
  double mean_norm_ratio = 0.0;
  double holdout_mean_cosine = 0.0;
  double holdout_mean_code_length = 0.0;
  std::vector<LossRecord> loss_history;
  std::vector<std::size_t> holdout_indices;  // into the input dataset, ascending
};

struct HoldoutSplit {
  std::vector<std::size_t> train;    // ascending
  std::vector<std::size_t> holdout;  // ascending
};

/// Deterministic split; holdout gets max(1, round(fraction * n)) rows and
/// training keeps at least one.
HoldoutSplit split_holdout(std::size_t count, double fraction, std::uint64_t seed);

/// b_dec = mean of up to 10,000 sample rows; unit decoder rows drawn
/// isotropically; w_enc is a copy of w_dec; b_enc = 0.
SaeModel init_model(std::size_t d_head, const TrainConfig& config,
                    const ActivationDataset& data_sample, SaeVariant variant);
SaeModel init_model(std::size_t d_head, const TrainConfig& config, const Matrix& data_sample,
                    SaeVariant variant);

/// Renormalizes every decoder row to unit length.
void normalize_decoder_rows(SaeModel& model);

/// Thrown when the loss becomes non-finite.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::uint64_t step, double loss);
  std::uint64_t step() const noexcept { return step_; }

 private:
  std::uint64_t step_;
};

struct TrainHooks {
  std::ostream* log = nullptr;  // receives `step=<n> mse=<f> [l1=<f>] dead=<f>` lines
  /// Called with the dataset row indices of every batch, before the update.
  std::function<void(std::uint64_t step, std::span<const std::size_t> rows)> on_batch;
  /// Called after each optimizer step and decoder renormalization.
  std::function<void(std::uint64_t step, const SaeModel& model)> after_step;
};

struct TrainResult {
  SaeModel model;
  TrainReport report;
};

TrainResult train(const ActivationDataset& data, const TrainConfig& config, SaeVariant variant,
                  const TrainHooks& hooks = {});

struct ShrinkageStats {
  double mean_norm_ratio = 0.0;
  double mean_cosine = 0.0;
  double mean_code_length = 0.0;
};

/// ||x_hat|| / ||x|| and cosine averaged over rows with ||x|| >= 1e-9.
/// L1 models ignore k. Throws std::invalid_argument when every row is near zero.
ShrinkageStats measure_shrinkage(const SaeModel& model, const ActivationDataset& data,
                                 std::size_t k, Backend backend = Backend::Parallel);
ShrinkageStats measure_shrinkage(const SaeModel& model, const Matrix& data, std::size_t k,
                                 Backend backend = Backend::Parallel);

struct LambdaSearch {
  double lambda = 0.0;
  double mean_code_length = 0.0;
  bool within_tolerance = false;
  int trainings = 0;
  TrainResult result;
};

/// Bisects lambda (geometrically) until the L1 model's mean holdout code
/// length is within `tolerance` (relative) of `target_length`.
LambdaSearch calibrate_l1_lambda(const ActivationDataset& data, TrainConfig config,
                                 double target_length, double tolerance = 0.2,
                                 double lambda_low = 1e-4, double lambda_high = 10.0,
                                 int max_trainings = 12);

}  // namespace kvatlas
