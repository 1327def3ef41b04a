#pragma once

// Hot loops of training and evaluation. Each kernel has a serial reference
// and an OpenMP version; both produce the same numbers independent of the
// thread count (per-row work is independent, reductions run in fixed order).

#include <cstddef>
#include <span>
#include <vector>

#include "kvatlas/matrix.hpp"
#include "kvatlas/sae.hpp"

namespace kvatlas {

enum class Backend { Serial, Parallel };

/// Gradients shaped like the model parameters.
struct SaeGrads {
  Matrix w_enc;
  std::vector<double> b_enc;
  Matrix w_dec;
  std::vector<double> b_dec;

  static SaeGrads zeros_like(const SaeModel& model);
  void set_zero();
};

struct LossParts {
  double loss = 0.0;     // mse + l1_term
  double mse = 0.0;      // mean over rows of ||x - x_hat||^2
  double l1_term = 0.0;  // lambda * mean over rows of sum(z); zero for TopK
};

/// Per-row result of evaluating a model at one budget.
struct RowStats {
  double x_norm = 0.0;
  double x_hat_norm = 0.0;
  double cosine = 0.0;     // 0 when ||x_hat|| < 1e-9
  double sq_error = 0.0;   // ||x - x_hat||^2
  std::size_t nnz = 0;
};

inline constexpr double kNormFloor = 1e-9;

namespace kernels {

/// Loss and analytic gradients over `data` rows listed in `rows`. The gate
/// (top-k_train for TopK, all positive units for L1) is held fixed in the
/// backward pass. When `codes` is non-null it receives one code per row.
LossParts loss_and_grads_serial(const SaeModel& model, const Matrix& data,
                                std::span<const std::size_t> rows, SaeGrads& grads,
                                std::vector<LatentCode>* codes = nullptr);
LossParts loss_and_grads_parallel(const SaeModel& model, const Matrix& data,
                                  std::span<const std::size_t> rows, SaeGrads& grads,
                                  std::vector<LatentCode>* codes = nullptr);

/// Reconstruct every row of `data` at budget k (L1 models ignore k).
void reconstruct_rows_serial(const SaeModel& model, const Matrix& data, std::size_t k,
                             std::span<RowStats> out);
void reconstruct_rows_parallel(const SaeModel& model, const Matrix& data, std::size_t k,
                               std::span<RowStats> out);

}  // namespace kernels

LossParts loss_and_grads(const SaeModel& model, const Matrix& data,
                         std::span<const std::size_t> rows, SaeGrads& grads,
                         std::vector<LatentCode>* codes = nullptr,
                         Backend backend = Backend::Parallel);

std::vector<RowStats> reconstruct_rows(const SaeModel& model, const Matrix& data, std::size_t k,
                                       Backend backend = Backend::Parallel);

RowStats row_stats(std::span<const double> x, std::span<const double> x_hat, std::size_t nnz);

/// Sets the OpenMP team size; 0 leaves the runtime default.
void set_thread_count(int threads);
int thread_count();

}  // namespace kvatlas
