#include <omp.h>

#include <stdexcept>

#include "kernels_internal.hpp"
#include "kvatlas/kernels.hpp"

namespace kvatlas {

void set_thread_count(int threads) {
  if (threads > 0) omp_set_num_threads(threads);
}

int thread_count() { return omp_get_max_threads(); }

namespace kernels {

namespace {

struct RowWork {
  LatentCode code;
  std::vector<double> g;         // dL/dx_hat for this row
  std::vector<double> dz;        // per active unit
  std::vector<double> b_dec;     // this row's b_dec gradient contribution
  double sq_error = 0.0;
  double z_sum = 0.0;
};

}  // namespace

// Phase 1 is parallel over rows; phase 3 is parallel over latents with each
// latent accumulating its rows in batch order, so results do not depend on
// the team size.
LossParts loss_and_grads_parallel(const SaeModel& model, const Matrix& data,
                                  std::span<const std::size_t> rows, SaeGrads& grads,
                                  std::vector<LatentCode>* codes) {
  if (rows.empty()) throw std::invalid_argument("empty batch");
  if (data.cols() != model.d_head) throw std::invalid_argument("batch dimension mismatch");
  for (std::size_t r : rows) {
    if (r >= data.rows()) throw std::out_of_range("batch row index out of range");
  }
  grads.set_zero();

  const std::size_t d = model.d_head;
  const std::size_t n = rows.size();
  const double inv_b = 1.0 / static_cast<double>(n);
  const double l1 = model.variant == SaeVariant::L1 ? model.lambda : 0.0;
  std::vector<RowWork> work(n);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(n); ++b) {
    auto& w = work[static_cast<std::size_t>(b)];
    const auto x = data.row(rows[static_cast<std::size_t>(b)]);
    w.code = training_gate(model, encode_pre(model, x));
    const auto x_hat = decode(model, w.code);
    w.g.resize(d);
    w.b_dec.resize(d);
    for (std::size_t t = 0; t < d; ++t) {
      const double e = x_hat[t] - x[t];
      w.sq_error += e * e;
      w.g[t] = 2.0 * e * inv_b;
      w.b_dec[t] = w.g[t];
    }
    const auto idx = w.code.indices();
    const auto val = w.code.values();
    w.dz.resize(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      w.z_sum += val[j];
      w.dz[j] = dot(w.g, model.w_dec.row(idx[j])) + l1 * inv_b;
      const auto enc = model.w_enc.row(idx[j]);
      for (std::size_t t = 0; t < d; ++t) w.b_dec[t] -= w.dz[j] * enc[t];
    }
  }

  // Inverted lists: for each latent, the (row, slot) pairs where it is active.
  std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> users(model.latent_size);
  double sq_sum = 0.0, z_sum = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const auto& w = work[b];
    sq_sum += w.sq_error;
    z_sum += w.z_sum;
    for (std::size_t t = 0; t < d; ++t) grads.b_dec[t] += w.b_dec[t];
    const auto idx = w.code.indices();
    for (std::size_t j = 0; j < idx.size(); ++j) {
      users[idx[j]].emplace_back(static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(j));
    }
  }

#pragma omp parallel for schedule(dynamic, 8)
  for (std::ptrdiff_t li = 0; li < static_cast<std::ptrdiff_t>(model.latent_size); ++li) {
    const auto i = static_cast<std::size_t>(li);
    auto gdec = grads.w_dec.row(i);
    auto genc = grads.w_enc.row(i);
    for (const auto& [b, j] : users[i]) {
      const auto& w = work[b];
      const auto x = data.row(rows[b]);
      const double z = w.code.values()[j];
      const double dz = w.dz[j];
      for (std::size_t t = 0; t < d; ++t) {
        gdec[t] += z * w.g[t];
        genc[t] += dz * (x[t] - model.b_dec[t]);
      }
      grads.b_enc[i] += dz;
    }
  }

  if (codes) {
    codes->clear();
    codes->reserve(n);
    for (auto& w : work) codes->push_back(std::move(w.code));
  }

  LossParts parts;
  parts.mse = sq_sum * inv_b;
  parts.l1_term = l1 * z_sum * inv_b;
  parts.loss = parts.mse + parts.l1_term;
  return parts;
}

void reconstruct_rows_parallel(const SaeModel& model, const Matrix& data, std::size_t k,
                               std::span<RowStats> out) {
  if (out.size() != data.rows()) throw std::invalid_argument("output span size mismatch");
  // Validate once up front so no exception escapes the parallel region.
  if (model.variant == SaeVariant::TopK && (k == 0 || k > model.latent_size)) {
    throw std::invalid_argument("budget k must satisfy 1 <= k <= M");
  }
  if (data.cols() != model.d_head) throw std::invalid_argument("data dimension mismatch");
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(data.rows()); ++r) {
    const auto row = data.row(static_cast<std::size_t>(r));
    const auto rec = reconstruct_any(model, row, k);
    out[static_cast<std::size_t>(r)] = row_stats(row, rec.x_hat, rec.code.nnz());
  }
}

}  // namespace kernels
}  // namespace kvatlas
