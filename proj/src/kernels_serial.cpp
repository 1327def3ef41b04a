#include <cmath>
#include <stdexcept>

#include "kvatlas/kernels.hpp"
#include "kernels_internal.hpp"

namespace kvatlas {

SaeGrads SaeGrads::zeros_like(const SaeModel& model) {
  return {Matrix(model.latent_size, model.d_head), std::vector<double>(model.latent_size, 0.0),
          Matrix(model.latent_size, model.d_head), std::vector<double>(model.d_head, 0.0)};
}

void SaeGrads::set_zero() {
  std::fill(w_enc.flat().begin(), w_enc.flat().end(), 0.0);
  std::fill(b_enc.begin(), b_enc.end(), 0.0);
  std::fill(w_dec.flat().begin(), w_dec.flat().end(), 0.0);
  std::fill(b_dec.begin(), b_dec.end(), 0.0);
}

RowStats row_stats(std::span<const double> x, std::span<const double> x_hat, std::size_t nnz) {
  RowStats s;
  double xy = 0.0, xx = 0.0, yy = 0.0, err = 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    xy += x[t] * x_hat[t];
    xx += x[t] * x[t];
    yy += x_hat[t] * x_hat[t];
    const double e = x[t] - x_hat[t];
    err += e * e;
  }
  s.x_norm = std::sqrt(xx);
  s.x_hat_norm = std::sqrt(yy);
  s.sq_error = err;
  s.nnz = nnz;
  s.cosine = (s.x_norm < kNormFloor || s.x_hat_norm < kNormFloor)
                 ? 0.0
                 : xy / (s.x_norm * s.x_hat_norm);
  return s;
}

namespace kernels {

LatentCode training_gate(const SaeModel& model, std::span<const double> z_pre) {
  return model.variant == SaeVariant::TopK ? topk_gate(z_pre, model.k_train)
                                           : positive_code(z_pre);
}

LossParts loss_and_grads_serial(const SaeModel& model, const Matrix& data,
                                std::span<const std::size_t> rows, SaeGrads& grads,
                                std::vector<LatentCode>* codes) {
  if (rows.empty()) throw std::invalid_argument("empty batch");
  if (data.cols() != model.d_head) throw std::invalid_argument("batch dimension mismatch");
  for (std::size_t r : rows) {
    if (r >= data.rows()) throw std::out_of_range("batch row index out of range");
  }
  grads.set_zero();
  if (codes) codes->clear();

  const std::size_t d = model.d_head;
  const double inv_b = 1.0 / static_cast<double>(rows.size());
  const double l1 = model.variant == SaeVariant::L1 ? model.lambda : 0.0;
  std::vector<double> g(d), centered(d), row_b_dec(d);
  double sq_sum = 0.0, z_sum = 0.0;

  // Per-row partial sums are formed first and then added in row order, the
  // same association the parallel kernel uses, so the two agree bitwise.
  for (std::size_t r : rows) {
    const auto x = data.row(r);
    const auto z = encode_pre(model, x);
    auto code = training_gate(model, z);
    const auto x_hat = decode(model, code);
    double row_sq = 0.0, row_z = 0.0;
    for (std::size_t t = 0; t < d; ++t) {
      const double e = x_hat[t] - x[t];
      row_sq += e * e;
      g[t] = 2.0 * e * inv_b;
      centered[t] = x[t] - model.b_dec[t];
      row_b_dec[t] = g[t];
    }
    const auto idx = code.indices();
    const auto val = code.values();
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const std::size_t i = idx[j];
      row_z += val[j];
      auto atom = model.w_dec.row(i);
      auto enc = model.w_enc.row(i);
      auto gdec = grads.w_dec.row(i);
      auto genc = grads.w_enc.row(i);
      const double dz = dot(g, atom) + l1 * inv_b;
      for (std::size_t t = 0; t < d; ++t) {
        gdec[t] += val[j] * g[t];
        genc[t] += dz * centered[t];
        row_b_dec[t] -= dz * enc[t];
      }
      grads.b_enc[i] += dz;
    }
    sq_sum += row_sq;
    z_sum += row_z;
    for (std::size_t t = 0; t < d; ++t) grads.b_dec[t] += row_b_dec[t];
    if (codes) codes->push_back(std::move(code));
  }

  LossParts parts;
  parts.mse = sq_sum * inv_b;
  parts.l1_term = l1 * z_sum * inv_b;
  parts.loss = parts.mse + parts.l1_term;
  return parts;
}

void reconstruct_rows_serial(const SaeModel& model, const Matrix& data, std::size_t k,
                             std::span<RowStats> out) {
  if (out.size() != data.rows()) throw std::invalid_argument("output span size mismatch");
  for (std::size_t r = 0; r < data.rows(); ++r) {
    const auto rec = reconstruct_any(model, data.row(r), k);
    out[r] = row_stats(data.row(r), rec.x_hat, rec.code.nnz());
  }
}

}  // namespace kernels

LossParts loss_and_grads(const SaeModel& model, const Matrix& data,
                         std::span<const std::size_t> rows, SaeGrads& grads,
                         std::vector<LatentCode>* codes, Backend backend) {
  return backend == Backend::Serial
             ? kernels::loss_and_grads_serial(model, data, rows, grads, codes)
             : kernels::loss_and_grads_parallel(model, data, rows, grads, codes);
}

std::vector<RowStats> reconstruct_rows(const SaeModel& model, const Matrix& data, std::size_t k,
                                       Backend backend) {
  std::vector<RowStats> out(data.rows());
  if (backend == Backend::Serial) {
    kernels::reconstruct_rows_serial(model, data, k, out);
  } else {
    kernels::reconstruct_rows_parallel(model, data, k, out);
  }
  return out;
}

}  // namespace kvatlas
