#pragma once

// Independent reference computations used only by tests. Nothing here calls
// into the library's forward/backward code paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major, rows as vectors

inline Vec matvec(const Mat& a, const Vec& x) {
  Vec y(a.size(), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < x.size(); ++j) y[i] += a[i][j] * x[j];
  }
  return y;
}

/// ReLU(W (x - b_dec) + b_enc) with W given as rows.
inline Vec encoder(const Mat& w_enc, const Vec& b_enc, const Vec& b_dec, const Vec& x) {
  Vec c(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) c[t] = x[t] - b_dec[t];
  Vec z = matvec(w_enc, c);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = std::max(0.0, z[i] + b_enc[i]);
  return z;
}

/// Full sort of (value desc, index asc); keep first k strictly positive entries.
inline std::vector<std::uint32_t> topk_by_sort(const Vec& z, std::size_t k) {
  std::vector<std::pair<double, std::uint32_t>> all;
  for (std::uint32_t i = 0; i < z.size(); ++i) all.emplace_back(z[i], i);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::uint32_t> kept;
  for (std::size_t j = 0; j < all.size() && kept.size() < k; ++j) {
    if (all[j].first > 0.0) kept.push_back(all[j].second);
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

/// Dense z * W_dec + b_dec.
inline Vec dense_decode(const Vec& z, const Mat& w_dec, const Vec& b_dec) {
  Vec out(b_dec);
  for (std::size_t i = 0; i < z.size(); ++i) {
    for (std::size_t t = 0; t < out.size(); ++t) out[t] += z[i] * w_dec[i][t];
  }
  return out;
}

/// Softmax attention written from the textbook definition (no max shift,
/// sums computed after exponentiation) for small well-scaled inputs.
struct Attention {
  Mat probs;
  Mat outputs;
};

inline Attention softmax_attention(const Mat& q, const Mat& k, const Mat& v, double scale,
                                   bool causal) {
  Attention a;
  for (std::size_t i = 0; i < q.size(); ++i) {
    Vec w(k.size(), 0.0);
    double total = 0.0;
    for (std::size_t j = 0; j < k.size(); ++j) {
      if (causal && j > i) continue;
      double s = 0.0;
      for (std::size_t t = 0; t < q[i].size(); ++t) s += q[i][t] * k[j][t];
      w[j] = std::exp(scale * s);
      total += w[j];
    }
    Vec o(v[0].size(), 0.0);
    for (std::size_t j = 0; j < k.size(); ++j) {
      w[j] /= total;
      for (std::size_t t = 0; t < o.size(); ++t) o[t] += w[j] * v[j][t];
    }
    a.probs.push_back(w);
    a.outputs.push_back(o);
  }
  return a;
}

/// Least-squares residual norm of x against the span of the given columns,
/// via normal equations solved with partial-pivot Gaussian elimination.
inline double projection_residual(const Mat& atoms, const Vec& x) {
  const std::size_t s = atoms.size();
  Mat g(s, Vec(s + 1, 0.0));
  for (std::size_t a = 0; a < s; ++a) {
    for (std::size_t b = 0; b < s; ++b) {
      for (std::size_t t = 0; t < x.size(); ++t) g[a][b] += atoms[a][t] * atoms[b][t];
    }
    for (std::size_t t = 0; t < x.size(); ++t) g[a][s] += atoms[a][t] * x[t];
  }
  for (std::size_t c = 0; c < s; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < s; ++r) {
      if (std::abs(g[r][c]) > std::abs(g[piv][c])) piv = r;
    }
    std::swap(g[c], g[piv]);
    for (std::size_t r = 0; r < s; ++r) {
      if (r == c) continue;
      const double f = g[r][c] / g[c][c];
      for (std::size_t cc = c; cc <= s; ++cc) g[r][cc] -= f * g[c][cc];
    }
  }
  Vec resid(x);
  for (std::size_t a = 0; a < s; ++a) {
    const double coef = g[a][s] / g[a][a];
    for (std::size_t t = 0; t < x.size(); ++t) resid[t] -= coef * atoms[a][t];
  }
  double n = 0.0;
  for (double r : resid) n += r * r;
  return std::sqrt(n);
}

}  // namespace oracle
