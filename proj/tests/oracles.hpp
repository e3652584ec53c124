#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance runner. Everything here is straight-line double-precision code
// that shares nothing with the library beyond its data types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "kvq/kvcache.hpp"
#include "kvq/sparse.hpp"
#include "kvq/tensor.hpp"

namespace kvq::oracle {

inline double rel_l2(std::span<const float> got, std::span<const double> want) {
  double e = 0.0, n = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    const double d = static_cast<double>(got[i]) - want[i];
    e += d * d;
    n += want[i] * want[i];
  }
  return n == 0.0 ? std::sqrt(e) : std::sqrt(e / n);
}

inline double rel_l2(std::span<const float> got, std::span<const float> want) {
  std::vector<double> w(want.begin(), want.end());
  return rel_l2(got, w);
}

// R_n built directly from its 2x2 blocks: pair i is (i, i + d/2), angle
// n * base^(-2i/d).
inline std::vector<double> rope_matrix_ref(std::size_t d, double base, std::uint64_t n) {
  std::vector<double> r(d * d, 0.0);
  const std::size_t half = d / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double ang = static_cast<double>(n) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const double c = std::cos(ang), s = std::sin(ang);
    r[i * d + i] = c;
    r[i * d + i + half] = -s;
    r[(i + half) * d + i] = s;
    r[(i + half) * d + i + half] = c;
  }
  return r;
}

inline std::vector<double> matvec(const std::vector<double>& m, std::span<const float> x) {
  const std::size_t d = x.size();
  std::vector<double> y(d, 0.0);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) y[r] += m[r * d + c] * static_cast<double>(x[c]);
  return y;
}

struct PartitionOptimum {
  double objective = std::numeric_limits<double>::infinity();
  std::vector<double> centroids;
};

// Best weighted 1-D clustering into at most k contiguous groups of the sorted
// points, by enumerating every set of cut positions.
inline PartitionOptimum exhaustive_partition(std::vector<double> pts, std::vector<double> w, std::size_t k) {
  std::vector<std::size_t> order(pts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pts[a] < pts[b]; });
  std::vector<double> x, ww;
  for (auto i : order) {
    x.push_back(pts[i]);
    ww.push_back(w[i]);
  }
  const std::size_t n = x.size();
  PartitionOptimum best;
  auto cost = [&](std::size_t b, std::size_t e, double& c) {
    double sw = 0.0, sx = 0.0;
    for (std::size_t i = b; i < e; ++i) {
      sw += ww[i];
      sx += ww[i] * x[i];
    }
    c = sw > 0.0 ? sx / sw : x[b];
    double o = 0.0;
    for (std::size_t i = b; i < e; ++i) o += ww[i] * (x[i] - c) * (x[i] - c);
    return o;
  };
  // Cut masks over the n-1 gaps with at most k-1 cuts.
  const std::size_t gaps = n - 1;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << gaps); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcountll(mask)) + 1 > k) continue;
    double obj = 0.0;
    std::vector<double> cs;
    std::size_t b = 0;
    for (std::size_t g = 0; g <= gaps; ++g) {
      if (g == gaps || (mask >> g & 1)) {
        double c;
        obj += cost(b, g + 1, c);
        cs.push_back(c);
        b = g + 1;
      }
    }
    if (obj < best.objective) {
      best.objective = obj;
      best.centroids = cs;
    }
  }
  return best;
}

inline std::vector<double> naive_csc(const TokenMajorSparse& s, std::span<const float> x) {
  std::vector<double> y(s.tokens(), 0.0);
  for (std::size_t t = 0; t < s.tokens(); ++t)
    for (std::uint64_t nz = s.ptr()[t]; nz < s.ptr()[t + 1]; ++nz)
      y[t] += static_cast<double>(s.vals()[nz]) * static_cast<double>(x[s.idx()[nz]]);
  return y;
}

inline std::vector<double> naive_csr(const TokenMajorSparse& s, std::span<const float> w) {
  std::vector<double> y(s.channels(), 0.0);
  for (std::size_t t = 0; t < s.tokens(); ++t)
    for (std::uint64_t nz = s.ptr()[t]; nz < s.ptr()[t + 1]; ++nz)
      y[s.idx()[nz]] += static_cast<double>(s.vals()[nz]) * static_cast<double>(w[t]);
  return y;
}

// Random token-major sparse matrix; `skew` of the nonzeros land in token 0.
inline std::vector<std::vector<SparseEntry>> random_sparse_tokens(std::size_t tokens, std::size_t channels,
                                                                  std::size_t nnz, double skew, std::mt19937_64& rng) {
  std::vector<std::vector<bool>> used(tokens, std::vector<bool>(channels, false));
  std::uniform_int_distribution<std::size_t> tok(0, tokens - 1), ch(0, channels - 1);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> normal;
  std::vector<std::vector<SparseEntry>> out(tokens);
  std::size_t placed = 0, guard = 0;
  while (placed < nnz && guard++ < nnz * 50) {
    const std::size_t t = u01(rng) < skew ? 0 : tok(rng);
    const std::size_t c = ch(rng);
    if (used[t][c]) continue;
    used[t][c] = true;
    ++placed;
  }
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t c = 0; c < channels; ++c)
      if (used[t][c]) out[t].push_back({static_cast<std::uint32_t>(c), static_cast<float>(normal(rng))});
  return out;
}

// Scores of a rotated query against every cached key, evaluated from the
// cache's own dequantized (pre-RoPE) keys: rotate each head at the key's
// position with the reference matrix, then dot in double. Layout [head][token].
inline std::vector<double> naive_scores(const QuantizedKVCache& cache, std::span<const float> q, double base) {
  const std::size_t d = cache.channels(), hd = cache.head_dim(), h_n = d / hd, T = cache.token_count();
  std::vector<double> out(h_n * T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const auto k = cache.dequantize_key(t);
    const auto r = rope_matrix_ref(hd, base, t);
    for (std::size_t h = 0; h < h_n; ++h) {
      const auto kr = matvec(r, std::span<const float>(k).subspan(h * hd, hd));
      double s = 0.0;
      for (std::size_t j = 0; j < hd; ++j) s += static_cast<double>(q[h * hd + j]) * kr[j];
      out[h * T + t] = s;
    }
  }
  return out;
}

inline std::vector<double> naive_av(const QuantizedKVCache& cache, std::span<const float> w) {
  const std::size_t d = cache.channels(), hd = cache.head_dim(), T = cache.token_count();
  std::vector<double> out(d, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const auto v = cache.dequantize_value(t);
    for (std::size_t c = 0; c < d; ++c) out[c] += static_cast<double>(w[(c / hd) * T + t]) * static_cast<double>(v[c]);
  }
  return out;
}

inline Tensor random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal;
  Tensor t = Tensor::zeros({rows, cols});
  for (auto& x : t.data) x = static_cast<float>(normal(rng) * scale);
  return t;
}

}  // namespace kvq::oracle
