#include "kvq/nuq.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

#include "kvq/error.hpp"

namespace kvq {

bool valid_bits(int bits) { return bits >= 2 && bits <= 4; }

NuqCodebook::NuqCodebook(int bits, std::vector<float> centroids) : bits_(bits) {
  require(valid_bits(bits), ErrorKind::kInvalidArgument, "codebook bits must be 2, 3 or 4");
  require(centroids.size() == (std::size_t{1} << bits), ErrorKind::kInvalidArgument,
          "codebook must hold exactly 2^bits centroids");
  require(std::all_of(centroids.begin(), centroids.end(), [](float c) { return std::isfinite(c); }),
          ErrorKind::kNonFinite, "codebook centroid is not finite");
  require(std::is_sorted(centroids.begin(), centroids.end()), ErrorKind::kInvalidArgument,
          "codebook centroids must be ascending");
  signposts_ = centroids;
  lut_ = std::move(centroids);
}

std::uint32_t NuqCodebook::encode(float x) const {
  if (signposts_.empty() || std::isnan(x)) return 0;
  const auto first = signposts_.begin();
  auto it = std::lower_bound(first, signposts_.end(), x);
  if (it == first) return 0;
  if (it == signposts_.end()) {
    return static_cast<std::uint32_t>(std::lower_bound(first, signposts_.end(), signposts_.back()) - first);
  }
  const float below = *(it - 1);
  const float above = *it;
  if (above - x < x - below) return static_cast<std::uint32_t>(it - first);
  // Ties and nearer-below both resolve to the first entry equal to `below`.
  return static_cast<std::uint32_t>(std::lower_bound(first, signposts_.end(), below) - first);
}

float NuqCodebook::decode(std::uint32_t code, const AffineParams& aff) const {
  require(code < lut_.size(), ErrorKind::kOutOfRange, "decode: code out of range");
  return aff.degenerate ? aff.offset : lut_[code] * aff.scale + aff.offset;
}

float NuqCodebook::max_gap() const {
  if (lut_.empty()) return 0.0f;
  float gap = std::max(2.0f * (lut_.front() + 1.0f), 2.0f * (1.0f - lut_.back()));
  for (std::size_t i = 1; i < lut_.size(); ++i) gap = std::max(gap, lut_[i] - lut_[i - 1]);
  return gap;
}

AffineParams affine_for_range(float lo, float hi) {
  require(!(lo > hi), ErrorKind::kInvalidArgument, "normalize: lo > hi");
  if (lo == hi) return AffineParams{1.0f, lo, true};
  const double scale = (static_cast<double>(hi) - lo) / 2.0;
  const double offset = (static_cast<double>(hi) + lo) / 2.0;
  return AffineParams{static_cast<float>(scale), static_cast<float>(offset), false};
}

float normalize_value(float x, const AffineParams& aff) {
  return static_cast<float>((static_cast<double>(x) - aff.offset) / aff.scale);
}

std::pair<std::vector<float>, AffineParams> normalize_vector(std::span<const float> v, float lo, float hi) {
  const AffineParams aff = affine_for_range(lo, hi);
  std::vector<float> out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [&](float x) { return normalize_value(x, aff); });
  return {std::move(out), aff};
}

namespace {

struct SortedPoints {
  std::vector<double> x;
  std::vector<double> w;
};

SortedPoints sort_points(std::span<const float> points, std::span<const float> weights) {
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return points[a] < points[b]; });
  SortedPoints s;
  s.x.reserve(order.size());
  s.w.reserve(order.size());
  for (auto i : order) {
    s.x.push_back(points[i]);
    s.w.push_back(weights[i]);
  }
  return s;
}

// End index (exclusive) of each cluster's contiguous run over sorted points.
// A centroid equal to its predecessor owns an empty run, matching the
// lowest-index tie rule of NuqCodebook::encode.
std::vector<std::size_t> assign(const std::vector<double>& xs, const std::vector<double>& c) {
  const std::size_t k = c.size();
  std::vector<std::size_t> ends(k, xs.size());
  std::size_t start = 0;
  for (std::size_t j = 0; j < k; ++j) {
    if (j > 0 && c[j] == c[j - 1]) {
      ends[j] = start;
      continue;
    }
    std::size_t next = j + 1;
    while (next < k && c[next] == c[j]) ++next;
    if (next == k) {
      ends[j] = xs.size();
    } else {
      const double cj = c[j], cn = c[next];
      auto it = std::partition_point(xs.begin() + static_cast<std::ptrdiff_t>(start), xs.end(),
                                     [&](double x) { return x - cj <= cn - x; });
      ends[j] = static_cast<std::size_t>(it - xs.begin());
    }
    start = ends[j];
  }
  return ends;
}

// Exact weighted 1-D k-means over sorted points: the best split into at most
// k contiguous runs, by dynamic programming with divide-and-conquer over the
// monotone split points. Zero-weight points do not move the optimum and are
// skipped; equal coordinates are merged. Returns ascending centroids, padded
// with copies of the last one when there are fewer than k distinct points.
std::vector<double> optimal_partition(const SortedPoints& s, std::size_t k) {
  std::vector<double> gx, gw;
  for (std::size_t i = 0; i < s.x.size(); ++i) {
    if (s.w[i] <= 0.0) continue;
    if (!gx.empty() && gx.back() == s.x[i])
      gw.back() += s.w[i];
    else {
      gx.push_back(s.x[i]);
      gw.push_back(s.w[i]);
    }
  }
  const std::size_t m = gx.size();
  const std::size_t kk = std::min(k, m);
  // Centred prefix sums keep the variance formula well conditioned.
  double tw = 0.0, twx = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    tw += gw[i];
    twx += gw[i] * gx[i];
  }
  const double mu = twx / tw;
  std::vector<double> W(m + 1, 0.0), WX(m + 1, 0.0), WXX(m + 1, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double d = gx[i] - mu;
    W[i + 1] = W[i] + gw[i];
    WX[i + 1] = WX[i] + gw[i] * d;
    WXX[i + 1] = WXX[i] + gw[i] * d * d;
  }
  auto cost = [&](std::size_t i, std::size_t j) {
    const double w = W[j] - W[i], wx = WX[j] - WX[i];
    return std::max(0.0, (WXX[j] - WXX[i]) - wx * wx / w);
  };

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  std::vector<std::vector<std::uint32_t>> split(kk, std::vector<std::uint32_t>(m + 1, 0));
  for (std::size_t j = 1; j <= m; ++j) prev[j] = cost(0, j);
  // cur[j] = min over i of prev[i] + cost(i, j), for j in [lo, hi], with the
  // argmin known to lie in [olo, ohi].
  std::function<void(std::size_t, std::size_t, std::size_t, std::size_t, std::size_t)> solve =
      [&](std::size_t c, std::size_t lo, std::size_t hi, std::size_t olo, std::size_t ohi) {
        if (lo > hi) return;
        const std::size_t mid = lo + (hi - lo) / 2;
        double best = inf;
        std::size_t arg = olo;
        for (std::size_t i = olo; i <= std::min(ohi, mid - 1); ++i) {
          const double v = prev[i] + cost(i, mid);
          if (v < best) {
            best = v;
            arg = i;
          }
        }
        cur[mid] = best;
        split[c][mid] = static_cast<std::uint32_t>(arg);
        if (mid > lo) solve(c, lo, mid - 1, olo, arg);
        solve(c, mid + 1, hi, arg, ohi);
      };
  for (std::size_t c = 1; c < kk; ++c) {
    std::fill(cur.begin(), cur.end(), inf);
    solve(c, c + 1, m, c, m - 1);
    std::swap(prev, cur);
  }

  std::vector<double> centroids(k);
  std::size_t end = m;
  for (std::size_t c = kk; c-- > 0;) {
    const std::size_t begin = c == 0 ? 0 : split[c][end];
    centroids[c] = mu + (WX[end] - WX[begin]) / (W[end] - W[begin]);
    centroids[c] = std::clamp(centroids[c], gx[begin], gx[end - 1]);
    end = begin;
  }
  for (std::size_t c = kk; c < k; ++c) centroids[c] = centroids[kk - 1];
  return centroids;
}

double objective(const SortedPoints& s, const std::vector<double>& c, const std::vector<std::size_t>& ends) {
  double obj = 0.0;
  std::size_t start = 0;
  for (std::size_t j = 0; j < c.size(); ++j) {
    for (std::size_t i = start; i < ends[j]; ++i) {
      const double e = s.x[i] - c[j];
      obj += s.w[i] * e * e;
    }
    start = ends[j];
  }
  return obj;
}

}  // namespace

KMeansResult weighted_kmeans_1d(std::span<const float> points, std::span<const float> weights,
                                std::size_t k, const KMeansOptions& opts) {
  require(k >= 1, ErrorKind::kInvalidArgument, "kmeans: k must be >= 1");
  require(!points.empty() && points.size() == weights.size(), ErrorKind::kShapeMismatch,
          "kmeans: points and weights must be non-empty and equal length");
  double total_w = 0.0;
  for (float w : weights) {
    require(w >= 0.0f && std::isfinite(w), ErrorKind::kInvalidArgument, "kmeans: weights must be finite and >= 0");
    total_w += w;
  }
  require(total_w > 0.0, ErrorKind::kInvalidArgument, "kmeans: weights are all zero");

  const SortedPoints s = sort_points(points, weights);
  const std::size_t n = s.x.size();
  std::vector<double> cum_w(n + 1, 0.0), cum_wx(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    cum_w[i + 1] = cum_w[i] + s.w[i];
    cum_wx[i + 1] = cum_wx[i] + s.w[i] * s.x[i];
  }

  KMeansResult r;
  r.centroids.resize(k);
  if (opts.init == KMeansInit::kOptimalPartition) r.centroids = optimal_partition(s, k);
  for (std::size_t j = 0; j < k && opts.init == KMeansInit::kQuantile; ++j) {
    const double target = (2.0 * j + 1.0) / (2.0 * k) * total_w;
    auto it = std::lower_bound(cum_w.begin() + 1, cum_w.end(), target);
    const std::size_t idx = std::min<std::size_t>(static_cast<std::size_t>(it - cum_w.begin()) - 1, n - 1);
    r.centroids[j] = s.x[idx];
  }

  auto ends = assign(s.x, r.centroids);
  r.objective = objective(s, r.centroids, ends);
  r.objective_history.push_back(r.objective);

  for (int iter = 0; iter < opts.max_iter; ++iter) {
    std::vector<double> next = r.centroids;
    std::size_t start = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double w = cum_w[ends[j]] - cum_w[start];
      if (ends[j] > start && w > 0.0) {
        // Clamp guards the prefix-sum mean against drifting outside the run.
        const double mean = (cum_wx[ends[j]] - cum_wx[start]) / w;
        next[j] = std::clamp(mean, s.x[start], s.x[ends[j] - 1]);
      }
      start = ends[j];
    }
    std::sort(next.begin(), next.end());

    double moved = 0.0;
    for (std::size_t j = 0; j < k; ++j) moved = std::max(moved, std::abs(next[j] - r.centroids[j]));

    r.centroids = std::move(next);
    ends = assign(s.x, r.centroids);
    const double obj = objective(s, r.centroids, ends);
    assert(obj <= r.objective * (1.0 + 1e-12) + 1e-300);
    r.objective = obj;
    r.objective_history.push_back(obj);
    r.iterations = iter + 1;
    if (moved < opts.tol) break;
  }
  return r;
}

NuqCodebook derive_codebook(std::span<const float> normalized_calib, std::span<const float> fisher,
                            int bits, const CodebookOptions& opts) {
  require(valid_bits(bits), ErrorKind::kInvalidArgument, "codebook bits must be 2, 3 or 4");
  require(normalized_calib.size() == fisher.size(), ErrorKind::kShapeMismatch,
          "derive_codebook: points and weights differ in length");
  std::vector<float> pts, wts;
  std::span<const float> p = normalized_calib, w = fisher;
  if (opts.max_points > 0 && normalized_calib.size() > opts.max_points) {
    const std::size_t stride = (normalized_calib.size() + opts.max_points - 1) / opts.max_points;
    for (std::size_t i = 0; i < normalized_calib.size(); i += stride) {
      pts.push_back(normalized_calib[i]);
      wts.push_back(fisher[i]);
    }
    p = pts;
    w = wts;
  }
  const auto km = weighted_kmeans_1d(p, w, std::size_t{1} << bits, opts.kmeans);
  std::vector<float> c(km.centroids.size());
  std::transform(km.centroids.begin(), km.centroids.end(), c.begin(),
                 [](double v) { return static_cast<float>(v); });
  std::sort(c.begin(), c.end());
  return NuqCodebook(bits, std::move(c));
}

NuqCodebook apply_qnorm(const NuqCodebook& cb, const QNormStats& stats) {
  require(stats.sigma1 > 0.0 && stats.sigma2 > 0.0, ErrorKind::kInvalidArgument,
          "apply_qnorm: sigmas must be positive");
  NuqCodebook out = cb;
  const double slope = stats.sigma1 / stats.sigma2;
  for (std::size_t i = 0; i < out.lut_.size(); ++i)
    out.lut_[i] = static_cast<float>((static_cast<double>(cb.signposts_[i]) - stats.mu2) * slope + stats.mu1);
  out.qnorm_ = stats;
  return out;
}

QNormStats measure_qnorm_stats(std::span<const float> points, const NuqCodebook& cb) {
  require(!points.empty(), ErrorKind::kInvalidArgument, "qnorm stats: no points");
  const double n = static_cast<double>(points.size());
  double s1 = 0, s2 = 0;
  for (float x : points) {
    s1 += x;
    s2 += cb.centroids()[cb.encode(x)];
  }
  QNormStats st;
  st.mu1 = s1 / n;
  st.mu2 = s2 / n;
  double v1 = 0, v2 = 0;
  for (float x : points) {
    const double a = x - st.mu1;
    const double b = cb.centroids()[cb.encode(x)] - st.mu2;
    v1 += a * a;
    v2 += b * b;
  }
  st.sigma1 = std::sqrt(v1 / n);
  st.sigma2 = std::sqrt(v2 / n);
  return st;
}

}  // namespace kvq
