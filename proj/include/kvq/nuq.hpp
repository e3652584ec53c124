#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace kvq {

// Per-vector map between activation space and the codebook's normalized
// space: x = x' * scale + offset.
struct AffineParams {
  float scale = 1.0f;
  float offset = 0.0f;
  // Set for a lo == hi range: every code decodes to offset exactly.
  bool degenerate = false;
  bool operator==(const AffineParams&) const = default;
};

// Mean/std before (mu1, sigma1) and after (mu2, sigma2) quantization,
// measured on a layer's calibration set in normalized space.
struct QNormStats {
  double mu1 = 0.0;
  double sigma1 = 1.0;
  double mu2 = 0.0;
  double sigma2 = 1.0;
  bool operator==(const QNormStats&) const = default;
};

// A per-layer non-uniform datatype with 2^bits entries.
//
// Encoding always snaps to the nearest signpost (the k-means centroids).
// Decoding reads the lookup table, which equals the signposts unless Q-Norm
// has been applied, in which case it holds the affinely corrected centroids.
class NuqCodebook {
 public:
  NuqCodebook() = default;
  NuqCodebook(int bits, std::vector<float> centroids);

  int bits() const { return bits_; }
  std::size_t size() const { return lut_.size(); }
  std::span<const float> centroids() const { return lut_; }
  std::span<const float> signposts() const { return signposts_; }
  bool qnorm_applied() const { return qnorm_.has_value(); }
  const std::optional<QNormStats>& qnorm() const { return qnorm_; }

  // Nearest signpost, ties to the lower index. Total: NaN maps to 0 and
  // values past either end clamp to the end entry.
  std::uint32_t encode(float x) const;
  float decode(std::uint32_t code, const AffineParams& aff) const;

  // Largest gap between neighbouring LUT entries, with each end entry
  // reflected about +-1 so that max_gap()/2 bounds |x' - lut[encode(x')]|
  // for every x' in [-1, 1].
  float max_gap() const;

  bool operator==(const NuqCodebook&) const = default;

 private:
  friend NuqCodebook apply_qnorm(const NuqCodebook& cb, const QNormStats& stats);

  int bits_ = 0;
  std::vector<float> signposts_;
  std::vector<float> lut_;
  std::optional<QNormStats> qnorm_;
};

bool valid_bits(int bits);

// Maps [lo, hi] onto [-1, 1]. A degenerate range (lo == hi) gets scale 1,
// offset lo and the degenerate mark, so kept elements normalize to 0 and
// decode back exactly.
std::pair<std::vector<float>, AffineParams> normalize_vector(std::span<const float> v, float lo, float hi);
AffineParams affine_for_range(float lo, float hi);
float normalize_value(float x, const AffineParams& aff);

// Starting centroids for the Lloyd iterations. kQuantile places them at the
// weighted quantiles (2j+1)/2k; kOptimalPartition starts from the exact
// optimum over contiguous partitions of the sorted points, which Lloyd then
// leaves in place.
enum class KMeansInit { kQuantile, kOptimalPartition };

struct KMeansOptions {
  int max_iter = 100;
  double tol = 1e-6;
  KMeansInit init = KMeansInit::kOptimalPartition;
};

struct KMeansResult {
  std::vector<double> centroids;  // ascending
  double objective = 0.0;         // sum w (x - Q(x))^2 at the returned centroids
  int iterations = 0;
  std::vector<double> objective_history;  // initial objective, then one per Lloyd step
};

// Weighted Lloyd iterations in 1-D from the opts.init starting point. Empty
// clusters keep their previous centroid.
KMeansResult weighted_kmeans_1d(std::span<const float> points, std::span<const float> weights,
                                std::size_t k, const KMeansOptions& opts = {});

struct CodebookOptions {
  KMeansOptions kmeans;
  std::size_t max_points = std::size_t{1} << 20;
};

NuqCodebook derive_codebook(std::span<const float> normalized_calib, std::span<const float> fisher,
                            int bits, const CodebookOptions& opts = {});

// C_hat = (C - mu2) * sigma1 / sigma2 + mu1, applied to the decode LUT.
NuqCodebook apply_qnorm(const NuqCodebook& cb, const QNormStats& stats);

// mu1/sigma1 over the points, mu2/sigma2 over their quantized images under
// the codebook's current LUT.
QNormStats measure_qnorm_stats(std::span<const float> normalized_points, const NuqCodebook& cb);

}  // namespace kvq
