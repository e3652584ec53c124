#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "kvq/nuq.hpp"
#include "kvq/packing.hpp"
#include "kvq/rope.hpp"
#include "kvq/sensitivity.hpp"
#include "kvq/sparse.hpp"
#include "kvq/tensor.hpp"

namespace kvq {

// Where outlier thresholds come from: each vector's own order statistics, or
// one (lo, hi) pair shared by the whole layer.
enum class ThresholdMode { kPerVector, kPerMatrix };

struct QuantConfig {
  int bits = 4;
  double outlier_fraction = 0.01;
  bool qnorm = false;
  ThresholdMode threshold_mode = ThresholdMode::kPerVector;
  OutlierRule outlier_rule = OutlierRule::kTwoSided;
  // false: plain k-means (all weights 1) instead of Fisher weighting.
  bool fisher_weighted = true;
  CodebookOptions codebook;

  void validate() const;
};

struct ChannelRange {
  float lo = 0.0f;
  float hi = 0.0f;
  bool operator==(const ChannelRange&) const = default;
};

// One vector split into dense codes plus sparse residuals.
struct QuantizedVector {
  std::vector<std::uint32_t> codes;
  std::vector<SparseEntry> outliers;  // residual = original - dense dequant, in double
  AffineParams affine;                // per-token quantizers only
};

// x - dense, exact in double; reconstruct(dense, r) == x.
double outlier_residual(float x, float dense);
float reconstruct(float dense, double residual);

// Offline-calibrated per-channel quantizer (Keys, pre-RoPE). Frozen after
// calibration: every element outside its channel's [lo, hi] goes to the
// sparse side, everything else is encoded against the layer codebook.
struct KeyQuantizer {
  std::vector<ChannelRange> thresholds;
  std::vector<AffineParams> affine;
  NuqCodebook codebook;
  RopeParams rope;

  std::size_t channels() const { return thresholds.size(); }
  QuantizedVector quantize(std::span<const float> k) const;
  std::vector<float> dequantize(const QuantizedVector& q) const;
  bool operator==(const KeyQuantizer&) const = default;
};

// Per-token quantizer (Values). Thresholds and affine are computed online for
// each incoming vector; only the codebook (and, in per-matrix mode, the
// layer-wide threshold) comes from calibration.
struct ValueQuantizer {
  NuqCodebook codebook;
  double outlier_fraction = 0.0;
  OutlierRule outlier_rule = OutlierRule::kTwoSided;
  std::optional<ChannelRange> matrix_threshold;

  QuantizedVector quantize(std::span<const float> v) const;
  std::vector<float> dequantize(const QuantizedVector& q) const;
  bool operator==(const ValueQuantizer&) const = default;
};

// Per-channel calibration over arbitrary [tokens, channels] samples.
// fisher holds zero entries (unweighted), one (shared by every sample) or
// one per sample, each shaped like a sample; cfg.fisher_weighted == false
// ignores it.
KeyQuantizer calibrate_channel_quantizer(std::span<const Tensor> samples, std::span<const FisherDiag> fisher,
                                         const QuantConfig& cfg, const RopeParams& rope);
ValueQuantizer calibrate_token_quantizer(std::span<const Tensor> samples, std::span<const FisherDiag> fisher,
                                         const QuantConfig& cfg);

// g (.) g of each sample's own gradient; empty when there are no gradients.
std::vector<FisherDiag> per_sample_fisher(std::span<const Tensor> grads);

// With gradients present the Fisher is fisher_diag over all samples, shared
// by every sample's elements.
KeyQuantizer calibrate_key_quantizer(const CalibrationSet& calib, const QuantConfig& cfg, const RopeParams& rope);
ValueQuantizer calibrate_value_quantizer(const CalibrationSet& calib, const QuantConfig& cfg);
// One Fisher shared by every sample (e.g. fisher_diag over all gradients).
KeyQuantizer calibrate_key_quantizer(const CalibrationSet& calib, const FisherDiag& fisher,
                                     const QuantConfig& cfg, const RopeParams& rope);
ValueQuantizer calibrate_value_quantizer(const CalibrationSet& calib, const FisherDiag& fisher,
                                         const QuantConfig& cfg);

// Quantize then dequantize every row of a [tokens, channels] matrix.
template <class Quantizer>
Tensor fake_quantize(const Quantizer& q, const Tensor& m) {
  Tensor out = m;
  for (std::size_t t = 0; t < m.dim(0); ++t) {
    const auto rec = q.dequantize(q.quantize(m.row(t)));
    std::copy(rec.begin(), rec.end(), out.row(t).begin());
  }
  return out;
}

// Append-only quantized cache for one layer (all heads).
//
// Keys: per-channel packed codes (one run per channel, tokens contiguous) and
// a CSC matrix of residuals with one column per token. Values: token-major
// packed codes, a per-token affine and a CSR matrix with one row per token.
// Each decode step appends a key then a value; token_count() advances on the
// value.
class QuantizedKVCache {
 public:
  QuantizedKVCache(std::shared_ptr<const KeyQuantizer> kq, std::shared_ptr<const ValueQuantizer> vq);

  void append_key(std::span<const float> k);
  void append_value(std::span<const float> v);

  std::size_t token_count() const { return value_affine_.size(); }
  std::size_t channels() const { return kq_->channels(); }
  std::size_t head_dim() const { return kq_->rope.head_dim; }
  std::size_t n_heads() const { return channels() / head_dim(); }

  // Raw dot products q_rotated . RoPE_n(K_n) for every head and cached token,
  // laid out [head][token]. q_rotated already carries the query's RoPE.
  std::vector<float> qk_scores(std::span<const float> q_rotated) const;

  // sum_t w[head(c)][t] * V_t[c]; weights are laid out [head][token].
  std::vector<float> av_matvec(std::span<const float> weights) const;

  // Dense decode plus scattered residuals; keys are returned pre-RoPE.
  std::vector<float> dequantize_key(std::size_t t) const;
  std::vector<float> dequantize_value(std::size_t t) const;

  const KeyQuantizer& key_quantizer() const { return *kq_; }
  const ValueQuantizer& value_quantizer() const { return *vq_; }
  std::span<const PackedCodes> key_codes() const { return key_codes_; }
  const SparseCSC& key_sparse() const { return key_sparse_; }
  const PackedCodes& value_codes() const { return value_codes_; }
  const SparseCSR& value_sparse() const { return value_sparse_; }
  std::span<const AffineParams> value_affine() const { return value_affine_; }

  // KVQT dump of codes (as integers), affines (scale, offset, degenerate
  // mark) and sparse (token, channel, original value) triplets.
  void save_snapshot(const std::filesystem::path& dir) const;
  static QuantizedKVCache load_snapshot(const std::filesystem::path& dir, std::shared_ptr<const KeyQuantizer> kq,
                                        std::shared_ptr<const ValueQuantizer> vq);

 private:
  void require_steady(const char* what) const;
  float dense_key(std::size_t t, std::size_t c) const;
  float dense_value(std::size_t t, std::size_t c) const;

  std::shared_ptr<const KeyQuantizer> kq_;
  std::shared_ptr<const ValueQuantizer> vq_;
  std::vector<float> key_lut_;  // [channel][code], codebook rescaled per channel
  std::vector<double> frequencies_;

  std::vector<PackedCodes> key_codes_;
  SparseCSC key_sparse_;
  PackedCodes value_codes_;
  SparseCSR value_sparse_;
  std::vector<AffineParams> value_affine_;
  bool key_pending_ = false;
};

}  // namespace kvq
