#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "kvq/kvcache.hpp"
#include "kvq/rope.hpp"
#include "kvq/sensitivity.hpp"
#include "kvq/tensor.hpp"

namespace kvq {

struct ToyDims {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t head_dim = 8;
  std::size_t tokens = 64;         // per sample
  std::size_t calib_samples = 16;
  std::size_t eval_samples = 1;    // held-out samples replayed by decode_compare
  std::size_t channels() const { return n_heads * head_dim; }
  void validate() const;
};

// Desk-scale stand-in for a decoder: per layer a seeded query projection,
// a set of planted Key outlier channels and an output gain. Layers see
// independent synthetic inputs, so errors do not compound across depth.
struct ToyModel {
  ToyDims dims;
  RopeParams rope;
  std::uint64_t seed = 0;
  std::size_t outlier_channel_count = 2;
  double outlier_scale = 20.0;
  double sharpness = 2.0;  // target logit std
  std::vector<double> layer_gain;
  std::vector<Tensor> query_proj;                  // [D, D] per layer
  std::vector<std::vector<double>> logit_scale;    // per layer, per head
  std::vector<std::uint64_t> data_seed;            // per layer
};

ToyModel make_toy_model(const ToyDims& dims, std::uint64_t seed, std::size_t outlier_channel_count = 2,
                        double outlier_scale = 20.0);

// Distinct channel ids in ascending order, drawn from seed.
std::vector<std::size_t> pick_outlier_channels(std::size_t channels, std::size_t count, std::uint64_t seed);

// Per-channel Key distribution: N(0, 1) except the planted channels, whose
// std is outlier_scale and whose mean sits at +-2 (outlier_scale - 1), so
// they keep a consistent magnitude across tokens.
struct KeyProfile {
  std::vector<double> mean;
  std::vector<double> std;
};
KeyProfile key_profile(std::size_t channels, std::size_t outlier_channel_count, double outlier_scale,
                       std::uint64_t seed);

// dims.calib_samples samples of [tokens, channels]. Keys follow key_profile;
// Values carry a log-normal per-token scale, rare whole-token spikes and ~1%
// elementwise spikes. No gradients.
CalibrationSet gen_synthetic_kv(const ToyDims& dims, std::size_t outlier_channel_count, double outlier_scale,
                                std::uint64_t seed);

// Query of `layer` for token `position` of input stream `stream`, RoPE
// applied. Logits are q.k times a per-head scale chosen so their std is
// about `sharpness` given the head's key profile.
std::vector<float> toy_query(const ToyModel& model, std::size_t layer, std::uint64_t stream, std::size_t position);

// sum over every position m of gain^2 * |attn_m|^2, causal attention over
// tokens 0..m; stream selects the query sequence.
double toy_loss(const ToyModel& model, std::size_t layer, const Tensor& keys, const Tensor& values,
                std::uint64_t stream);

double central_difference(const std::function<double(double)>& f, double x, double eps);

struct KVGrads {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
};

// Central differences of toy_loss with respect to every (pre-RoPE) key and
// value element of each sample; sample s uses query stream s.
KVGrads finite_diff_grads(const ToyModel& model, std::size_t layer, const CalibrationSet& data, double eps);

struct ToyLayerData {
  CalibrationSet calib;
  std::vector<Tensor> eval_keys;  // pre-RoPE
  std::vector<Tensor> eval_values;
};

struct ToyData {
  std::vector<ToyLayerData> layers;
};

// Synthetic data for every layer, with finite-difference gradients attached
// to the calibration sets when with_grads is set.
ToyData make_toy_data(const ToyModel& model, bool with_grads, double eps = 1e-3);

// Key quantization variants: axis (per channel / per token) and whether the
// quantizer sees keys before or after RoPE.
enum class KeyMode { kPreRopeChannel, kPostRopeChannel, kPreRopeToken, kPostRopeToken };
enum class ValueMode { kPerToken, kPerChannel };

struct SimConfig {
  QuantConfig quant;  // bits == 16 disables quantization
  KeyMode key_mode = KeyMode::kPreRopeChannel;
  ValueMode value_mode = ValueMode::kPerToken;
  std::vector<int> layer_bits;  // per-layer override of quant.bits; empty = uniform
  void validate(std::size_t n_layers) const;
};

struct FidelityReport {
  // Relative L2 of the gain-weighted outputs of all layers, one entry per
  // (held-out sample, step), sample-major.
  std::vector<double> step_errors;
  double mean_step_error = 0.0;
  double max_abs_error = 0.0;
  std::vector<double> layer_score_errors;  // relative L2 of raw q.k scores over all steps
  bool operator==(const FidelityReport&) const = default;
};

// Replays the held-out samples of each layer: the first tokens - steps
// tokens prefill, then each step appends one token and attends from it. The default
// modes go through QuantizedKVCache and its fused kernels; the ablation
// modes quantize-dequantize and reuse the full-precision attention.
FidelityReport decode_compare(const ToyModel& model, const ToyData& data, const SimConfig& cfg, std::size_t steps);

// Omega per layer (Keys plus Values) on the calibration set under cfg,
// using the set's gradients as Fisher weights.
std::vector<LayerSensitivity> layer_sensitivities(const ToyModel& model, const ToyData& data, const QuantConfig& cfg);

}  // namespace kvq
