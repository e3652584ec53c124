#include "kvq/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "kvq/error.hpp"

namespace kvq {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  return splitmix(splitmix(splitmix(seed ^ splitmix(a)) ^ b) ^ c);
}

void rotate_rows(const RopeParams& rope, Tensor& m) {
  for (std::size_t t = 0; t < m.dim(0); ++t) rope_apply_heads_inplace(rope, m.row(t), t);
}

// Raw dot products per head for tokens [0, n], laid out [head][n + 1].
std::vector<float> fp_scores(std::span<const float> q, const Tensor& keys_rot, std::size_t n, std::size_t heads,
                             std::size_t hd) {
  const std::size_t T = n + 1;
  std::vector<float> s(heads * T);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t t = 0; t < T; ++t) {
      double acc = 0.0;
      for (std::size_t j = 0; j < hd; ++j) acc += static_cast<double>(q[h * hd + j]) * keys_rot.at(t, h * hd + j);
      s[h * T + t] = static_cast<float>(acc);
    }
  }
  return s;
}

std::vector<float> softmax_weights(std::span<const float> scores, std::span<const double> scale) {
  const std::size_t heads = scale.size();
  const std::size_t T = scores.size() / heads;
  std::vector<float> w(scores.size());
  for (std::size_t h = 0; h < heads; ++h) {
    const auto row = scores.subspan(h * T, T);
    // scale > 0, so the largest score also has the largest logit.
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    std::vector<double> e(T);
    for (std::size_t t = 0; t < T; ++t) z += e[t] = std::exp(scale[h] * (row[t] - mx));
    for (std::size_t t = 0; t < T; ++t) w[h * T + t] = static_cast<float>(e[t] / z);
  }
  return w;
}

std::vector<float> fp_weighted_values(std::span<const float> w, const Tensor& values, std::size_t heads,
                                      std::size_t hd) {
  const std::size_t T = w.size() / heads;
  std::vector<float> out(heads * hd);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t j = 0; j < hd; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < T; ++t) acc += static_cast<double>(w[h * T + t]) * values.at(t, h * hd + j);
      out[h * hd + j] = static_cast<float>(acc);
    }
  }
  return out;
}

// Softmax state of one (query, head): max-shifted exponentials and the
// unnormalized output, in double.
struct HeadState {
  std::vector<double> e;
  std::vector<double> num;
  double z = 0.0;
  double mx = 0.0;
};

}  // namespace

void ToyDims::validate() const {
  require(n_layers >= 1 && n_heads >= 1 && head_dim >= 2 && head_dim % 2 == 0, ErrorKind::kInvalidArgument,
          "toy dims: need layers, heads >= 1 and an even head_dim");
  require(tokens >= 2 && calib_samples >= 1 && eval_samples >= 1, ErrorKind::kInvalidArgument,
          "toy dims: need tokens >= 2 and at least one calibration and one held-out sample");
}

std::vector<std::size_t> pick_outlier_channels(std::size_t channels, std::size_t count, std::uint64_t seed) {
  require(count < channels, ErrorKind::kInvalidArgument, "outlier channel count must be below the channel count");
  std::vector<std::size_t> ids(channels);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::mt19937_64 rng(mix(seed, 0x0C));
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, channels - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(count);
  std::sort(ids.begin(), ids.end());
  return ids;
}

KeyProfile key_profile(std::size_t channels, std::size_t outlier_channel_count, double outlier_scale,
                       std::uint64_t seed) {
  KeyProfile p;
  p.mean.assign(channels, 0.0);
  p.std.assign(channels, 1.0);
  std::mt19937_64 rng(mix(seed, 0x51));
  for (auto c : pick_outlier_channels(channels, outlier_channel_count, seed)) {
    p.std[c] = outlier_scale;
    p.mean[c] = (rng() & 1 ? 2.0 : -2.0) * (outlier_scale - 1.0);
  }
  return p;
}

CalibrationSet gen_synthetic_kv(const ToyDims& dims, std::size_t outlier_channel_count, double outlier_scale,
                                std::uint64_t seed) {
  dims.validate();
  require(outlier_scale > 0.0, ErrorKind::kInvalidArgument, "outlier scale must be positive");
  const std::size_t D = dims.channels(), T = dims.tokens;
  const KeyProfile prof = key_profile(D, outlier_channel_count, outlier_scale, seed);

  std::mt19937_64 rng(mix(seed, 0xDA7A));
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  CalibrationSet set;
  for (std::size_t s = 0; s < dims.calib_samples; ++s) {
    Tensor k = Tensor::zeros({T, D});
    Tensor v = Tensor::zeros({T, D});
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = 0; c < D; ++c) k.at(t, c) = static_cast<float>(prof.mean[c] + normal(rng) * prof.std[c]);
      double scale = std::exp(0.5 * normal(rng));
      if (unif(rng) < 0.02) scale *= 6.0;
      for (std::size_t c = 0; c < D; ++c) {
        double x = normal(rng) * scale;
        if (unif(rng) < 0.01) x *= 10.0;
        v.at(t, c) = static_cast<float>(x);
      }
    }
    set.keys.push_back(std::move(k));
    set.values.push_back(std::move(v));
  }
  return set;
}

ToyModel make_toy_model(const ToyDims& dims, std::uint64_t seed, std::size_t outlier_channel_count,
                        double outlier_scale) {
  dims.validate();
  ToyModel m;
  m.dims = dims;
  m.rope.head_dim = dims.head_dim;
  m.seed = seed;
  m.outlier_channel_count = outlier_channel_count;
  m.outlier_scale = outlier_scale;
  const std::size_t D = dims.channels();
  std::mt19937_64 rng(mix(seed, 0x30DE1));
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif(std::log(0.5), std::log(2.0));
  for (std::size_t l = 0; l < dims.n_layers; ++l) {
    m.layer_gain.push_back(std::exp(unif(rng)));
    Tensor w = Tensor::zeros({D, D});
    for (auto& x : w.data) x = static_cast<float>(normal(rng) / std::sqrt(static_cast<double>(D)));
    m.query_proj.push_back(std::move(w));
    m.data_seed.push_back(mix(seed, 0x1A7E, l));
    const KeyProfile prof = key_profile(D, outlier_channel_count, outlier_scale, m.data_seed.back());
    std::vector<double> ls;
    for (std::size_t h = 0; h < dims.n_heads; ++h) {
      double e2 = 0.0;
      for (std::size_t c = h * dims.head_dim; c < (h + 1) * dims.head_dim; ++c)
        e2 += prof.mean[c] * prof.mean[c] + prof.std[c] * prof.std[c];
      ls.push_back(m.sharpness / std::sqrt(e2));
    }
    m.logit_scale.push_back(std::move(ls));
  }
  return m;
}

std::vector<float> toy_query(const ToyModel& model, std::size_t layer, std::uint64_t stream, std::size_t position) {
  require(layer < model.dims.n_layers, ErrorKind::kOutOfRange, "toy_query: layer out of range");
  const std::size_t D = model.dims.channels();
  std::mt19937_64 rng(mix(model.seed, 0x9E7 + layer, stream, position));
  std::normal_distribution<double> normal;
  std::vector<double> x(D);
  for (auto& v : x) v = normal(rng);
  const Tensor& w = model.query_proj[layer];
  std::vector<float> q(D);
  for (std::size_t c = 0; c < D; ++c) {
    double acc = 0.0;
    for (std::size_t j = 0; j < D; ++j) acc += w.at(c, j) * x[j];
    q[c] = static_cast<float>(acc);
  }
  rope_apply_heads_inplace(model.rope, q, position);
  return q;
}

double central_difference(const std::function<double(double)>& f, double x, double eps) {
  require(eps > 0.0, ErrorKind::kInvalidArgument, "central_difference: eps must be positive");
  return (f(x + eps) - f(x - eps)) / (2.0 * eps);
}

double toy_loss(const ToyModel& model, std::size_t layer, const Tensor& keys, const Tensor& values,
                std::uint64_t stream) {
  require(keys.rank() == 2 && keys.shape == values.shape && keys.dim(1) == model.dims.channels(),
          ErrorKind::kShapeMismatch, "toy_loss: keys/values must be [tokens, channels]");
  const std::size_t T = keys.dim(0), H = model.dims.n_heads, hd = model.dims.head_dim;
  Tensor kr = keys;
  rotate_rows(model.rope, kr);
  const double g2 = model.layer_gain[layer] * model.layer_gain[layer];
  const auto& scale = model.logit_scale[layer];
  double loss = 0.0;
  for (std::size_t m = 0; m < T; ++m) {
    const auto q = toy_query(model, layer, stream, m);
    for (std::size_t h = 0; h < H; ++h) {
      std::vector<double> s(m + 1);
      for (std::size_t t = 0; t <= m; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < hd; ++j) acc += static_cast<double>(q[h * hd + j]) * kr.at(t, h * hd + j);
        s[t] = scale[h] * acc;
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      std::vector<double> o(hd, 0.0);
      for (std::size_t t = 0; t <= m; ++t) {
        const double e = std::exp(s[t] - mx);
        z += e;
        for (std::size_t j = 0; j < hd; ++j) o[j] += e * values.at(t, h * hd + j);
      }
      for (double v : o) loss += g2 * (v / z) * (v / z);
    }
  }
  return loss;
}

KVGrads finite_diff_grads(const ToyModel& model, std::size_t layer, const CalibrationSet& data, double eps) {
  require(eps > 0.0, ErrorKind::kInvalidArgument, "finite_diff_grads: eps must be positive");
  require(layer < model.dims.n_layers, ErrorKind::kOutOfRange, "finite_diff_grads: layer out of range");
  data.validate();
  const std::size_t H = model.dims.n_heads, hd = model.dims.head_dim, half = hd / 2;
  require(data.channels() == H * hd, ErrorKind::kShapeMismatch, "finite_diff_grads: channel count mismatch");
  const double g2 = model.layer_gain[layer] * model.layer_gain[layer];
  const auto& scale = model.logit_scale[layer];

  KVGrads grads;
  for (std::size_t s = 0; s < data.keys.size(); ++s) {
    const Tensor& keys = data.keys[s];
    const Tensor& values = data.values[s];
    const std::size_t T = keys.dim(0);
    Tensor kr = keys;
    rotate_rows(model.rope, kr);

    // Cached softmax state per (query, head); a single perturbed element only
    // touches one exponential (keys) or one numerator entry (values).
    std::vector<std::vector<float>> queries;
    std::vector<HeadState> st(T * H);
    for (std::size_t m = 0; m < T; ++m) {
      queries.push_back(toy_query(model, layer, s, m));
      const auto& q = queries.back();
      for (std::size_t h = 0; h < H; ++h) {
        HeadState& hs = st[m * H + h];
        std::vector<double> logit(m + 1);
        for (std::size_t t = 0; t <= m; ++t) {
          double acc = 0.0;
          for (std::size_t j = 0; j < hd; ++j) acc += static_cast<double>(q[h * hd + j]) * kr.at(t, h * hd + j);
          logit[t] = scale[h] * acc;
        }
        hs.mx = *std::max_element(logit.begin(), logit.end());
        hs.e.resize(m + 1);
        hs.num.assign(hd, 0.0);
        for (std::size_t t = 0; t <= m; ++t) {
          hs.z += hs.e[t] = std::exp(logit[t] - hs.mx);
          for (std::size_t j = 0; j < hd; ++j) hs.num[j] += hs.e[t] * values.at(t, h * hd + j);
        }
      }
    }

    Tensor gk = Tensor::zeros(keys.shape);
    Tensor gv = Tensor::zeros(values.shape);
    std::vector<double> num(hd);
    for (std::size_t t = 0; t < T; ++t) {
      const RopeAngles ang = rope_angles(model.rope, t);
      for (std::size_t c = 0; c < H * hd; ++c) {
        const std::size_t h = c / hd, j = c % hd, i = j % half;
        double dk = 0.0, dv = 0.0;
        for (std::size_t m = t; m < T; ++m) {
          const HeadState& hs = st[m * H + h];
          const auto& q = queries[m];
          const double q_lo = q[h * hd + i], q_hi = q[h * hd + i + half];
          // d logit / d k[t, c]: the query pulled back into token t's frame.
          const double w = scale[h] * (j < half ? q_lo * ang.cos[i] + q_hi * ang.sin[i]
                                             : q_hi * ang.cos[i] - q_lo * ang.sin[i]);
          double lk[2];
          for (int sign = 0; sign < 2; ++sign) {
            const double delta = sign == 0 ? eps : -eps;
            const double e_new = hs.e[t] * std::exp(w * delta);
            const double z = hs.z + (e_new - hs.e[t]);
            double acc = 0.0;
            for (std::size_t jj = 0; jj < hd; ++jj) {
              const double o = (hs.num[jj] + (e_new - hs.e[t]) * values.at(t, h * hd + jj)) / z;
              acc += o * o;
            }
            lk[sign] = g2 * acc;
          }
          dk += lk[0] - lk[1];
          const double up = (hs.num[j] + eps * hs.e[t]) / hs.z;
          const double dn = (hs.num[j] - eps * hs.e[t]) / hs.z;
          dv += g2 * (up * up - dn * dn);
        }
        gk.at(t, c) = static_cast<float>(dk / (2.0 * eps));
        gv.at(t, c) = static_cast<float>(dv / (2.0 * eps));
      }
    }
    grads.keys.push_back(std::move(gk));
    grads.values.push_back(std::move(gv));
  }
  return grads;
}

ToyData make_toy_data(const ToyModel& model, bool with_grads, double eps) {
  ToyDims dims = model.dims;
  dims.calib_samples += dims.eval_samples;
  ToyData data;
  for (std::size_t l = 0; l < model.dims.n_layers; ++l) {
    CalibrationSet all = gen_synthetic_kv(dims, model.outlier_channel_count, model.outlier_scale, model.data_seed[l]);
    ToyLayerData ld;
    const auto split = static_cast<std::ptrdiff_t>(model.dims.calib_samples);
    ld.eval_keys.assign(std::make_move_iterator(all.keys.begin() + split), std::make_move_iterator(all.keys.end()));
    ld.eval_values.assign(std::make_move_iterator(all.values.begin() + split),
                          std::make_move_iterator(all.values.end()));
    all.keys.resize(model.dims.calib_samples);
    all.values.resize(model.dims.calib_samples);
    ld.calib = std::move(all);
    if (with_grads) {
      KVGrads g = finite_diff_grads(model, l, ld.calib, eps);
      ld.calib.grads_keys = std::move(g.keys);
      ld.calib.grads_values = std::move(g.values);
    }
    data.layers.push_back(std::move(ld));
  }
  return data;
}

void SimConfig::validate(std::size_t n_layers) const {
  require(layer_bits.empty() || layer_bits.size() == n_layers, ErrorKind::kInvalidArgument,
          "simulate: layer_bits must be empty or one entry per layer");
  auto check = [&](int b) {
    if (b == 16) return;
    QuantConfig q = quant;
    q.bits = b;
    q.validate();
  };
  if (layer_bits.empty()) check(quant.bits);
  for (int b : layer_bits) check(b);
}

namespace {

// Calibrated quantizers of one layer. The default modes keep the quantizers
// for a QuantizedKVCache; the ablation modes map a held-out matrix to its
// rotated (keys) or plain (values) fake-quantized copy.
struct LayerQuant {
  std::shared_ptr<const KeyQuantizer> kq;
  std::shared_ptr<const ValueQuantizer> vq;
  std::function<Tensor(const Tensor&)> keys_rot;
  std::function<Tensor(const Tensor&)> values;
};

std::vector<FisherDiag> shared_fisher(const std::vector<Tensor>& grads) {
  if (grads.empty()) return {};
  return {fisher_diag(grads)};
}

std::vector<Tensor> rotated(const RopeParams& rope, const std::vector<Tensor>& xs) {
  std::vector<Tensor> out = xs;
  for (auto& x : out) rotate_rows(rope, x);
  return out;
}

LayerQuant prepare_layer(const ToyModel& model, const ToyLayerData& ld, const SimConfig& cfg, int bits) {
  LayerQuant lq;
  const RopeParams rope = model.rope;
  auto rotate = [rope](Tensor k) {
    rotate_rows(rope, k);
    return k;
  };
  if (bits == 16) {
    lq.keys_rot = rotate;
    lq.values = [](const Tensor& v) { return v; };
    return lq;
  }
  QuantConfig q = cfg.quant;
  q.bits = bits;
  const auto pk = shared_fisher(ld.calib.grads_keys);
  const auto pv = shared_fisher(ld.calib.grads_values);

  if (cfg.key_mode == KeyMode::kPreRopeChannel && cfg.value_mode == ValueMode::kPerToken) {
    lq.kq = std::make_shared<const KeyQuantizer>(calibrate_channel_quantizer(ld.calib.keys, pk, q, rope));
    lq.vq = std::make_shared<const ValueQuantizer>(calibrate_token_quantizer(ld.calib.values, pv, q));
    return lq;
  }

  // Post-RoPE variants reuse the pre-RoPE Fisher as per-element weights.
  switch (cfg.key_mode) {
    case KeyMode::kPreRopeChannel: {
      auto kq = calibrate_channel_quantizer(ld.calib.keys, pk, q, rope);
      lq.keys_rot = [=](const Tensor& k) { return rotate(fake_quantize(kq, k)); };
      break;
    }
    case KeyMode::kPostRopeChannel: {
      auto kq = calibrate_channel_quantizer(rotated(rope, ld.calib.keys), pk, q, rope);
      lq.keys_rot = [=](const Tensor& k) { return fake_quantize(kq, rotate(k)); };
      break;
    }
    case KeyMode::kPreRopeToken: {
      auto kq = calibrate_token_quantizer(ld.calib.keys, pk, q);
      lq.keys_rot = [=](const Tensor& k) { return rotate(fake_quantize(kq, k)); };
      break;
    }
    case KeyMode::kPostRopeToken: {
      auto kq = calibrate_token_quantizer(rotated(rope, ld.calib.keys), pk, q);
      lq.keys_rot = [=](const Tensor& k) { return fake_quantize(kq, rotate(k)); };
      break;
    }
  }
  if (cfg.value_mode == ValueMode::kPerToken) {
    auto vq = calibrate_token_quantizer(ld.calib.values, pv, q);
    lq.values = [=](const Tensor& v) { return fake_quantize(vq, v); };
  } else {
    auto vq = calibrate_channel_quantizer(ld.calib.values, pv, q, rope);
    lq.values = [=](const Tensor& v) { return fake_quantize(vq, v); };
  }
  return lq;
}

}  // namespace

FidelityReport decode_compare(const ToyModel& model, const ToyData& data, const SimConfig& cfg, std::size_t steps) {
  const std::size_t L = model.dims.n_layers, H = model.dims.n_heads, hd = model.dims.head_dim;
  const std::size_t D = H * hd;
  require(data.layers.size() == L, ErrorKind::kShapeMismatch, "decode_compare: data has the wrong layer count");
  cfg.validate(L);
  require(steps >= 1, ErrorKind::kInvalidArgument, "decode_compare: steps must be >= 1");
  const std::size_t E = data.layers.front().eval_keys.size();
  require(E >= 1, ErrorKind::kInvalidArgument, "decode_compare: no held-out samples");
  const std::size_t T = data.layers.front().eval_keys.front().dim(0);
  require(steps <= T, ErrorKind::kInvalidArgument, "decode_compare: steps exceed the held-out token count");
  const std::size_t prefill = T - steps;

  // [sample * steps + step][layer * D + c]
  std::vector<std::vector<double>> ref(E * steps, std::vector<double>(L * D));
  std::vector<std::vector<double>> got(E * steps, std::vector<double>(L * D));
  FidelityReport rep;
  for (std::size_t l = 0; l < L; ++l) {
    const ToyLayerData& ld = data.layers[l];
    require(ld.eval_keys.size() == E && ld.eval_values.size() == E, ErrorKind::kShapeMismatch,
            "decode_compare: held-out sample counts differ across layers");
    const int bits = cfg.layer_bits.empty() ? cfg.quant.bits : cfg.layer_bits[l];
    const LayerQuant lq = prepare_layer(model, ld, cfg, bits);
    const auto& scale = model.logit_scale[l];

    double se = 0.0, sn = 0.0;
    for (std::size_t e = 0; e < E; ++e) {
      const Tensor& keys = ld.eval_keys[e];
      const Tensor& values = ld.eval_values[e];
      require(keys.shape == std::vector<std::uint64_t>{T, D} && values.shape == keys.shape,
              ErrorKind::kShapeMismatch, "decode_compare: held-out tensors must be [tokens, channels]");
      const std::uint64_t stream = model.dims.calib_samples + e;
      Tensor fp_keys = keys;
      rotate_rows(model.rope, fp_keys);

      std::unique_ptr<QuantizedKVCache> cache;
      Tensor q_keys, q_values;
      if (lq.kq) {
        cache = std::make_unique<QuantizedKVCache>(lq.kq, lq.vq);
        for (std::size_t t = 0; t < prefill; ++t) {
          cache->append_key(keys.row(t));
          cache->append_value(values.row(t));
        }
      } else {
        q_keys = lq.keys_rot(keys);
        q_values = lq.values(values);
      }

      for (std::size_t s = 0; s < steps; ++s) {
        const std::size_t n = prefill + s;
        const auto q = toy_query(model, l, stream, n);
        const auto s_ref = fp_scores(q, fp_keys, n, H, hd);
        const auto o_ref = fp_weighted_values(softmax_weights(s_ref, scale), values, H, hd);
        std::vector<float> s_q, o_q;
        if (cache) {
          cache->append_key(keys.row(n));
          cache->append_value(values.row(n));
          s_q = cache->qk_scores(q);
          o_q = cache->av_matvec(softmax_weights(s_q, scale));
        } else {
          s_q = fp_scores(q, q_keys, n, H, hd);
          o_q = fp_weighted_values(softmax_weights(s_q, scale), q_values, H, hd);
        }
        for (std::size_t i = 0; i < s_ref.size(); ++i) {
          const double d = static_cast<double>(s_q[i]) - s_ref[i];
          se += d * d;
          sn += static_cast<double>(s_ref[i]) * s_ref[i];
        }
        for (std::size_t c = 0; c < D; ++c) {
          ref[e * steps + s][l * D + c] = model.layer_gain[l] * o_ref[c];
          got[e * steps + s][l * D + c] = model.layer_gain[l] * o_q[c];
        }
      }
    }
    rep.layer_score_errors.push_back(sn > 0.0 ? std::sqrt(se / sn) : std::sqrt(se));
  }

  for (std::size_t i = 0; i < ref.size(); ++i) {
    double e = 0.0, r = 0.0;
    for (std::size_t j = 0; j < L * D; ++j) {
      const double d = got[i][j] - ref[i][j];
      e += d * d;
      r += ref[i][j] * ref[i][j];
      rep.max_abs_error = std::max(rep.max_abs_error, std::abs(d));
    }
    rep.step_errors.push_back(r > 0.0 ? std::sqrt(e / r) : std::sqrt(e));
  }
  rep.mean_step_error =
      std::accumulate(rep.step_errors.begin(), rep.step_errors.end(), 0.0) / static_cast<double>(ref.size());
  return rep;
}

std::vector<LayerSensitivity> layer_sensitivities(const ToyModel& model, const ToyData& data, const QuantConfig& cfg) {
  require(data.layers.size() == model.dims.n_layers, ErrorKind::kShapeMismatch,
          "layer_sensitivities: data has the wrong layer count");
  std::vector<LayerSensitivity> out;
  for (std::size_t l = 0; l < data.layers.size(); ++l) {
    const CalibrationSet& c = data.layers[l].calib;
    require(c.has_grads(), ErrorKind::kInvalidArgument, "layer_sensitivities: calibration set has no gradients");
    const FisherDiag fk = fisher_diag(c.grads_keys);
    const FisherDiag fv = fisher_diag(c.grads_values);
    const KeyQuantizer kq = calibrate_key_quantizer(c, fk, cfg, model.rope);
    const ValueQuantizer vq = calibrate_value_quantizer(c, fv, cfg);
    double omega = 0.0;
    for (std::size_t s = 0; s < c.keys.size(); ++s) {
      omega += layer_sensitivity(c.keys[s], fake_quantize(kq, c.keys[s]), fk);
      omega += layer_sensitivity(c.values[s], fake_quantize(vq, c.values[s]), fv);
    }
    out.push_back({l, omega});
  }
  return out;
}

}  // namespace kvq
