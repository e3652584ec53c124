#include "kvq/kvcache.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kvq/error.hpp"

namespace kvq {

void QuantConfig::validate() const {
  require(valid_bits(bits), ErrorKind::kInvalidArgument, "bits must be 2, 3 or 4");
  require(outlier_fraction >= 0.0 && outlier_fraction < 0.5, ErrorKind::kInvalidArgument,
          "outlier fraction must be in [0, 0.5)");
}

double outlier_residual(float x, float dense) { return static_cast<double>(x) - static_cast<double>(dense); }

float reconstruct(float dense, double residual) { return static_cast<float>(static_cast<double>(dense) + residual); }

namespace {

// Encodes x against the codebook after clamping into [lo, hi]; x outside the
// range produces a residual entry.
std::uint32_t encode_element(const NuqCodebook& cb, const AffineParams& aff, float lo, float hi, float x,
                             std::uint32_t channel, std::vector<SparseEntry>& outliers, bool is_outlier) {
  const float kept = std::clamp(x, lo, hi);
  const std::uint32_t code = cb.encode(std::clamp(normalize_value(kept, aff), -1.0f, 1.0f));
  if (is_outlier) outliers.push_back({channel, outlier_residual(x, cb.decode(code, aff))});
  return code;
}

std::vector<float> decode_vector(const NuqCodebook& cb, const QuantizedVector& q,
                                 std::span<const AffineParams> per_channel, const AffineParams* shared) {
  std::vector<float> out(q.codes.size());
  for (std::size_t c = 0; c < out.size(); ++c)
    out[c] = cb.decode(q.codes[c], shared ? *shared : per_channel[c]);
  for (const auto& e : q.outliers) out[e.index] = reconstruct(out[e.index], e.value);
  return out;
}

// Kept-range of the elements inside [glo, ghi]; falls back to the clamped
// mean when nothing survives the layer-wide threshold.
ChannelRange kept_range_within(std::span<const float> v, ChannelRange global) {
  bool any = false;
  ChannelRange r;
  double sum = 0.0;
  for (float x : v) {
    sum += x;
    if (x < global.lo || x > global.hi) continue;
    if (!any) {
      r.lo = r.hi = x;
      any = true;
    } else {
      r.lo = std::min(r.lo, x);
      r.hi = std::max(r.hi, x);
    }
  }
  if (!any) {
    const float m = std::clamp(static_cast<float>(sum / static_cast<double>(v.size())), global.lo, global.hi);
    r.lo = r.hi = m;
  }
  return r;
}

ChannelRange matrix_threshold(std::span<const Tensor> samples, const QuantConfig& cfg) {
  std::vector<float> pooled;
  for (const auto& s : samples) pooled.insert(pooled.end(), s.data.begin(), s.data.end());
  const auto split = vector_outlier_split(pooled, cfg.outlier_fraction, cfg.outlier_rule);
  return {split.lo, split.hi};
}

void check_samples(std::span<const Tensor> samples, std::span<const FisherDiag> fisher) {
  require(!samples.empty(), ErrorKind::kInvalidArgument, "calibration: no samples");
  for (const auto& s : samples) {
    require(s.rank() == 2 && s.dim(0) > 0 && s.dim(1) > 0, ErrorKind::kShapeMismatch,
            "calibration: samples must be non-empty [tokens, channels]");
    require(s.shape == samples.front().shape, ErrorKind::kShapeMismatch, "calibration: sample shapes differ");
  }
  require(fisher.size() <= 1 || fisher.size() == samples.size(), ErrorKind::kShapeMismatch,
          "calibration: need one Fisher tensor or one per sample");
  for (const auto& f : fisher)
    require(f.weights.shape == samples.front().shape, ErrorKind::kShapeMismatch,
            "calibration: Fisher shape differs from activation shape");
}

NuqCodebook fit_codebook(const std::vector<float>& points, const std::vector<float>& weights,
                         const QuantConfig& cfg) {
  NuqCodebook cb = derive_codebook(points, weights, cfg.bits, cfg.codebook);
  if (cfg.qnorm) {
    const QNormStats st = measure_qnorm_stats(points, cb);
    // Constant calibration data has no spread to match.
    if (st.sigma1 > 0.0 && st.sigma2 > 0.0) cb = apply_qnorm(cb, st);
  }
  return cb;
}

float fisher_weight(std::span<const FisherDiag> fisher, std::size_t s, std::size_t t, std::size_t c) {
  if (fisher.empty()) return 1.0f;
  return fisher[fisher.size() == 1 ? 0 : s].weights.at(t, c);
}

}  // namespace

std::vector<FisherDiag> per_sample_fisher(std::span<const Tensor> grads) {
  std::vector<FisherDiag> out;
  for (const auto& g : grads) out.push_back(fisher_diag(std::span<const Tensor>(&g, 1)));
  return out;
}

QuantizedVector KeyQuantizer::quantize(std::span<const float> k) const {
  require(k.size() == channels(), ErrorKind::kShapeMismatch, "key quantize: length != channels");
  QuantizedVector q;
  q.codes.resize(k.size());
  for (std::size_t c = 0; c < k.size(); ++c) {
    const auto [lo, hi] = thresholds[c];
    const bool out = k[c] < lo || k[c] > hi;
    q.codes[c] = encode_element(codebook, affine[c], lo, hi, k[c], static_cast<std::uint32_t>(c), q.outliers, out);
  }
  return q;
}

std::vector<float> KeyQuantizer::dequantize(const QuantizedVector& q) const {
  require(q.codes.size() == channels(), ErrorKind::kShapeMismatch, "key dequantize: length != channels");
  return decode_vector(codebook, q, affine, nullptr);
}

QuantizedVector ValueQuantizer::quantize(std::span<const float> v) const {
  require(!v.empty(), ErrorKind::kInvalidArgument, "value quantize: empty vector");
  std::vector<char> is_outlier(v.size(), 0);
  ChannelRange range;
  if (matrix_threshold) {
    range = kept_range_within(v, *matrix_threshold);
    for (std::size_t c = 0; c < v.size(); ++c)
      is_outlier[c] = v[c] < matrix_threshold->lo || v[c] > matrix_threshold->hi;
  } else {
    const auto split = vector_outlier_split(v, outlier_fraction, outlier_rule);
    range = {split.lo, split.hi};
    for (auto i : split.outlier_indices) is_outlier[i] = 1;
  }
  QuantizedVector q;
  q.affine = affine_for_range(range.lo, range.hi);
  q.codes.resize(v.size());
  for (std::size_t c = 0; c < v.size(); ++c)
    q.codes[c] = encode_element(codebook, q.affine, range.lo, range.hi, v[c], static_cast<std::uint32_t>(c),
                                q.outliers, is_outlier[c] != 0);
  return q;
}

std::vector<float> ValueQuantizer::dequantize(const QuantizedVector& q) const {
  return decode_vector(codebook, q, {}, &q.affine);
}

KeyQuantizer calibrate_channel_quantizer(std::span<const Tensor> samples, std::span<const FisherDiag> fisher,
                                         const QuantConfig& cfg, const RopeParams& rope) {
  cfg.validate();
  rope.validate();
  check_samples(samples, fisher);
  const std::size_t tokens = samples.front().dim(0);
  const std::size_t channels = samples.front().dim(1);
  require(channels % rope.head_dim == 0, ErrorKind::kShapeMismatch, "channels must be a multiple of head_dim");
  if (!cfg.fisher_weighted) fisher = {};

  std::optional<ChannelRange> global;
  if (cfg.threshold_mode == ThresholdMode::kPerMatrix) global = matrix_threshold(samples, cfg);

  KeyQuantizer kq;
  kq.rope = rope;
  kq.thresholds.resize(channels);
  kq.affine.resize(channels);
  std::vector<float> column(samples.size() * tokens);
  for (std::size_t c = 0; c < channels; ++c) {
    std::size_t i = 0;
    for (const auto& s : samples)
      for (std::size_t t = 0; t < tokens; ++t) column[i++] = s.at(t, c);
    if (global) {
      kq.thresholds[c] = kept_range_within(column, *global);
    } else {
      const auto split = vector_outlier_split(column, cfg.outlier_fraction, cfg.outlier_rule);
      kq.thresholds[c] = {split.lo, split.hi};
    }
    kq.affine[c] = affine_for_range(kq.thresholds[c].lo, kq.thresholds[c].hi);
  }

  std::vector<float> points, weights;
  points.reserve(samples.size() * tokens * channels);
  weights.reserve(points.capacity());
  for (std::size_t s = 0; s < samples.size(); ++s) {
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t c = 0; c < channels; ++c) {
        const float x = samples[s].at(t, c);
        if (x < kq.thresholds[c].lo || x > kq.thresholds[c].hi) continue;
        points.push_back(std::clamp(normalize_value(x, kq.affine[c]), -1.0f, 1.0f));
        weights.push_back(fisher_weight(fisher, s, t, c));
      }
    }
  }
  kq.codebook = fit_codebook(points, weights, cfg);
  return kq;
}

ValueQuantizer calibrate_token_quantizer(std::span<const Tensor> samples, std::span<const FisherDiag> fisher,
                                         const QuantConfig& cfg) {
  cfg.validate();
  check_samples(samples, fisher);
  if (!cfg.fisher_weighted) fisher = {};

  ValueQuantizer vq;
  vq.outlier_fraction = cfg.outlier_fraction;
  vq.outlier_rule = cfg.outlier_rule;
  if (cfg.threshold_mode == ThresholdMode::kPerMatrix) vq.matrix_threshold = matrix_threshold(samples, cfg);

  std::vector<float> points, weights;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    for (std::size_t t = 0; t < samples[s].dim(0); ++t) {
      const auto row = samples[s].row(t);
      ChannelRange range;
      if (vq.matrix_threshold) {
        range = kept_range_within(row, *vq.matrix_threshold);
      } else {
        const auto split = vector_outlier_split(row, cfg.outlier_fraction, cfg.outlier_rule);
        range = {split.lo, split.hi};
      }
      const AffineParams aff = affine_for_range(range.lo, range.hi);
      for (std::size_t c = 0; c < row.size(); ++c) {
        if (row[c] < range.lo || row[c] > range.hi) continue;
        points.push_back(std::clamp(normalize_value(row[c], aff), -1.0f, 1.0f));
        weights.push_back(fisher_weight(fisher, s, t, c));
      }
    }
  }
  vq.codebook = fit_codebook(points, weights, cfg);
  return vq;
}

KeyQuantizer calibrate_key_quantizer(const CalibrationSet& calib, const QuantConfig& cfg, const RopeParams& rope) {
  calib.validate();
  if (!calib.has_grads()) return calibrate_channel_quantizer(calib.keys, {}, cfg, rope);
  return calibrate_key_quantizer(calib, fisher_diag(calib.grads_keys), cfg, rope);
}

ValueQuantizer calibrate_value_quantizer(const CalibrationSet& calib, const QuantConfig& cfg) {
  calib.validate();
  if (!calib.has_grads()) return calibrate_token_quantizer(calib.values, {}, cfg);
  return calibrate_value_quantizer(calib, fisher_diag(calib.grads_values), cfg);
}

KeyQuantizer calibrate_key_quantizer(const CalibrationSet& calib, const FisherDiag& fisher, const QuantConfig& cfg,
                                     const RopeParams& rope) {
  calib.validate();
  return calibrate_channel_quantizer(calib.keys, std::span<const FisherDiag>(&fisher, 1), cfg, rope);
}

ValueQuantizer calibrate_value_quantizer(const CalibrationSet& calib, const FisherDiag& fisher,
                                         const QuantConfig& cfg) {
  calib.validate();
  return calibrate_token_quantizer(calib.values, std::span<const FisherDiag>(&fisher, 1), cfg);
}

// ---------------------------------------------------------------------------

QuantizedKVCache::QuantizedKVCache(std::shared_ptr<const KeyQuantizer> kq, std::shared_ptr<const ValueQuantizer> vq)
    : kq_(std::move(kq)), vq_(std::move(vq)) {
  require(kq_ && vq_, ErrorKind::kInvalidArgument, "cache: quantizers must be set");
  kq_->rope.validate();
  const std::size_t d = kq_->channels();
  require(d > 0 && d % kq_->rope.head_dim == 0, ErrorKind::kShapeMismatch,
          "cache: channels must be a positive multiple of head_dim");
  require(kq_->affine.size() == d, ErrorKind::kShapeMismatch, "cache: key affine count != channels");

  const std::size_t levels = kq_->codebook.size();
  key_lut_.resize(d * levels);
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t j = 0; j < levels; ++j)
      key_lut_[c * levels + j] = kq_->codebook.decode(static_cast<std::uint32_t>(j), kq_->affine[c]);
  frequencies_.resize(head_dim() / 2);
  for (std::size_t i = 0; i < frequencies_.size(); ++i) frequencies_[i] = kq_->rope.frequency(i);

  key_codes_.assign(d, PackedCodes(kq_->codebook.bits()));
  key_sparse_ = SparseCSC(d);
  value_codes_ = PackedCodes(vq_->codebook.bits());
  value_sparse_ = SparseCSR(d);
}

void QuantizedKVCache::append_key(std::span<const float> k) {
  require(!key_pending_, ErrorKind::kState, "cache: append_key twice without append_value");
  const QuantizedVector q = kq_->quantize(k);
  for (std::size_t c = 0; c < q.codes.size(); ++c) key_codes_[c].push_back(q.codes[c]);
  key_sparse_.append_token(q.outliers);
  key_pending_ = true;
}

void QuantizedKVCache::append_value(std::span<const float> v) {
  require(key_pending_, ErrorKind::kState, "cache: append_value requires a preceding append_key");
  require(v.size() == channels(), ErrorKind::kShapeMismatch, "cache: value length != channels");
  const QuantizedVector q = vq_->quantize(v);
  for (auto code : q.codes) value_codes_.push_back(code);
  value_sparse_.append_token(q.outliers);
  value_affine_.push_back(q.affine);
  key_pending_ = false;
}

float QuantizedKVCache::dense_key(std::size_t t, std::size_t c) const {
  return kq_->codebook.decode(key_codes_[c].at(t), kq_->affine[c]);
}

float QuantizedKVCache::dense_value(std::size_t t, std::size_t c) const {
  return vq_->codebook.decode(value_codes_.at(t * channels() + c), value_affine_[t]);
}

void QuantizedKVCache::require_steady(const char* what) const {
  require(!key_pending_, ErrorKind::kState, what);
}

std::vector<float> QuantizedKVCache::qk_scores(std::span<const float> q) const {
  require_steady("qk_scores: a key is pending its value");
  require(token_count() > 0, ErrorKind::kState, "qk_scores: cache is empty");
  require(q.size() == channels(), ErrorKind::kShapeMismatch, "qk_scores: query length != channels");
  const std::size_t T = token_count(), H = n_heads(), hd = head_dim(), half = hd / 2;
  const std::size_t levels = kq_->codebook.size();

  std::vector<double> scores(H * T, 0.0);
  std::vector<double> cs(half), sn(half);
  for (std::size_t n = 0; n < T; ++n) {
    for (std::size_t i = 0; i < half; ++i) {
      const double a = static_cast<double>(n) * frequencies_[i];
      cs[i] = std::cos(a);
      sn[i] = std::sin(a);
    }
    for (std::size_t h = 0; h < H; ++h) {
      double acc = 0.0;
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t c_lo = h * hd + i, c_hi = c_lo + half;
        const double k_lo = key_lut_[c_lo * levels + key_codes_[c_lo].at(n)];
        const double k_hi = key_lut_[c_hi * levels + key_codes_[c_hi].at(n)];
        acc += q[c_lo] * (k_lo * cs[i] - k_hi * sn[i]) + q[c_hi] * (k_hi * cs[i] + k_lo * sn[i]);
      }
      scores[h * T + n] = acc;
    }
  }

  // Sparse residuals: q . R_n r == (R_n^T q) . r, evaluated per nonzero.
  detail::balanced_accumulate(
      key_sparse_,
      [&](std::size_t t, std::size_t c) {
        const std::size_t h = c / hd, j = c % hd, i = j % half;
        const double a = static_cast<double>(t) * frequencies_[i];
        const double q_lo = q[h * hd + i], q_hi = q[h * hd + i + half];
        return j < half ? q_lo * std::cos(a) + q_hi * std::sin(a) : q_hi * std::cos(a) - q_lo * std::sin(a);
      },
      [&](std::size_t t, std::size_t c) { return (c / hd) * T + t; }, scores, kNnzPerChunk);

  return std::vector<float>(scores.begin(), scores.end());
}

std::vector<float> QuantizedKVCache::av_matvec(std::span<const float> w) const {
  require_steady("av_matvec: a key is pending its value");
  const std::size_t T = token_count(), D = channels(), hd = head_dim();
  require(w.size() == n_heads() * T, ErrorKind::kShapeMismatch, "av_matvec: weight length != heads * tokens");
  const auto centroids = vq_->codebook.centroids();
  std::vector<float> lut(centroids.size());
  std::vector<double> out(D, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const AffineParams& aff = value_affine_[t];
    for (std::size_t j = 0; j < lut.size(); ++j)
      lut[j] = aff.degenerate ? aff.offset : centroids[j] * aff.scale + aff.offset;
    for (std::size_t c = 0; c < D; ++c)
      out[c] += static_cast<double>(w[(c / hd) * T + t]) * lut[value_codes_.at(t * D + c)];
  }
  detail::balanced_accumulate(
      value_sparse_, [&](std::size_t t, std::size_t c) { return w[(c / hd) * T + t]; },
      [](std::size_t, std::size_t c) { return c; }, out, kNnzPerChunk);
  return std::vector<float>(out.begin(), out.end());
}

std::vector<float> QuantizedKVCache::dequantize_key(std::size_t t) const {
  require(t < key_sparse_.tokens(), ErrorKind::kOutOfRange, "dequantize_key: token out of range");
  QuantizedVector q;
  q.codes.resize(channels());
  for (std::size_t c = 0; c < channels(); ++c) q.codes[c] = key_codes_[c].at(t);
  const auto ptr = key_sparse_.col_ptr();
  for (auto nz = ptr[t]; nz < ptr[t + 1]; ++nz) q.outliers.push_back({key_sparse_.row_idx()[nz], key_sparse_.vals()[nz]});
  return kq_->dequantize(q);
}

std::vector<float> QuantizedKVCache::dequantize_value(std::size_t t) const {
  require(t < token_count(), ErrorKind::kOutOfRange, "dequantize_value: token out of range");
  QuantizedVector q;
  q.affine = value_affine_[t];
  q.codes.resize(channels());
  for (std::size_t c = 0; c < channels(); ++c) q.codes[c] = value_codes_.at(t * channels() + c);
  const auto ptr = value_sparse_.row_ptr();
  for (auto nz = ptr[t]; nz < ptr[t + 1]; ++nz) q.outliers.push_back({value_sparse_.col_idx()[nz], value_sparse_.vals()[nz]});
  return vq_->dequantize(q);
}

namespace {

constexpr std::uint64_t kExactFloatInt = std::uint64_t{1} << 24;

float as_index(std::uint64_t v) {
  require(v < kExactFloatInt, ErrorKind::kOutOfRange, "snapshot: index exceeds exact f32 integer range");
  return static_cast<float>(v);
}

std::uint64_t from_index(float v) {
  require(v >= 0.0f && v < static_cast<float>(kExactFloatInt) && v == std::floor(v), ErrorKind::kMalformed,
          "snapshot: index field is not a non-negative integer");
  return static_cast<std::uint64_t>(v);
}

// (token, channel, original value) per nonzero; the residual is rebuilt from
// the dense decode on load.
template <class Dense>
Tensor triplets(const TokenMajorSparse& s, Dense&& dense) {
  Tensor t = Tensor::zeros({s.nnz(), 3});
  const auto ptr = s.ptr();
  for (std::size_t tok = 0; tok < s.tokens(); ++tok) {
    for (auto nz = ptr[tok]; nz < ptr[tok + 1]; ++nz) {
      t.at(nz, 0) = as_index(tok);
      t.at(nz, 1) = as_index(s.idx()[nz]);
      t.at(nz, 2) = reconstruct(dense(tok, s.idx()[nz]), s.vals()[nz]);
    }
  }
  return t;
}

template <class Dense>
std::vector<std::vector<SparseEntry>> from_triplets(const Tensor& t, std::size_t tokens, Dense&& dense) {
  require(t.rank() == 2 && t.dim(1) == 3, ErrorKind::kMalformed, "snapshot: sparse triplets must be [nnz, 3]");
  std::vector<std::vector<SparseEntry>> rows(tokens);
  std::uint64_t prev = 0;
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    const auto tok = from_index(t.at(i, 0));
    require(tok < tokens && tok >= prev, ErrorKind::kMalformed, "snapshot: triplets must be token-ordered");
    prev = tok;
    const auto c = from_index(t.at(i, 1));
    require(c < kExactFloatInt, ErrorKind::kMalformed, "snapshot: channel index out of range");
    rows[tok].push_back({static_cast<std::uint32_t>(c), outlier_residual(t.at(i, 2), dense(tok, c))});
  }
  return rows;
}

// Columns: scale, offset, degenerate mark (0 or 1).
AffineParams value_affine_at(const Tensor& va, std::size_t t) {
  const float mark = va.at(t, 2);
  require(mark == 0.0f || mark == 1.0f, ErrorKind::kMalformed, "snapshot: degenerate mark must be 0 or 1");
  return {va.at(t, 0), va.at(t, 1), mark == 1.0f};
}

}  // namespace

void QuantizedKVCache::save_snapshot(const std::filesystem::path& dir) const {
  require_steady("save_snapshot: a key is pending its value");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kIo, "save_snapshot: cannot create " + dir.string());
  const std::size_t T = token_count(), D = channels();

  Tensor kc = Tensor::zeros({D, T});
  for (std::size_t c = 0; c < D; ++c)
    for (std::size_t t = 0; t < T; ++t) kc.at(c, t) = static_cast<float>(key_codes_[c].at(t));
  Tensor ka = Tensor::zeros({D, 3});
  for (std::size_t c = 0; c < D; ++c) {
    ka.at(c, 0) = kq_->affine[c].scale;
    ka.at(c, 1) = kq_->affine[c].offset;
    ka.at(c, 2) = kq_->affine[c].degenerate ? 1.0f : 0.0f;
  }
  Tensor vc = Tensor::zeros({T, D});
  for (std::size_t i = 0; i < T * D; ++i) vc.data[i] = static_cast<float>(value_codes_.at(i));
  Tensor va = Tensor::zeros({T, 3});
  for (std::size_t t = 0; t < T; ++t) {
    va.at(t, 0) = value_affine_[t].scale;
    va.at(t, 1) = value_affine_[t].offset;
    va.at(t, 2) = value_affine_[t].degenerate ? 1.0f : 0.0f;
  }
  write_tensor(kc, dir / "key_codes.kvqt");
  write_tensor(ka, dir / "key_affine.kvqt");
  write_tensor(triplets(key_sparse_, [&](std::size_t t, std::size_t c) { return dense_key(t, c); }),
               dir / "key_sparse.kvqt");
  write_tensor(vc, dir / "value_codes.kvqt");
  write_tensor(va, dir / "value_affine.kvqt");
  write_tensor(triplets(value_sparse_, [&](std::size_t t, std::size_t c) { return dense_value(t, c); }),
               dir / "value_sparse.kvqt");
}

QuantizedKVCache QuantizedKVCache::load_snapshot(const std::filesystem::path& dir,
                                                 std::shared_ptr<const KeyQuantizer> kq,
                                                 std::shared_ptr<const ValueQuantizer> vq) {
  QuantizedKVCache cache(std::move(kq), std::move(vq));
  const std::size_t D = cache.channels();
  const Tensor kc = read_tensor(dir / "key_codes.kvqt");
  const Tensor vc = read_tensor(dir / "value_codes.kvqt");
  const Tensor va = read_tensor(dir / "value_affine.kvqt");
  require(kc.rank() == 2 && kc.dim(0) == D, ErrorKind::kShapeMismatch, "snapshot: key codes shape mismatch");
  const std::size_t T = kc.dim(1);
  require(vc.shape == std::vector<std::uint64_t>{T, D} && va.shape == std::vector<std::uint64_t>{T, 3},
          ErrorKind::kShapeMismatch, "snapshot: value arrays shape mismatch");
  const auto code_at = [](float v, const NuqCodebook& cb) {
    const auto code = from_index(v);
    require(code < cb.size(), ErrorKind::kMalformed, "snapshot: code out of range");
    return static_cast<std::uint32_t>(code);
  };
  const KeyQuantizer& kqr = *cache.kq_;
  const ValueQuantizer& vqr = *cache.vq_;
  const auto ks = from_triplets(read_tensor(dir / "key_sparse.kvqt"), T, [&](std::size_t t, std::size_t c) {
    require(c < D, ErrorKind::kMalformed, "snapshot: key sparse channel out of range");
    return kqr.codebook.decode(code_at(kc.at(c, t), kqr.codebook), kqr.affine[c]);
  });
  const auto vs = from_triplets(read_tensor(dir / "value_sparse.kvqt"), T, [&](std::size_t t, std::size_t c) {
    require(c < D, ErrorKind::kMalformed, "snapshot: value sparse channel out of range");
    return vqr.codebook.decode(code_at(vc.at(t, c), vqr.codebook), value_affine_at(va, t));
  });

  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < D; ++c) cache.key_codes_[c].push_back(static_cast<std::uint32_t>(from_index(kc.at(c, t))));
    cache.key_sparse_.append_token(ks[t]);
    for (std::size_t c = 0; c < D; ++c) cache.value_codes_.push_back(static_cast<std::uint32_t>(from_index(vc.at(t, c))));
    cache.value_sparse_.append_token(vs[t]);
    const AffineParams aff = value_affine_at(va, t);
    require(aff.scale > 0.0f, ErrorKind::kMalformed, "snapshot: value scale must be positive");
    cache.value_affine_.push_back(aff);
  }
  return cache;
}

}  // namespace kvq
