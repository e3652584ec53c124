#include "kvq/serialize.hpp"

#include <fstream>
#include <sstream>

#include "kvq/error.hpp"

namespace kvq {

namespace {

constexpr const char* kBundleFormat = "kvq-quantizers";
constexpr int kBundleVersion = 1;

// nlohmann throws its own exception types; surface them as malformed input.
template <class F>
auto guarded(const char* what, F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kMalformed, std::string(what) + ": " + e.what());
  }
}

const char* rule_name(OutlierRule r) { return r == OutlierRule::kMagnitude ? "magnitude" : "two_sided"; }

OutlierRule rule_from(const std::string& s) {
  if (s == "two_sided") return OutlierRule::kTwoSided;
  if (s == "magnitude") return OutlierRule::kMagnitude;
  fail(ErrorKind::kMalformed, "unknown outlier rule '" + s + "'");
}

}  // namespace

Json codebook_to_json(const NuqCodebook& cb, std::int64_t layer_id, const std::string& tensor_kind) {
  Json j;
  j["layer_id"] = layer_id;
  j["tensor_kind"] = tensor_kind;
  j["bits"] = cb.bits();
  j["centroids"] = std::vector<float>(cb.signposts().begin(), cb.signposts().end());
  if (const auto& q = cb.qnorm()) {
    j["qnorm"] = {{"mu1", q->mu1}, {"sigma1", q->sigma1}, {"mu2", q->mu2}, {"sigma2", q->sigma2}};
  } else {
    j["qnorm"] = nullptr;
  }
  return j;
}

NuqCodebook codebook_from_json(const Json& j) {
  return guarded("codebook json", [&] {
    const std::string kind = j.at("tensor_kind").get<std::string>();
    require(kind == "key" || kind == "value", ErrorKind::kMalformed, "codebook json: tensor_kind must be key or value");
    NuqCodebook cb(j.at("bits").get<int>(), j.at("centroids").get<std::vector<float>>());
    const Json& q = j.at("qnorm");
    if (q.is_null()) return cb;
    QNormStats st{q.at("mu1").get<double>(), q.at("sigma1").get<double>(), q.at("mu2").get<double>(),
                  q.at("sigma2").get<double>()};
    return apply_qnorm(cb, st);
  });
}

Json key_quantizer_to_json(const KeyQuantizer& kq, std::int64_t layer_id) {
  Json j;
  j["codebook"] = codebook_to_json(kq.codebook, layer_id, "key");
  j["head_dim"] = kq.rope.head_dim;
  j["theta_base"] = kq.rope.theta_base;
  Json lo = Json::array(), hi = Json::array(), scale = Json::array(), offset = Json::array();
  for (std::size_t c = 0; c < kq.channels(); ++c) {
    lo.push_back(kq.thresholds[c].lo);
    hi.push_back(kq.thresholds[c].hi);
    scale.push_back(kq.affine[c].scale);
    offset.push_back(kq.affine[c].offset);
  }
  j["lo"] = lo;
  j["hi"] = hi;
  j["scale"] = scale;
  j["offset"] = offset;
  return j;
}

KeyQuantizer key_quantizer_from_json(const Json& j) {
  return guarded("key quantizer json", [&] {
    KeyQuantizer kq;
    kq.codebook = codebook_from_json(j.at("codebook"));
    kq.rope.head_dim = j.at("head_dim").get<std::size_t>();
    kq.rope.theta_base = j.at("theta_base").get<double>();
    kq.rope.validate();
    const auto lo = j.at("lo").get<std::vector<float>>();
    const auto hi = j.at("hi").get<std::vector<float>>();
    const auto scale = j.at("scale").get<std::vector<float>>();
    const auto offset = j.at("offset").get<std::vector<float>>();
    require(lo.size() == hi.size() && lo.size() == scale.size() && lo.size() == offset.size() && !lo.empty(),
            ErrorKind::kMalformed, "key quantizer json: per-channel arrays differ in length");
    for (std::size_t c = 0; c < lo.size(); ++c) {
      require(lo[c] <= hi[c] && scale[c] > 0.0f, ErrorKind::kMalformed, "key quantizer json: bad channel range");
      kq.thresholds.push_back({lo[c], hi[c]});
      kq.affine.push_back({scale[c], offset[c], lo[c] == hi[c]});
    }
    return kq;
  });
}

Json value_quantizer_to_json(const ValueQuantizer& vq, std::int64_t layer_id) {
  Json j;
  j["codebook"] = codebook_to_json(vq.codebook, layer_id, "value");
  j["outlier_fraction"] = vq.outlier_fraction;
  j["outlier_rule"] = rule_name(vq.outlier_rule);
  if (vq.matrix_threshold) {
    j["matrix_threshold"] = {vq.matrix_threshold->lo, vq.matrix_threshold->hi};
  } else {
    j["matrix_threshold"] = nullptr;
  }
  return j;
}

ValueQuantizer value_quantizer_from_json(const Json& j) {
  return guarded("value quantizer json", [&] {
    ValueQuantizer vq;
    vq.codebook = codebook_from_json(j.at("codebook"));
    vq.outlier_fraction = j.at("outlier_fraction").get<double>();
    require(vq.outlier_fraction >= 0.0 && vq.outlier_fraction < 0.5, ErrorKind::kMalformed,
            "value quantizer json: outlier_fraction out of range");
    vq.outlier_rule = rule_from(j.at("outlier_rule").get<std::string>());
    const Json& m = j.at("matrix_threshold");
    if (!m.is_null()) {
      const auto p = m.get<std::vector<float>>();
      require(p.size() == 2 && p[0] <= p[1], ErrorKind::kMalformed, "value quantizer json: bad matrix_threshold");
      vq.matrix_threshold = ChannelRange{p[0], p[1]};
    }
    return vq;
  });
}

Json bundle_to_json(const QuantizerBundle& b) {
  Json j;
  j["format"] = kBundleFormat;
  j["version"] = kBundleVersion;
  j["bits"] = b.bits;
  j["outlier_fraction"] = b.outlier_fraction;
  j["qnorm"] = b.qnorm;
  Json layers = Json::array();
  for (const auto& l : b.layers)
    layers.push_back({{"layer_id", l.layer_id},
                      {"key", key_quantizer_to_json(l.key, l.layer_id)},
                      {"value", value_quantizer_to_json(l.value, l.layer_id)}});
  j["layers"] = layers;
  return j;
}

QuantizerBundle bundle_from_json(const Json& j) {
  return guarded("bundle json", [&] {
    require(j.at("format").get<std::string>() == kBundleFormat, ErrorKind::kMalformed, "bundle json: unknown format");
    if (j.at("version").get<int>() != kBundleVersion) fail(ErrorKind::kVersionMismatch, "bundle json: unsupported version");
    QuantizerBundle b;
    b.bits = j.at("bits").get<int>();
    b.outlier_fraction = j.at("outlier_fraction").get<double>();
    b.qnorm = j.at("qnorm").get<bool>();
    for (const auto& l : j.at("layers")) {
      LayerQuantizers lq;
      lq.layer_id = l.at("layer_id").get<std::int64_t>();
      lq.key = key_quantizer_from_json(l.at("key"));
      lq.value = value_quantizer_from_json(l.at("value"));
      require(b.layers.empty() || b.layers.back().layer_id < lq.layer_id, ErrorKind::kMalformed,
              "bundle json: layer ids must be ascending");
      b.layers.push_back(std::move(lq));
    }
    return b;
  });
}

void save_bundle(const QuantizerBundle& b, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out << bundle_to_json(b).dump(2) << '\n';
  if (!out) fail(ErrorKind::kIo, "write failed: " + path.string());
}

QuantizerBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const Json j = guarded("bundle json", [&] { return Json::parse(ss.str()); });
  return bundle_from_json(j);
}

}  // namespace kvq
