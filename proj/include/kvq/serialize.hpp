#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "kvq/kvcache.hpp"

namespace kvq {

using Json = nlohmann::json;

// {layer_id, tensor_kind, bits, centroids, qnorm}. centroids are the raw
// signposts; the decode LUT is rebuilt from qnorm on load.
Json codebook_to_json(const NuqCodebook& cb, std::int64_t layer_id, const std::string& tensor_kind);
NuqCodebook codebook_from_json(const Json& j);

Json key_quantizer_to_json(const KeyQuantizer& kq, std::int64_t layer_id);
KeyQuantizer key_quantizer_from_json(const Json& j);
Json value_quantizer_to_json(const ValueQuantizer& vq, std::int64_t layer_id);
ValueQuantizer value_quantizer_from_json(const Json& j);

struct LayerQuantizers {
  std::int64_t layer_id = 0;
  KeyQuantizer key;
  ValueQuantizer value;
  bool operator==(const LayerQuantizers&) const = default;
};

struct QuantizerBundle {
  int bits = 4;
  double outlier_fraction = 0.0;
  bool qnorm = false;
  std::vector<LayerQuantizers> layers;  // ascending layer_id
  bool operator==(const QuantizerBundle&) const = default;
};

Json bundle_to_json(const QuantizerBundle& b);
QuantizerBundle bundle_from_json(const Json& j);

// Pretty-printed with a trailing newline; byte-identical for equal bundles.
void save_bundle(const QuantizerBundle& b, const std::filesystem::path& path);
QuantizerBundle load_bundle(const std::filesystem::path& path);

}  // namespace kvq
