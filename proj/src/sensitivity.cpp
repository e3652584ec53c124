#include "kvq/sensitivity.hpp"

#include <algorithm>
#include <numeric>

#include "kvq/error.hpp"

namespace kvq {

FisherDiag fisher_diag(std::span<const Tensor> grads) {
  require(!grads.empty(), ErrorKind::kInvalidArgument, "fisher_diag: no gradient samples");
  FisherDiag f{Tensor::zeros(grads.front().shape)};
  std::vector<double> acc(f.weights.numel(), 0.0);
  for (const auto& g : grads) {
    require(g.shape == f.weights.shape, ErrorKind::kShapeMismatch, "fisher_diag: gradient shapes differ");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(g.data[i]) * g.data[i];
  }
  std::transform(acc.begin(), acc.end(), f.weights.data.begin(),
                 [](double v) { return static_cast<float>(v); });
  return f;
}

double layer_sensitivity(const Tensor& a, const Tensor& qa, const FisherDiag& f) {
  require(a.shape == qa.shape && a.shape == f.weights.shape, ErrorKind::kShapeMismatch,
          "layer_sensitivity: activation, quantized activation and Fisher shapes differ");
  double omega = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double e = static_cast<double>(a.data[i]) - qa.data[i];
    omega += static_cast<double>(f.weights.data[i]) * e * e;
  }
  return omega;
}

std::vector<std::size_t> assign_mixed_precision(std::span<const LayerSensitivity> sens,
                                                std::size_t demote_count) {
  require(demote_count <= sens.size(), ErrorKind::kOutOfRange,
          "assign_mixed_precision: demote_count exceeds layer count");
  std::vector<std::size_t> order(sens.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sens[a].omega != sens[b].omega) return sens[a].omega < sens[b].omega;
    return sens[a].layer_id < sens[b].layer_id;
  });
  std::vector<std::size_t> ids;
  ids.reserve(demote_count);
  for (std::size_t i = 0; i < demote_count; ++i) ids.push_back(sens[order[i]].layer_id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace kvq
