#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kvq/tensor.hpp"

namespace kvq {

// Diagonal Fisher approximation: sum over samples of g (.) g. Same shape as
// one activation sample, nonnegative everywhere.
struct FisherDiag {
  Tensor weights;
};

FisherDiag fisher_diag(std::span<const Tensor> grads);

// Omega = sum_i F_ii (A - Q(A))_i^2.
double layer_sensitivity(const Tensor& a, const Tensor& qa, const FisherDiag& f);

struct LayerSensitivity {
  std::size_t layer_id = 0;
  double omega = 0.0;
};

// Picks the `demote_count` least sensitive layers (smallest omega, ties to
// the lower layer id). Returned ids are ascending.
std::vector<std::size_t> assign_mixed_precision(std::span<const LayerSensitivity> sens,
                                                std::size_t demote_count);

}  // namespace kvq
