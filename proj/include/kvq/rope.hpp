#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kvq/tensor.hpp"

namespace kvq {

// Rotary positional embedding over one head of `head_dim` channels.
//
// Channels use the half-split pairing: channel i rotates together with
// channel i + head_dim/2, at frequency theta_base^(-2i/head_dim). Angles are
// evaluated in double precision and the rotation is applied in float.
struct RopeParams {
  std::size_t head_dim = 0;
  double theta_base = 10000.0;

  void validate() const;
  double frequency(std::size_t pair) const;
  bool operator==(const RopeParams&) const = default;
};

// Dense [d, d] rotation for position n, built from 2x2 blocks and permuted
// into the half-split channel layout. Orthogonal; identity at n = 0.
Tensor rope_matrix(const RopeParams& params, std::uint64_t n);

// out = x * cos + rotate_half(x) * sin, with rotate_half(x) = [-x_hi, x_lo].
std::vector<float> rope_apply(const RopeParams& params, std::span<const float> x, std::uint64_t n);
void rope_apply_inplace(const RopeParams& params, std::span<float> x, std::uint64_t n);

// Applies R_n^T (rotation by -n). Used to move a query into a cached key's
// pre-RoPE frame: q . (R_n k) == (R_n^T q) . k.
void rope_apply_inverse_inplace(const RopeParams& params, std::span<float> x, std::uint64_t n);

// Rotates every head_dim-wide segment of a multi-head vector.
void rope_apply_heads_inplace(const RopeParams& params, std::span<float> x, std::uint64_t n);

// cos/sin of n * theta_i for the head_dim/2 frequencies, in double.
struct RopeAngles {
  std::vector<double> cos;
  std::vector<double> sin;
};
RopeAngles rope_angles(const RopeParams& params, std::uint64_t n);

}  // namespace kvq
