#include "kvq/rope.hpp"

#include <cmath>

#include "kvq/error.hpp"

namespace kvq {

void RopeParams::validate() const {
  require(head_dim >= 2 && head_dim % 2 == 0, ErrorKind::kInvalidArgument,
          "rope head_dim must be even and >= 2");
  require(theta_base > 0.0 && std::isfinite(theta_base), ErrorKind::kInvalidArgument,
          "rope theta_base must be positive");
}

double RopeParams::frequency(std::size_t pair) const {
  return std::pow(theta_base, -2.0 * static_cast<double>(pair) / static_cast<double>(head_dim));
}

RopeAngles rope_angles(const RopeParams& params, std::uint64_t n) {
  params.validate();
  const std::size_t half = params.head_dim / 2;
  RopeAngles a;
  a.cos.resize(half);
  a.sin.resize(half);
  for (std::size_t i = 0; i < half; ++i) {
    const double angle = static_cast<double>(n) * params.frequency(i);
    a.cos[i] = std::cos(angle);
    a.sin[i] = std::sin(angle);
  }
  return a;
}

Tensor rope_matrix(const RopeParams& params, std::uint64_t n) {
  params.validate();
  const std::size_t d = params.head_dim;
  const std::size_t half = d / 2;

  // Block-diagonal form in the interleaved basis (2i, 2i+1).
  std::vector<double> block(d * d, 0.0);
  for (std::size_t i = 0; i < half; ++i) {
    const double angle = static_cast<double>(n) * params.frequency(i);
    const double c = std::cos(angle), s = std::sin(angle);
    block[(2 * i) * d + 2 * i] = c;
    block[(2 * i) * d + 2 * i + 1] = -s;
    block[(2 * i + 1) * d + 2 * i] = s;
    block[(2 * i + 1) * d + 2 * i + 1] = c;
  }

  // P maps interleaved slot 2i -> channel i and 2i+1 -> channel i + half;
  // the half-split matrix is P * block * P^T.
  auto to_channel = [half](std::size_t slot) { return slot % 2 == 0 ? slot / 2 : slot / 2 + half; };
  Tensor m = Tensor::zeros({d, d});
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c)
      m.at(to_channel(r), to_channel(c)) = static_cast<float>(block[r * d + c]);
  return m;
}

namespace {

void rotate(const RopeParams& params, std::span<float> x, std::uint64_t n, double sign) {
  params.validate();
  require(x.size() == params.head_dim, ErrorKind::kShapeMismatch, "rope: vector length != head_dim");
  const std::size_t half = params.head_dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double angle = static_cast<double>(n) * params.frequency(i);
    const auto c = static_cast<float>(std::cos(angle));
    const auto s = static_cast<float>(sign * std::sin(angle));
    const float lo = x[i];
    const float hi = x[i + half];
    x[i] = lo * c - hi * s;
    x[i + half] = hi * c + lo * s;
  }
}

}  // namespace

void rope_apply_inplace(const RopeParams& params, std::span<float> x, std::uint64_t n) {
  rotate(params, x, n, 1.0);
}

void rope_apply_inverse_inplace(const RopeParams& params, std::span<float> x, std::uint64_t n) {
  rotate(params, x, n, -1.0);
}

std::vector<float> rope_apply(const RopeParams& params, std::span<const float> x, std::uint64_t n) {
  std::vector<float> out(x.begin(), x.end());
  rope_apply_inplace(params, out, n);
  return out;
}

void rope_apply_heads_inplace(const RopeParams& params, std::span<float> x, std::uint64_t n) {
  params.validate();
  require(x.size() % params.head_dim == 0, ErrorKind::kShapeMismatch,
          "rope: vector length is not a multiple of head_dim");
  for (std::size_t off = 0; off < x.size(); off += params.head_dim)
    rope_apply_inplace(params, x.subspan(off, params.head_dim), n);
}

}  // namespace kvq
