#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace kvq {

// Dense row-major f32 array. The universal payload for calibration
// activations, gradients and simulator dumps.
struct Tensor {
  std::vector<std::uint64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::uint64_t> shape, std::vector<float> data);

  static Tensor zeros(std::vector<std::uint64_t> shape);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return static_cast<std::size_t>(shape.at(i)); }

  // Row access for rank-2 tensors.
  std::span<float> row(std::size_t r);
  std::span<const float> row(std::size_t r) const;
  float& at(std::size_t r, std::size_t c) { return data[r * dim(1) + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * dim(1) + c]; }

  bool operator==(const Tensor&) const = default;
};

// Product of dims; throws kMalformed on 64-bit overflow.
std::uint64_t element_count(std::span<const std::uint64_t> shape);

// KVQT on-disk format, little-endian:
//   "KVQT" | u32 version=1 | u32 dtype=0 (f32) | u32 ndim | ndim x u64 dims | f32 payload
inline constexpr std::uint32_t kKvqtVersion = 1;
inline constexpr std::uint32_t kKvqtDtypeF32 = 0;

Tensor read_tensor(const std::filesystem::path& path);
void write_tensor(const Tensor& t, const std::filesystem::path& path);

// Calibration activations for one layer. Keys are pre-RoPE, [tokens, channels]
// per sample; gradients mirror the activation shapes (may be empty when the
// caller runs unweighted).
struct CalibrationSet {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  std::vector<Tensor> grads_keys;
  std::vector<Tensor> grads_values;

  // Checks sample count >= 1, rank-2 activations, matching K/V shapes and,
  // when present, gradient shapes equal to their activations.
  void validate() const;
  bool has_grads() const { return !grads_keys.empty(); }
  std::size_t channels() const { return keys.front().dim(1); }
};

}  // namespace kvq
