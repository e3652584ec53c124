#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kvq {

// fp16: no quantization. int-uniform: uniform integer codes whose affine is a
// bits-wide integer zero-point plus a 16-bit scale. nuq: codebook codes with
// a 16-bit zero-point and a 16-bit scale.
enum class Scheme { kFp16, kIntUniform, kNuq };

struct PlanConfig {
  std::uint64_t n_layers = 1;
  std::uint64_t n_heads = 1;
  std::uint64_t head_dim = 1;
  std::uint64_t batch = 1;
  std::uint64_t seq_len = 1;
  int bits = 16;
  double outlier_fraction = 0.0;
  Scheme scheme = Scheme::kFp16;

  void validate() const;
};

struct PlanReport {
  std::uint64_t fp16_bytes = 0;
  double quant_bytes = 0.0;
  double avg_bits_per_element = 16.0;
  double compression_ratio = 1.0;
};

// 2 * n * h * d * b * l elements at 2 bytes each; kOutOfRange on overflow.
std::uint64_t kv_element_count(const PlanConfig& cfg);
std::uint64_t fp16_kv_bytes(const PlanConfig& cfg);

// Average stored bits per cached element, mean of the Key and Value halves.
// Both halves store one vector per token of length n_heads * head_dim and
// pay for a 32-bit sparse pointer per token when outliers are enabled; the
// Key affine is per channel and amortizes over seq_len, the Value affine is
// per token. Each outlier costs a 16-bit value and a 16-bit index.
double avg_bits(const PlanConfig& cfg);
double compression_ratio(const PlanConfig& cfg);
PlanReport plan(const PlanConfig& cfg);

// "fp16", "nuq3", "nuq4-1%", "int2-0.5%", ...; fills scheme, bits and
// outlier_fraction of cfg.
void apply_scheme_name(const std::string& name, PlanConfig& cfg);

}  // namespace kvq
