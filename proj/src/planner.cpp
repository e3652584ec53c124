#include "kvq/planner.hpp"

#include <cmath>
#include <limits>
#include <regex>

#include "kvq/error.hpp"

namespace kvq {

namespace {

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  const unsigned __int128 p = static_cast<unsigned __int128>(a) * b;
  require(p <= std::numeric_limits<std::uint64_t>::max(), ErrorKind::kOutOfRange, "plan: element count overflows");
  return static_cast<std::uint64_t>(p);
}

constexpr double kAffineHalf = 16.0;
constexpr double kSparseEntryBits = 32.0;
constexpr double kPointerBits = 32.0;

}  // namespace

void PlanConfig::validate() const {
  require(n_layers > 0 && n_heads > 0 && head_dim > 0 && batch > 0 && seq_len > 0, ErrorKind::kInvalidArgument,
          "plan: shape fields must be positive");
  require(outlier_fraction >= 0.0 && outlier_fraction < 0.5, ErrorKind::kInvalidArgument,
          "plan: outlier fraction must be in [0, 0.5)");
  if (scheme == Scheme::kFp16) {
    require(bits == 16 && outlier_fraction == 0.0, ErrorKind::kInvalidArgument, "plan: fp16 takes no bits or outliers");
  } else {
    require(bits >= 1 && bits <= 8, ErrorKind::kInvalidArgument, "plan: bits must be in [1, 8]");
  }
}

std::uint64_t kv_element_count(const PlanConfig& cfg) {
  cfg.validate();
  std::uint64_t n = 2;
  for (auto f : {cfg.n_layers, cfg.n_heads, cfg.head_dim, cfg.batch, cfg.seq_len}) n = checked_mul(n, f);
  return n;
}

std::uint64_t fp16_kv_bytes(const PlanConfig& cfg) { return checked_mul(kv_element_count(cfg), 2); }

double avg_bits(const PlanConfig& cfg) {
  cfg.validate();
  if (cfg.scheme == Scheme::kFp16) return 16.0;
  const double bits = cfg.bits;
  const double hidden = static_cast<double>(cfg.n_heads) * static_cast<double>(cfg.head_dim);
  const double l = static_cast<double>(cfg.seq_len);
  const double affine = cfg.scheme == Scheme::kNuq ? 2.0 * kAffineHalf : kAffineHalf + bits;
  double sparse = 0.0;
  if (cfg.outlier_fraction > 0.0) sparse = cfg.outlier_fraction * kSparseEntryBits + kPointerBits / hidden;
  const double key = bits + affine / l + sparse;
  const double value = bits + affine / hidden + sparse;
  return 0.5 * (key + value);
}

double compression_ratio(const PlanConfig& cfg) { return 16.0 / avg_bits(cfg); }

PlanReport plan(const PlanConfig& cfg) {
  PlanReport r;
  r.fp16_bytes = fp16_kv_bytes(cfg);
  r.avg_bits_per_element = avg_bits(cfg);
  r.quant_bytes = static_cast<double>(kv_element_count(cfg)) * r.avg_bits_per_element / 8.0;
  r.compression_ratio = static_cast<double>(r.fp16_bytes) / r.quant_bytes;
  return r;
}

void apply_scheme_name(const std::string& name, PlanConfig& cfg) {
  if (name == "fp16") {
    cfg.scheme = Scheme::kFp16;
    cfg.bits = 16;
    cfg.outlier_fraction = 0.0;
    return;
  }
  static const std::regex re(R"((nuq|int)([1-8])(?:-([0-9]+(?:\.[0-9]+)?)%)?)");
  std::smatch m;
  if (!std::regex_match(name, m, re)) fail(ErrorKind::kInvalidArgument, "unknown scheme '" + name + "'");
  cfg.scheme = m[1] == "nuq" ? Scheme::kNuq : Scheme::kIntUniform;
  cfg.bits = std::stoi(m[2]);
  cfg.outlier_fraction = m[3].matched ? std::stod(m[3]) / 100.0 : 0.0;
  cfg.validate();
}

}  // namespace kvq
