#include <cstdint>
#include <limits>

#include <gtest/gtest.h>

#include "kvq/planner.hpp"
#include "test_util.hpp"

using namespace kvq;
using kvq::testing::error_kind_of;

namespace {

PlanConfig llama7b(const std::string& scheme, std::uint64_t seq_len = 131072) {
  PlanConfig c;
  c.n_layers = 32;
  c.n_heads = 32;
  c.head_dim = 128;
  c.seq_len = seq_len;
  apply_scheme_name(scheme, c);
  return c;
}

}  // namespace

TEST(Planner, UnitShapeIsFourBytes) {
  PlanConfig c;
  EXPECT_EQ(kv_element_count(c), 2u);
  EXPECT_EQ(fp16_kv_bytes(c), 4u);
}

TEST(Planner, Llama7bAt128kIs64GiB) {
  EXPECT_EQ(fp16_kv_bytes(llama7b("fp16")), std::uint64_t{1} << 36);
}

TEST(Planner, BytesScaleLinearlyInSeqLen) {
  for (const char* s : {"fp16", "nuq3-1%"}) {
    const auto a = plan(llama7b(s, 4096)), b = plan(llama7b(s, 8192));
    EXPECT_EQ(b.fp16_bytes, 2 * a.fp16_bytes);
  }
  // Key affine amortizes over seq_len, so quantized bytes grow slightly less than 2x.
  const auto a = plan(llama7b("nuq3-1%", 4096)), b = plan(llama7b("nuq3-1%", 8192));
  EXPECT_LT(b.quant_bytes, 2.0 * a.quant_bytes);
  EXPECT_GT(b.quant_bytes, 1.99 * a.quant_bytes);
}

TEST(Planner, AverageBitsRanges) {
  EXPECT_EQ(avg_bits(llama7b("fp16")), 16.0);
  EXPECT_NEAR(avg_bits(llama7b("nuq4")), 4.01, 0.01);
  EXPECT_GE(avg_bits(llama7b("nuq4-1%")), 4.32);
  EXPECT_LE(avg_bits(llama7b("nuq4-1%")), 4.35);
  EXPECT_GE(avg_bits(llama7b("nuq3-1%")), 3.32);
  EXPECT_LE(avg_bits(llama7b("nuq3-1%")), 3.35);
  EXPECT_GE(avg_bits(llama7b("nuq2-1%")), 2.32);
  EXPECT_LE(avg_bits(llama7b("nuq2-1%")), 2.35);
}

TEST(Planner, CompressionRatios) {
  EXPECT_NEAR(compression_ratio(llama7b("nuq4-1%")), 3.7, 0.1);
  EXPECT_NEAR(compression_ratio(llama7b("nuq3-1%")), 4.8, 0.1);
  EXPECT_NEAR(compression_ratio(llama7b("nuq2-1%")), 6.9, 0.1);
  EXPECT_EQ(plan(llama7b("fp16")).compression_ratio, 1.0);
}

TEST(Planner, MatchesBitAccounting) {
  PlanConfig c;
  c.n_heads = 2;
  c.head_dim = 8;
  c.seq_len = 10;
  apply_scheme_name("nuq3-2%", c);
  const double H = 16.0;
  const double sparse = 0.02 * 32.0 + 32.0 / H;
  const double want = 0.5 * ((3.0 + 32.0 / 10.0 + sparse) + (3.0 + 32.0 / H + sparse));
  EXPECT_DOUBLE_EQ(avg_bits(c), want);

  apply_scheme_name("int4", c);
  EXPECT_DOUBLE_EQ(avg_bits(c), 0.5 * ((4.0 + 20.0 / 10.0) + (4.0 + 20.0 / H)));

  const auto r = plan(c);
  EXPECT_DOUBLE_EQ(r.quant_bytes, static_cast<double>(kv_element_count(c)) * r.avg_bits_per_element / 8.0);
}

TEST(Planner, SchemeNames) {
  PlanConfig c;
  apply_scheme_name("int2-0.5%", c);
  EXPECT_EQ(c.scheme, Scheme::kIntUniform);
  EXPECT_EQ(c.bits, 2);
  EXPECT_DOUBLE_EQ(c.outlier_fraction, 0.005);
  apply_scheme_name("nuq4", c);
  EXPECT_EQ(c.scheme, Scheme::kNuq);
  EXPECT_EQ(c.outlier_fraction, 0.0);
  for (const char* bad : {"nuq", "nuq9", "fp32", "nuq3-%", "nuq3-60%", ""})
    EXPECT_EQ(error_kind_of([&] { apply_scheme_name(bad, c); }), ErrorKind::kInvalidArgument) << bad;
}

TEST(Planner, OverflowIsOutOfRange) {
  PlanConfig c;
  c.n_layers = std::numeric_limits<std::uint64_t>::max() / 2;
  c.seq_len = 4;
  EXPECT_EQ(error_kind_of([&] { kv_element_count(c); }), ErrorKind::kOutOfRange);
}

TEST(Planner, ZeroDimensionRejected) {
  PlanConfig c;
  c.seq_len = 0;
  EXPECT_EQ(error_kind_of([&] { plan(c); }), ErrorKind::kInvalidArgument);
}
