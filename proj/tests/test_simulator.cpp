#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "kvq/rope.hpp"
#include "kvq/simulator.hpp"
#include "test_util.hpp"

using namespace kvq;
using kvq::testing::error_kind_of;

namespace {

ToyDims small_dims() {
  ToyDims d;
  d.n_layers = 2;
  d.n_heads = 2;
  d.head_dim = 8;
  d.tokens = 48;
  d.calib_samples = 8;
  d.eval_samples = 2;
  return d;
}

double column_std(const std::vector<Tensor>& xs, std::size_t c) {
  double s = 0.0, s2 = 0.0, n = 0.0;
  for (const auto& x : xs)
    for (std::size_t t = 0; t < x.dim(0); ++t) {
      s += x.at(t, c);
      s2 += static_cast<double>(x.at(t, c)) * x.at(t, c);
      n += 1.0;
    }
  const double m = s / n;
  return std::sqrt(s2 / n - m * m);
}

SimConfig sim_bits(int bits) {
  SimConfig c;
  c.quant.bits = bits;
  c.quant.outlier_fraction = 0.01;
  return c;
}

}  // namespace

TEST(Simulator, UnitOutlierScaleIsPlainGaussian) {
  const KeyProfile p = key_profile(16, 2, 1.0, 3);
  for (std::size_t c = 0; c < 16; ++c) {
    EXPECT_EQ(p.mean[c], 0.0);
    EXPECT_EQ(p.std[c], 1.0);
  }
}

TEST(Simulator, PlantedChannelsHaveRequestedScale) {
  ToyDims d = small_dims();
  d.calib_samples = 16;
  const CalibrationSet set = gen_synthetic_kv(d, 2, 50.0, 9);
  const auto planted = pick_outlier_channels(d.channels(), 2, 9);
  ASSERT_EQ(planted.size(), 2u);
  double normal_std = 0.0;
  std::size_t normal_n = 0;
  for (std::size_t c = 0; c < d.channels(); ++c)
    if (c != planted[0] && c != planted[1]) {
      normal_std += column_std(set.keys, c);
      ++normal_n;
    }
  normal_std /= static_cast<double>(normal_n);
  for (auto c : planted) {
    const double ratio = column_std(set.keys, c) / normal_std;
    EXPECT_GE(ratio, 40.0);
    EXPECT_LE(ratio, 60.0);
  }
}

TEST(Simulator, Deterministic) {
  const ToyModel m = make_toy_model(small_dims(), 5);
  const ToyData a = make_toy_data(m, false), b = make_toy_data(m, false);
  EXPECT_EQ(a.layers[1].calib.keys, b.layers[1].calib.keys);
  EXPECT_EQ(a.layers[0].eval_values, b.layers[0].eval_values);
  EXPECT_EQ(decode_compare(m, a, sim_bits(3), 8), decode_compare(m, b, sim_bits(3), 8));
}

TEST(Simulator, PassthroughHasNoError) {
  const ToyModel m = make_toy_model(small_dims(), 6);
  const ToyData data = make_toy_data(m, false);
  const auto r = decode_compare(m, data, sim_bits(16), 8);
  EXPECT_EQ(r.step_errors.size(), 2u * 8u);
  EXPECT_EQ(r.mean_step_error, 0.0);
  EXPECT_EQ(r.max_abs_error, 0.0);
}

TEST(Simulator, ErrorGrowsAsBitsShrink) {
  const ToyModel m = make_toy_model(small_dims(), 7);
  const ToyData data = make_toy_data(m, false);
  const double e4 = decode_compare(m, data, sim_bits(4), 8).mean_step_error;
  const double e3 = decode_compare(m, data, sim_bits(3), 8).mean_step_error;
  const double e2 = decode_compare(m, data, sim_bits(2), 8).mean_step_error;
  EXPECT_GT(e4, 0.0);
  EXPECT_LT(e4, e3);
  EXPECT_LT(e3, e2);
}

TEST(Simulator, CentralDifference) {
  EXPECT_NEAR(central_difference([](double x) { return x * x; }, 3.0, 1e-3), 6.0, 1e-9);
  EXPECT_EQ(error_kind_of([] { central_difference([](double x) { return x; }, 0.0, 0.0); }),
            ErrorKind::kInvalidArgument);
}

TEST(Simulator, ZeroValuesGiveZeroKeyGradients) {
  ToyDims d = small_dims();
  d.tokens = 6;
  d.calib_samples = 1;
  const ToyModel m = make_toy_model(d, 8);
  CalibrationSet set = gen_synthetic_kv(d, 2, 20.0, 1);
  for (auto& x : set.values[0].data) x = 0.0f;
  const KVGrads g = finite_diff_grads(m, 0, set, 1e-3);
  for (float x : g.keys[0].data) EXPECT_EQ(x, 0.0f);
  for (float x : g.values[0].data) EXPECT_EQ(x, 0.0f);
}

// Perturb one element, re-run the full loss: the cached-state shortcut in
// finite_diff_grads must agree with it.
TEST(Simulator, GradientsMatchDirectPerturbation) {
  ToyDims d;
  d.n_layers = 1;
  d.n_heads = 1;
  d.head_dim = 2;
  d.tokens = 5;
  d.calib_samples = 1;
  const ToyModel m = make_toy_model(d, 4, 0, 1.0);
  const CalibrationSet set = gen_synthetic_kv(d, 0, 1.0, 2);
  const double eps = 1e-3;
  const KVGrads g = finite_diff_grads(m, 0, set, eps);
  for (std::size_t t = 0; t < d.tokens; ++t) {
    for (std::size_t c = 0; c < 2; ++c) {
      const auto perturbed = [&](bool key, double x) {
        Tensor k = set.keys[0], v = set.values[0];
        (key ? k : v).at(t, c) = static_cast<float>(x);
        return toy_loss(m, 0, k, v, 0);
      };
      const double dk = central_difference([&](double x) { return perturbed(true, x); }, set.keys[0].at(t, c), eps);
      const double dv =
          central_difference([&](double x) { return perturbed(false, x); }, set.values[0].at(t, c), eps);
      EXPECT_NEAR(g.keys[0].at(t, c), dk, 1e-4 * std::max(1.0, std::abs(dk))) << t << "," << c;
      EXPECT_NEAR(g.values[0].at(t, c), dv, 1e-4 * std::max(1.0, std::abs(dv))) << t << "," << c;
    }
  }
}

// Values enter the loss linearly through o_m = sum_t a_mt v_t, so
// dL/dv_tj = gain^2 * sum_{m >= t} 2 a_mt o_mj with a the causal softmax.
TEST(Simulator, ValueGradientsMatchAnalytic) {
  ToyDims d;
  d.n_layers = 1;
  d.n_heads = 1;
  d.head_dim = 2;
  d.tokens = 6;
  d.calib_samples = 1;
  const ToyModel m = make_toy_model(d, 12, 0, 1.0);
  const CalibrationSet set = gen_synthetic_kv(d, 0, 1.0, 5);
  const KVGrads g = finite_diff_grads(m, 0, set, 1e-3);
  const Tensor& k = set.keys[0];
  const Tensor& v = set.values[0];
  const std::size_t T = d.tokens;
  const double g2 = m.layer_gain[0] * m.layer_gain[0];
  std::vector<std::vector<double>> a(T, std::vector<double>(T, 0.0)), o(T, std::vector<double>(2, 0.0));
  for (std::size_t qm = 0; qm < T; ++qm) {
    const auto q = toy_query(m, 0, 0, qm);
    double z = 0.0;
    for (std::size_t t = 0; t <= qm; ++t) {
      const auto kr = rope_apply(m.rope, k.row(t), t);
      a[qm][t] = std::exp(m.logit_scale[0][0] * (static_cast<double>(q[0]) * kr[0] + static_cast<double>(q[1]) * kr[1]));
      z += a[qm][t];
    }
    for (std::size_t t = 0; t <= qm; ++t) {
      a[qm][t] /= z;
      for (std::size_t j = 0; j < 2; ++j) o[qm][j] += a[qm][t] * v.at(t, j);
    }
  }
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < 2; ++j) {
      double want = 0.0;
      for (std::size_t qm = t; qm < T; ++qm) want += g2 * 2.0 * a[qm][t] * o[qm][j];
      EXPECT_NEAR(g.values[0].at(t, j), want, 1e-4 * std::max(1.0, std::abs(want))) << t << "," << j;
    }
}

TEST(Simulator, SensitivitiesPerLayer) {
  ToyDims d = small_dims();
  d.tokens = 12;
  d.calib_samples = 2;
  d.eval_samples = 1;
  const ToyModel m = make_toy_model(d, 9);
  const ToyData data = make_toy_data(m, true);
  QuantConfig cfg;
  cfg.bits = 3;
  const auto sens = layer_sensitivities(m, data, cfg);
  ASSERT_EQ(sens.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(sens[l].layer_id, l);
    EXPECT_GT(sens[l].omega, 0.0);
  }
}

TEST(Simulator, RejectsBadDims) {
  ToyDims d = small_dims();
  d.head_dim = 3;
  EXPECT_EQ(error_kind_of([&] { make_toy_model(d, 0); }), ErrorKind::kInvalidArgument);
}
