#include <gtest/gtest.h>

#include "kvq/sensitivity.hpp"
#include "test_util.hpp"

using namespace kvq;
using kvq::testing::error_kind_of;

namespace {

std::vector<LayerSensitivity> omegas(std::vector<double> v) {
  std::vector<LayerSensitivity> s;
  for (std::size_t i = 0; i < v.size(); ++i) s.push_back({i, v[i]});
  return s;
}

}  // namespace

TEST(FisherDiag, SumsSquaresOverSamples) {
  const std::vector<Tensor> g{Tensor({2}, {1, 2}), Tensor({2}, {3, -1})};
  EXPECT_EQ(fisher_diag(g).weights.data, (std::vector<float>{10, 5}));
}

TEST(FisherDiag, ZeroGradient) {
  const std::vector<Tensor> g{Tensor({3}, {0, 0, 0})};
  EXPECT_EQ(fisher_diag(g).weights.data, (std::vector<float>{0, 0, 0}));
}

TEST(FisherDiag, SingleSample) {
  const std::vector<Tensor> g{Tensor({1}, {2})};
  EXPECT_EQ(fisher_diag(g).weights.data, (std::vector<float>{4}));
}

TEST(FisherDiag, KeepsShapeAndRejectsMismatch) {
  const std::vector<Tensor> g{Tensor({2, 1}, {1, -1})};
  EXPECT_EQ(fisher_diag(g).weights.shape, (std::vector<std::uint64_t>{2, 1}));
  const std::vector<Tensor> bad{Tensor({2}, {1, 1}), Tensor({3}, {1, 1, 1})};
  EXPECT_EQ(error_kind_of([&] { fisher_diag(bad); }), ErrorKind::kShapeMismatch);
  EXPECT_EQ(error_kind_of([] { fisher_diag({}); }), ErrorKind::kInvalidArgument);
}

TEST(LayerSensitivity, HandExample) {
  const FisherDiag f{Tensor({2}, {10, 5})};
  EXPECT_DOUBLE_EQ(layer_sensitivity(Tensor({2}, {1, 2}), Tensor({2}, {1, 1.5f}), f), 1.25);
}

TEST(LayerSensitivity, ZeroError) {
  const FisherDiag f{Tensor({2}, {10, 5})};
  const Tensor a({2}, {3, -4});
  EXPECT_EQ(layer_sensitivity(a, a, f), 0.0);
}

TEST(LayerSensitivity, ZeroWeights) {
  const FisherDiag f{Tensor({2}, {0, 0})};
  EXPECT_EQ(layer_sensitivity(Tensor({2}, {1, 2}), Tensor({2}, {-7, 9}), f), 0.0);
}

TEST(LayerSensitivity, ShapeMismatch) {
  const FisherDiag f{Tensor({2}, {1, 1})};
  EXPECT_EQ(error_kind_of([&] { layer_sensitivity(Tensor({3}, {1, 2, 3}), Tensor({3}, {1, 2, 3}), f); }),
            ErrorKind::kShapeMismatch);
}

TEST(MixedPrecision, PicksSmallestOmega) {
  EXPECT_EQ(assign_mixed_precision(omegas({5, 1, 3}), 1), (std::vector<std::size_t>{1}));
}

TEST(MixedPrecision, NothingToDemote) { EXPECT_TRUE(assign_mixed_precision(omegas({5, 1, 3}), 0).empty()); }

TEST(MixedPrecision, TiesGoToLowerIndex) {
  EXPECT_EQ(assign_mixed_precision(omegas({2, 2, 2}), 2), (std::vector<std::size_t>{0, 1}));
}

TEST(MixedPrecision, ReturnsAscendingIds) {
  EXPECT_EQ(assign_mixed_precision(omegas({0.5, 9, 0.1, 4, 0.3}), 3), (std::vector<std::size_t>{0, 2, 4}));
}

TEST(MixedPrecision, UsesLayerIdNotPosition) {
  const std::vector<LayerSensitivity> s{{7, 1.0}, {3, 2.0}, {5, 0.5}};
  EXPECT_EQ(assign_mixed_precision(s, 2), (std::vector<std::size_t>{5, 7}));
}

TEST(MixedPrecision, CountAboveLayersIsError) {
  EXPECT_EQ(error_kind_of([] { assign_mixed_precision(omegas({1, 2}), 3); }), ErrorKind::kOutOfRange);
}
