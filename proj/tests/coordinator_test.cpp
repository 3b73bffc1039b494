#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "coca/coordinator/coordinator.hpp"
#include "test_util.hpp"

using namespace coca;
using namespace coca::test;

namespace {

void fill(Tensor<double>& t, double v) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), v); }

template <class M>
void randomize(M& m, std::uint64_t seed, double stddev = 0.3) {
  Rng rng(seed);
  m.visit("", [&](const std::string&, Tensor<double>& t) {
    for (auto& v : t.mutable_data()) v = rng.normal() * stddev;
  });
}

T64 constant_map(std::size_t b, std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(b * c * h * w);
  for (std::size_t i = 0; i < b * c; ++i) {
    const double x = rng.normal();
    std::fill_n(v.begin() + static_cast<std::ptrdiff_t>(i * h * w), h * w, x);
  }
  return t64({b, c, h, w}, v);
}

}  // namespace

// ---------------------------------------------------------------------------
// Channel and spatial gates

TEST(SqueezeExcite, ZeroWeightsHalveTheInput) {
  Rng rng(1);
  auto se = SqueezeExcite<double>::make(8, 4, rng);
  fill(se.fc1.weight, 0.0);
  fill(se.fc2.weight, 0.0);
  auto x = random64({2, 8, 3, 3}, 2);
  EXPECT_TRUE(bitwise_equal(se_recalibrate(x, se), scale(x, 0.5)));
}

TEST(SqueezeExcite, NeverAmplifies) {
  Rng rng(3);
  auto se = SqueezeExcite<double>::make(8, 4, rng);
  randomize(se, 4, 2.0);
  auto x = random64({2, 8, 4, 4}, 5, 3.0);
  auto y = se_recalibrate(x, se);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_LE(std::abs(y[i]), std::abs(x[i]));
}

TEST(SqueezeExcite, SymmetricChannelsGetEqualGates) {
  Rng rng(6);
  auto se = SqueezeExcite<double>::make(8, 4, rng);
  randomize(se, 7);
  // make channels 0 and 1 interchangeable: equal fc1 rows, equal fc2 columns and biases
  auto w1 = se.fc1.weight.mutable_data();  // [8, 2]
  for (std::size_t j = 0; j < 2; ++j) w1[1 * 2 + j] = w1[0 * 2 + j];
  auto w2 = se.fc2.weight.mutable_data();  // [2, 8]
  for (std::size_t i = 0; i < 2; ++i) w2[i * 8 + 1] = w2[i * 8 + 0];
  se.fc2.bias.mutable_data()[1] = se.fc2.bias[0];
  // channels 0 and 1 carry the same values in a different spatial order
  auto x = random64({1, 8, 3, 3}, 8);
  auto d = x.vec();
  for (std::size_t p = 0; p < 9; ++p) d[9 + p] = x[8 - p];
  auto g = se.gate(t64(x.shape(), d));
  EXPECT_EQ(g[0], g[1]);
  EXPECT_NE(g[0], g[2]);
}

TEST(SqueezeExcite, RejectsIndivisibleWidth) {
  Rng rng(1);
  EXPECT_THROW(SqueezeExcite<double>::make(6, 4, rng), ConfigError);
}

TEST(SpatialGate, ZeroWeightsHalveTheInput) {
  Rng rng(1);
  auto sa = SpatialGate<double>::make(rng);
  fill(sa.conv.weight, 0.0);
  auto x = random64({2, 4, 5, 5}, 2);
  EXPECT_TRUE(bitwise_equal(spatial_gate(x, sa), scale(x, 0.5)));
}

TEST(SpatialGate, ConstantInputGivesConstantInteriorGate) {
  Rng rng(3);
  auto sa = SpatialGate<double>::make(rng);
  randomize(sa, 4);
  auto x = constant_map(1, 4, 10, 10, 5);
  auto g = sa.gate(x);
  // positions at least 3 cells from every border see no padding
  const double ref = g[3 * 10 + 3];
  for (std::size_t i = 3; i < 7; ++i)
    for (std::size_t j = 3; j < 7; ++j) EXPECT_NEAR(g[i * 10 + j], ref, 1e-15);
  EXPECT_NE(g[0], ref);
}

TEST(SpatialGate, GateStrictlyInsideUnitInterval) {
  Rng rng(6);
  auto sa = SpatialGate<double>::make(rng);
  randomize(sa, 7, 0.5);
  auto g = sa.gate(random64({2, 3, 6, 6}, 8, 3.0));
  for (double v : g.vec()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

// ---------------------------------------------------------------------------
// Generator

TEST(Generator, ZeroFeaturesGiveTheBiasImage) {
  Rng rng(1);
  auto gen = CoordinatorGenerator<double>::make(8, 3, 8, rng);
  randomize(gen, 2);
  auto g = generate_coordinators(Tensor<double>::zeros({2, 8, 4, 4}), gen);
  ASSERT_EQ(g.shape(), (Shape{2, 3, 8}));
  // pooled vector is 0, so the projection sees only its biases
  auto expect = add(matmul(reshape(gelu(gen.proj.fc1.bias), {1, 16}), gen.proj.fc2.weight), gen.proj.fc2.bias);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 24; ++i) EXPECT_NEAR(g[b * 24 + i], expect[i], 1e-15);
}

TEST(Generator, SpatialPermutationInvariantWithConstantSpatialGate) {
  Rng rng(3);
  auto gen = CoordinatorGenerator<double>::make(8, 4, 8, rng);
  randomize(gen, 4);
  fill(gen.sa.conv.weight, 0.0);  // spatial gate is now sigmoid(bias) everywhere
  auto x = random64({1, 8, 4, 4}, 5);
  std::vector<double> d(x.numel());
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t p = 0; p < 16; ++p) d[c * 16 + p] = x[c * 16 + (p * 5 + 3) % 16];
  auto a = generate_coordinators(x, gen);
  auto b = generate_coordinators(t64(x.shape(), d), gen);
  EXPECT_LT(max_abs_diff(a.vec(), b.vec()), 1e-14);
}

TEST(Generator, ConstantMapsIgnoreResolution) {
  Rng rng(6);
  auto gen = CoordinatorGenerator<double>::make(8, 4, 8, rng);
  randomize(gen, 7);
  fill(gen.sa.conv.weight, 0.0);
  auto a = generate_coordinators(constant_map(2, 8, 3, 3, 9), gen);
  auto b = generate_coordinators(constant_map(2, 8, 7, 5, 9), gen);
  EXPECT_LT(max_abs_diff(a.vec(), b.vec()), 1e-14);
}

TEST(Generator, ShapeContractAtFullWidths) {
  for (std::size_t c2 : {96u, 144u}) {
    Rng rng(c2);
    auto gen = CoordinatorGenerator<double>::make(c2, 16, c2, rng);
    auto g = generate_coordinators(random64({2, c2, 7, 7}, 1), gen);
    EXPECT_EQ(g.shape(), (Shape{2, 16, c2}));
  }
}

TEST(Generator, RejectsWrongChannelCount) {
  Rng rng(1);
  auto gen = CoordinatorGenerator<double>::make(8, 4, 8, rng);
  EXPECT_THROW(generate_coordinators(random64({1, 12, 4, 4}, 1), gen), ConfigError);
}

// ---------------------------------------------------------------------------
// Token merging

TEST(TokenMerge, SingleCoordinatorIsValuePlusResidual) {
  Rng rng(1);
  auto m = TokenMerger<double>::make(1, 8, 12, 3, rng);
  randomize(m, 2);
  auto g = random64({2, 1, 8}, 3);
  auto y = token_merge(g, m);
  auto expect = add(m.v(g), m.residual(g));
  EXPECT_LT(max_abs_diff(y.vec(), expect.vec()), 1e-14);
}

TEST(TokenMerge, AttentionPathIgnoresInputOrder) {
  Rng rng(4);
  auto m = TokenMerger<double>::make(4, 8, 12, 2, rng);
  randomize(m, 5);
  auto g = random64({2, 4, 8}, 6);
  const std::vector<std::size_t> perm = {3, 1, 0, 2};
  std::vector<double> d(g.numel());
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < 4; ++k) std::copy_n(g.vec().begin() + (b * 4 + perm[k]) * 8, 8, d.begin() + (b * 4 + k) * 8);
  auto gp = t64(g.shape(), d);
  EXPECT_LT(max_abs_diff(merge_attention(g, m).vec(), merge_attention(gp, m).vec()), 1e-14);
  // the residual path follows the permutation, so the full merge does not
  EXPECT_GT(max_abs_diff(token_merge(g, m).vec(), token_merge(gp, m).vec()), 1e-3);
}

TEST(TokenMerge, ChangesOnlyTheWidth) {
  Rng rng(7);
  auto m = TokenMerger<double>::make(16, 96, 192, 8, rng);  // stage 2 -> 3 of the smallest variant
  auto y = token_merge(random64({3, 16, 96}, 8), m);
  EXPECT_EQ(y.shape(), (Shape{3, 16, 192}));
}

TEST(TokenMerge, RejectsCoordinatorsFromTheWrongStage) {
  Rng rng(1);
  auto m = TokenMerger<double>::make(4, 8, 12, 2, rng);
  EXPECT_THROW(token_merge(random64({1, 4, 12}, 1), m), ConfigError);
}

// ---------------------------------------------------------------------------
// Anchor loss

TEST(AnchorLoss, SingleSampleHasZeroStability) {
  auto t = anchor_loss(random64({1, 4, 6}, 1));
  EXPECT_EQ(t.stability.item(), 0.0);
}

TEST(AnchorLoss, OrthonormalRowsHaveZeroDiversity) {
  // signed permutation of basis rows, K=3 <= D=5
  std::vector<double> v(15, 0.0);
  v[0 * 5 + 2] = 1.0;
  v[1 * 5 + 0] = -1.0;
  v[2 * 5 + 4] = 1.0;
  auto t = anchor_loss(t64({1, 3, 5}, v));
  EXPECT_EQ(t.diversity.item(), 0.0);
  auto t2 = anchor_loss(t64({1, 3, 5}, v), false);
  EXPECT_EQ(t2.diversity.item(), 0.0);
}

TEST(AnchorLoss, ScaledIdentityPinsTheNormalization) {
  auto g = t64({1, 2, 2}, {2, 0, 0, 2});
  EXPECT_EQ(anchor_loss(g, false).diversity.item(), 18.0);  // ||4I - I||^2 = 2 * 9
  EXPECT_EQ(anchor_loss(g, true).diversity.item(), 0.0);
}

TEST(AnchorLoss, StabilityIsBatchVarianceSum) {
  auto g = t64({2, 1, 2}, {1, 2, 3, 6});
  // mean [2, 4]; deviations (-1,-2) and (1,2): total 10, averaged over the batch -> 5
  EXPECT_DOUBLE_EQ(anchor_loss(g).stability.item(), 5.0);
}

TEST(AnchorLoss, TotalIsTheWeightedSum) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto t = anchor_loss(random64({3, 4, 6}, seed));
    EXPECT_EQ(t.total.item(), 0.5 * t.diversity.item() + 0.1 * t.stability.item());
    EXPECT_GE(t.diversity.item(), 0.0);
    EXPECT_GE(t.stability.item(), 0.0);
  }
  Rng rng(3);
  auto tf = anchor_loss(randn<float>({3, 4, 6}, rng));
  EXPECT_EQ(tf.total.item(), 0.5f * tf.diversity.item() + 0.1f * tf.stability.item());
}

// ---------------------------------------------------------------------------
// Gradients

class CoordinatorGradients : public ::testing::TestWithParam<int> {
 protected:
  std::uint64_t seed() const { return static_cast<std::uint64_t>(GetParam()); }
};

TEST_P(CoordinatorGradients, Generator) {
  Rng rng(seed());
  auto gen = CoordinatorGenerator<double>::make(8, 3, 8, rng);
  randomize(gen, seed() + 1);
  auto x = random64({2, 8, 4, 4}, seed() + 2, 1.0, true);
  auto params = named_parameters<double>(gen, "gen");
  params.emplace_back("x", x);
  auto r = grad_check<double>([&] { return probe_loss(generate_coordinators(x, gen), seed()); }, params, {});
  EXPECT_TRUE(r.pass) << r.failure;
}

TEST_P(CoordinatorGradients, TokenMerge) {
  Rng rng(seed());
  auto m = TokenMerger<double>::make(3, 8, 12, 3, rng);
  randomize(m, seed() + 1);
  auto g = random64({2, 3, 8}, seed() + 2, 1.0, true);
  auto params = named_parameters<double>(m, "merge");
  params.emplace_back("g", g);
  auto r = grad_check<double>([&] { return probe_loss(token_merge(g, m), seed()); }, params, {});
  EXPECT_TRUE(r.pass) << r.failure;
}

TEST_P(CoordinatorGradients, AnchorLoss) {
  auto g = random64({3, 4, 6}, seed(), 1.0, true);
  auto r = check_fn([&] { return anchor_loss(g).total; }, {g});
  EXPECT_TRUE(r.pass) << r.failure;
  auto r2 = check_fn([&] { return anchor_loss(g, false).total; }, {g});
  EXPECT_TRUE(r2.pass) << r2.failure;
}

INSTANTIATE_TEST_SUITE_P(Seeds, CoordinatorGradients, ::testing::Values(1, 2, 3, 4, 5));
