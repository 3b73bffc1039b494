#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "coca/backbone/model.hpp"
#include "test_util.hpp"

using namespace coca;
using namespace coca::test;

namespace {

void fill(Tensor<double>& t, double v) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), v); }

template <class M>
void jitter(M& m, std::uint64_t seed, double stddev = 0.1) {
  Rng rng(seed);
  m.visit("", [&](const std::string&, Tensor<double>& t) {
    for (auto& v : t.mutable_data()) v += rng.normal() * stddev;
  });
}

// Parameter count written out from the architecture description, term by
// term, independent of the visit() machinery.
std::size_t expected_parameters(const ModelConfig& c) {
  auto lin = [](std::size_t i, std::size_t o) { return i * o + o; };
  auto ln = [](std::size_t n) { return 2 * n; };
  auto se = [&](std::size_t n) { return lin(n, n / 4) + lin(n / 4, n); };
  const std::size_t c0 = c.conv_dim, k = c.coordinators;
  std::size_t p = (3 * 9 * c0 + c0) + ln(c0) + (c0 * 9 * c0 + c0);
  const std::size_t e = c0 * c.mbconv_expand;
  p += c.depths[0] * (ln(c0) + lin(c0, e) + (9 * e + e) + se(e) + lin(e, c0));
  const auto plan = plan_blocks(c);
  std::size_t prev = c0;
  for (std::size_t t = 0; t < 3; ++t) {
    const std::size_t d = c.heads[t] * c.head_dim, r = c.mlp_ratios[t], w = c.windows[t];
    const std::size_t bias_table = (2 * w - 1) * (2 * w - 1) * c.heads[t];
    p += prev * 9 * d + d + ln(d);
    if (c.use_coordinators) {
      if (t == 0) p += se(d) + (2 * 49 + 1) + lin(d, 2 * d) + lin(2 * d, k * d);
      else p += k * d + 3 * lin(prev, d);
    }
    for (BlockKind kind : plan[t]) {
      const std::size_t attn = 4 * lin(d, d);
      if (kind == BlockKind::Wsa) p += ln(d) + attn + bias_table;
      else p += (2 * ln(d) + attn + ln(d) + lin(d, c.coord_mlp_ratio * d) + lin(c.coord_mlp_ratio * d, d)) +
                (2 * ln(d) + attn + bias_table);
      p += ln(d) + lin(d, r * d) + (9 * r * d / 2 + r * d / 2) + lin(r * d / 2, d);
    }
    prev = d;
  }
  p += ln(prev);
  p += c.head_hidden ? lin(prev, c.head_hidden) + lin(c.head_hidden, c.num_classes) : lin(prev, c.num_classes);
  return p;
}

Model<double> nano_model(std::uint64_t seed, ModelConfig cfg = variant_nano()) {
  Rng rng(seed);
  auto m = build_model<double>(cfg, rng);
  jitter(m, seed + 1000);
  return m;
}

T64 images(std::size_t b, std::size_t size, std::uint64_t seed) { return random64({b, 3, size, size}, seed); }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration and plan

TEST(Config, BuiltInVariantsResolve) {
  auto c11 = variant_11m();
  EXPECT_EQ(c11.conv_dim, 72u);
  EXPECT_EQ(c11.stage_dim(0), 96u);
  EXPECT_EQ(c11.stage_dim(1), 192u);
  EXPECT_EQ(c11.stage_dim(2), 336u);
  EXPECT_EQ(c11.depths, (std::vector<std::size_t>{2, 2, 12, 2}));
  auto c28 = *find_variant("28M");
  EXPECT_EQ(c28.depths, (std::vector<std::size_t>{2, 2, 15, 2}));
  EXPECT_EQ(c28.conv_dim, 96u);
  EXPECT_EQ(c28.stage_dim(0), 144u);
  EXPECT_EQ(c28.stage_dim(1), 288u);
  EXPECT_EQ(c28.stage_dim(2), 432u);
  EXPECT_FALSE(find_variant("7M").has_value());
  for (const char* n : {"11M", "21M", "28M", "nano"}) EXPECT_NO_THROW(find_variant(n)->validate()) << n;
}

TEST(Config, InconsistentWidthNamesTheStage) {
  auto c = variant_11m();
  c.dims = {96, 190, 336};
  try {
    c.validate();
    FAIL() << "accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 3"), std::string::npos) << e.what();
  }
  c = variant_nano();
  c.interaction = {2, 0, -1};
  EXPECT_THROW(c.validate(), ConfigError);
  c = variant_nano();
  c.depths = {1, 1, 2};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Plan, FollowsTheInteractionRule) {
  auto s = plan_stage(12, 3);
  std::size_t coca = 0;
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(s[i] == BlockKind::CoCA, (i + 1) % 3 == 0) << i;
    coca += s[i] == BlockKind::CoCA;
  }
  EXPECT_EQ(coca, 4u);
  EXPECT_EQ(plan_stage(2, 2), (std::vector<BlockKind>{BlockKind::Wsa, BlockKind::CoCA}));
  for (std::size_t d : {1u, 2u, 7u}) EXPECT_EQ(plan_stage(d, -1), std::vector<BlockKind>(d, BlockKind::Wsa));
  EXPECT_THROW(plan_stage(3, 0), ConfigError);
  EXPECT_THROW(plan_blocks({2, 2}, {1}), ConfigError);
}

TEST(Plan, GgcaCountMatchesFloorSum) {
  for (const auto& c : {variant_11m(), variant_21m(), variant_28m()}) {
    std::size_t coca = 0;
    for (const auto& st : plan_blocks(c))
      coca += static_cast<std::size_t>(std::count(st.begin(), st.end(), BlockKind::CoCA));
    const std::size_t expect = c.depths[1] / 2 + c.depths[2] / 3;
    EXPECT_EQ(coca, expect) << c.name;
  }
  EXPECT_EQ(plan_blocks(variant_11m())[0], (std::vector<BlockKind>{BlockKind::Wsa, BlockKind::CoCA}));
  // and the forward really runs that many GGCA layers
  auto m = nano_model(1);
  MacCounter mc;
  {
    CountingScope cs(mc);
    forward(m, images(1, 32, 2));
  }
  std::size_t ggca_layers = 0;
  for (const auto& [name, macs] : mc.per_layer())
    if (name.size() > 5 && name.compare(name.size() - 5, 5, ".ggca") == 0) ++ggca_layers;
  EXPECT_EQ(ggca_layers, 1u);
}

TEST(Model, ParameterCountMatchesArchitectureFormula) {
  auto nano_plain = variant_nano();
  nano_plain.use_coordinators = false;
  auto wide = variant_nano();
  wide.heads = {2, 3, 4};
  wide.head_hidden = 24;
  for (const auto& c : {variant_11m(), variant_21m(), variant_28m(), variant_nano(), nano_plain, wide}) {
    Rng rng(1);
    auto m = build_model<float>(c, rng);
    EXPECT_EQ(count_parameters(m), expected_parameters(c)) << c.name;
  }
}

TEST(Model, BreakdownSumsToTotal) {
  Rng rng(1);
  auto m = build_model<float>(variant_11m(), rng);
  std::size_t total = 0;
  for (const auto& [k, v] : parameter_breakdown(m)) total += v;
  EXPECT_EQ(total, count_parameters(m));
}

// ---------------------------------------------------------------------------
// Blocks

TEST(MbConv, ZeroProjectionIsIdentity) {
  Rng rng(1);
  auto b = MbConv<double>::make(8, 6, rng);
  fill(b.project.weight, 0.0);
  auto x = random64({2, 8, 5, 5}, 2);
  EXPECT_TRUE(bitwise_equal(mbconv_block(x, b), x));
}

TEST(MbConv, PreservesShapeAtSmallestVariantWidth) {
  Rng rng(1);
  auto b = MbConv<float>::make(72, 6, rng);
  Rng r2(2);
  auto y = mbconv_block(randn<float>({1, 72, 56, 56}, r2), b);
  EXPECT_EQ(y.shape(), (Shape{1, 72, 56, 56}));
}

TEST(MbConv, CircularShiftCommutesAwayFromBorders) {
  Rng rng(3);
  auto b = MbConv<double>::make(4, 6, rng);
  jitter(b, 4, 0.3);
  // SE pools over zero-padded borders; a constant gate leaves only the local path
  fill(b.se.fc2.weight, 0.0);
  const std::size_t n = 10;
  auto x = random64({1, 4, n, n}, 5);
  std::vector<double> shifted(x.numel());
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) shifted[(c * n + i) * n + (j + 1) % n] = x[(c * n + i) * n + j];
  auto y = mbconv_block(x, b);
  auto ys = mbconv_block(t64(x.shape(), shifted), b);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 1; i + 1 < n; ++i)
      for (std::size_t j = 1; j + 2 < n; ++j)
        EXPECT_NEAR(ys[(c * n + i) * n + j + 1], y[(c * n + i) * n + j], 1e-12);
}

TEST(ConvGlu, ZeroGateBranchIsIdentity) {
  Rng rng(1);
  auto g = ConvGlu<double>::make(8, 4, rng);
  fill(g.dw.weight, 0.0);
  fill(g.dw.bias, 0.0);
  auto x = random64({2, 3, 3, 8}, 2);
  EXPECT_TRUE(bitwise_equal(conv_glu(x, g), x));
}

TEST(ConvGlu, ExpansionArithmetic) {
  Rng rng(1);
  auto g = ConvGlu<float>::make(96, 5, rng);
  EXPECT_EQ(g.hidden(), 480u);
  EXPECT_EQ(g.fc1.weight.shape(), (Shape{96, 480}));
  EXPECT_EQ(g.dw.weight.shape(), (Shape{240, 1, 3, 3}));
  EXPECT_EQ(g.fc2.weight.shape(), (Shape{240, 96}));
  EXPECT_THROW(ConvGlu<float>::make(3, 5, rng), ConfigError);
}

// ---------------------------------------------------------------------------
// Forward

TEST(Forward, NanoShapes) {
  auto m = nano_model(1);
  auto r = forward(m, images(2, 32, 2));
  EXPECT_EQ(r.logits.shape(), (Shape{2, 4}));
  EXPECT_EQ(r.coordinators.shape(), (Shape{2, 4, 8}));
  EXPECT_EQ(r.final_coordinators.shape(), (Shape{2, 4, 8}));
  EXPECT_EQ(r.anchor.total.shape(), (Shape{}));
}

TEST(Forward, CoordinatorsFollowTheStageWidth) {
  auto c = variant_nano();
  c.heads = {2, 3, 4};
  auto m = nano_model(1, c);
  auto r = forward(m, images(1, 32, 2));
  EXPECT_EQ(r.coordinators.shape(), (Shape{1, 4, 8}));
  EXPECT_EQ(r.final_coordinators.shape(), (Shape{1, 4, 16}));
  EXPECT_EQ(m.stages[1].merge.out_dim(), 12u);
}

TEST(Forward, OddImageSizesRunThroughPadding) {
  auto m = nano_model(1);
  auto r = forward(m, images(1, 44, 2));
  EXPECT_EQ(r.logits.shape(), (Shape{1, 4}));
}

TEST(Forward, IdenticalImagesGiveIdenticalRows) {
  auto m = nano_model(2);
  auto one = images(1, 32, 3);
  auto r = forward(m, concat<double>({one, one}, 0));
  EXPECT_TRUE(std::equal(r.logits.vec().begin(), r.logits.vec().begin() + 4, r.logits.vec().begin() + 4));
}

TEST(Forward, DeterministicUnderFixedSeed) {
  auto x = images(2, 32, 4);
  auto a = forward(nano_model(7), x);
  auto b = forward(nano_model(7), x);
  EXPECT_TRUE(bitwise_equal(a.logits, b.logits));
  EXPECT_TRUE(bitwise_equal(a.coordinators, b.coordinators));
  auto c = forward(nano_model(8), x);
  EXPECT_FALSE(bitwise_equal(a.logits, c.logits));
}

TEST(Forward, MaskedCoordinatorsEqualThePureWindowModel) {
  auto deep = variant_nano();
  deep.depths = {1, 2, 3, 2};
  deep.interaction = {1, 2, 1};
  for (const auto& cfg : {variant_nano(), deep}) {
    auto m = nano_model(3, cfg);
    auto x = images(2, 32, 5);
    auto masked = forward(m, x, {.mask_coordinators = true});
    auto plain = forward(without_coordinators(m), x);
    EXPECT_TRUE(bitwise_equal(masked.logits, plain.logits)) << cfg.name;
    EXPECT_FALSE(bitwise_equal(forward(m, x).logits, plain.logits));
  }
}

TEST(Forward, WithoutCoordinatorsConfig) {
  auto c = variant_nano();
  c.use_coordinators = false;
  auto m = nano_model(1, c);
  EXPECT_FALSE(m.has_generator);
  for (const auto& st : m.stages)
    for (const auto& b : st.blocks) EXPECT_EQ(b.kind, BlockKind::Wsa);
  auto r = forward(m, images(1, 32, 2));
  EXPECT_FALSE(r.coordinators.defined());
  EXPECT_FALSE(r.anchor.total.defined());
  EXPECT_EQ(r.logits.shape(), (Shape{1, 4}));
}

TEST(Forward, NonFiniteActivationNamesTheLayer) {
  auto m = nano_model(1);
  m.stages[1].blocks[1].glu.fc1.weight.mutable_data()[0] = std::nan("");
  try {
    forward(m, images(1, 32, 2));
    FAIL() << "no error";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("stage3.block2.glu"), std::string::npos) << e.what();
  }
  EXPECT_THROW(forward(m, random64({1, 1, 32, 32}, 1)), DimensionError);
}

TEST(Loss, CrossEntropyMatchesClosedForm) {
  auto logits = t64({2, 3}, {0, 0, 0, 1, 2, 3});
  auto ce = cross_entropy(logits, {1, 2});
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  EXPECT_NEAR(ce.item(), (std::log(3.0) + (lse - 3.0)) / 2, 1e-15);
  EXPECT_THROW(cross_entropy(logits, {1, 3}), DimensionError);
}

// ---------------------------------------------------------------------------
// Gradients

class BackboneGradients : public ::testing::TestWithParam<int> {
 protected:
  std::uint64_t seed() const { return static_cast<std::uint64_t>(GetParam()); }
};

TEST_P(BackboneGradients, MbConv) {
  Rng rng(seed());
  auto b = MbConv<double>::make(4, 6, rng);
  jitter(b, seed() + 1, 0.3);
  auto x = random64({2, 4, 4, 4}, seed() + 2, 1.0, true);
  auto params = named_parameters<double>(b, "mbconv");
  params.emplace_back("x", x);
  auto r = grad_check<double>([&] { return probe_loss(mbconv_block(x, b), seed()); }, params, {});
  EXPECT_TRUE(r.pass) << r.failure;
}

TEST_P(BackboneGradients, ConvGlu) {
  Rng rng(seed());
  auto g = ConvGlu<double>::make(8, 3, rng);
  jitter(g, seed() + 1, 0.3);
  auto x = random64({2, 3, 4, 8}, seed() + 2, 1.0, true);
  auto params = named_parameters<double>(g, "glu");
  params.emplace_back("x", x);
  auto r = grad_check<double>([&] { return probe_loss(conv_glu(x, g), seed()); }, params, {});
  EXPECT_TRUE(r.pass) << r.failure;
}

// Sampled coordinates keep this quick; the acceptance suite probes every one.
TEST_P(BackboneGradients, NanoModelSampled) {
  auto m = nano_model(seed());
  auto x = images(2, 32, seed() + 5);
  const std::vector<std::size_t> labels = {seed() % 4, (seed() + 1) % 4};
  GradCheckOptions opt;
  opt.max_points_per_param = 6;
  opt.seed = seed();
  auto r = grad_check<double>([&] { return training_loss(forward(m, x), labels); }, named_parameters<double>(m, ""), opt);
  EXPECT_TRUE(r.pass) << r.failure;
  EXPECT_GT(r.points, 400u);
}

INSTANTIATE_TEST_SUITE_P(Seeds, BackboneGradients, ::testing::Values(1, 2, 3, 4, 5));
