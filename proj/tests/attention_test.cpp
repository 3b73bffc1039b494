#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "coca/attention/attention.hpp"
#include "test_util.hpp"

using namespace coca;
using namespace coca::test;

namespace {

void fill(Tensor<double>& t, double v) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), v); }

void set_identity(Linear<double>& l) {
  fill(l.weight, 0.0);
  const std::size_t n = l.weight.dim(0);
  for (std::size_t i = 0; i < n; ++i) l.weight.mutable_data()[i * n + i] = 1.0;
  if (l.bias.defined()) fill(l.bias, 0.0);
}

void set_identity(AttentionWeights<double>& w) {
  set_identity(w.q);
  set_identity(w.k);
  set_identity(w.v);
  set_identity(w.o);
  if (w.rel_bias.defined()) fill(w.rel_bias, 0.0);
}

// Gives every parameter nonzero values so that biases and norms participate.
template <class M>
void randomize(M& m, std::uint64_t seed) {
  Rng rng(seed);
  m.visit("", [&](const std::string&, Tensor<double>& t) {
    for (auto& v : t.mutable_data()) v = rng.normal() * 0.3 + (t.rank() == 1 ? 0.1 : 0.0);
  });
}

double at4(const Tensor<double>& x, std::size_t b, std::size_t i, std::size_t j, std::size_t c) {
  return x[((b * x.dim(1) + i) * x.dim(2) + j) * x.dim(3) + c];
}

// Loop-level reference for x + Attn(LN(x)) over windows with optional
// coordinator keys, written directly from the definition: padded cells do
// not exist as keys; coordinator keys carry no position bias.
Tensor<double> reference_window_layer(const Tensor<double>& x, const LayerNorm<double>& norm,
                                      const AttentionWeights<double>& w, const Tensor<double>* coords_normed) {
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t M = w.window_side, heads = w.heads, hd = w.head_dim, span = 2 * M - 1;
  auto xn = norm(x);
  auto proj = [&](const Linear<double>& l, const double* in) {
    std::vector<double> out(C);
    for (std::size_t o = 0; o < C; ++o) {
      double s = l.bias.defined() ? l.bias[o] : 0.0;
      for (std::size_t i = 0; i < C; ++i) s += in[i] * l.weight[i * C + o];
      out[o] = s;
    }
    return out;
  };
  const std::size_t K = coords_normed ? coords_normed->dim(1) : 0;
  std::vector<double> y(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const double* xq = xn.vec().data() + ((b * H + i) * W + j) * C;
        auto q = proj(w.q, xq);
        struct Key {
          std::vector<double> k, v;
          bool coord;
          std::size_t r, c;
        };
        std::vector<Key> keys;
        const std::size_t r0 = i / M * M, c0 = j / M * M;
        for (std::size_t r = r0; r < std::min(r0 + M, H); ++r)
          for (std::size_t c = c0; c < std::min(c0 + M, W); ++c) {
            const double* xk = xn.vec().data() + ((b * H + r) * W + c) * C;
            keys.push_back({proj(w.k, xk), proj(w.v, xk), false, r, c});
          }
        for (std::size_t k = 0; k < K; ++k) {
          const double* g = coords_normed->vec().data() + (b * K + k) * C;
          keys.push_back({proj(w.k, g), proj(w.v, g), true, 0, 0});
        }
        std::vector<double> attn_out(C, 0.0);
        for (std::size_t hh = 0; hh < heads; ++hh) {
          std::vector<double> s(keys.size());
          for (std::size_t n = 0; n < keys.size(); ++n) {
            double d = 0;
            for (std::size_t e = 0; e < hd; ++e) d += q[hh * hd + e] * keys[n].k[hh * hd + e];
            d /= std::sqrt(static_cast<double>(hd));
            if (!keys[n].coord) {
              const std::size_t dr = (i - r0) + M - 1 - (keys[n].r - r0);
              const std::size_t dc = (j - c0) + M - 1 - (keys[n].c - c0);
              d += w.rel_bias[(dr * span + dc) * heads + hh];
            }
            s[n] = d;
          }
          const double mx = *std::max_element(s.begin(), s.end());
          double z = 0;
          for (auto& v : s) z += (v = std::exp(v - mx));
          for (std::size_t n = 0; n < keys.size(); ++n)
            for (std::size_t e = 0; e < hd; ++e) attn_out[hh * hd + e] += s[n] / z * keys[n].v[hh * hd + e];
        }
        auto o = proj(w.o, attn_out.data());
        for (std::size_t c = 0; c < C; ++c) y[((b * H + i) * W + j) * C + c] = at4(x, b, i, j, c) + o[c];
      }
  return Tensor<double>(x.shape(), std::move(y));
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Window tiling

TEST(WindowPartition, SingleWindowIsRowMajor) {
  auto x = random64({1, 4, 4, 3}, 1);
  auto w = window_partition(x, 4);
  EXPECT_EQ(w.shape(), (Shape{1, 16, 3}));
  EXPECT_TRUE(bitwise_equal(reshape(x, {1, 16, 3}), w));
}

TEST(WindowPartition, TokenLandsInExpectedWindow) {
  std::vector<double> v(16);
  std::iota(v.begin(), v.end(), 0.0);  // cell (r,c) holds 4r + c
  auto w = window_partition(t64({1, 4, 4, 1}, v), 2);
  ASSERT_EQ(w.shape(), (Shape{4, 4, 1}));
  EXPECT_EQ(w[1 * 4 + 1], 3.0);  // cell (0,3): window 1, position 1
  // full index map: window (wr,wc), position (pr,pc) holds cell (2wr+pr, 2wc+pc)
  for (std::size_t win = 0; win < 4; ++win)
    for (std::size_t pos = 0; pos < 4; ++pos) {
      const std::size_t r = 2 * (win / 2) + pos / 2, c = 2 * (win % 2) + pos % 2;
      EXPECT_EQ(w[win * 4 + pos], static_cast<double>(4 * r + c));
    }
}

TEST(WindowPartition, RoundTripIsExact) {
  for (std::size_t side : {1u, 2u, 3u, 6u}) {
    auto x = random64({2, 6, 12, 5}, side);
    EXPECT_TRUE(bitwise_equal(window_reverse(window_partition(x, side), 6, 12), x)) << side;
  }
  auto z = Tensor<double>::zeros({1, 4, 4, 2});
  EXPECT_TRUE(bitwise_equal(window_reverse(window_partition(z, 2), 4, 4), z));
}

TEST(WindowPartition, PermutingTokensInsideOneWindowPermutesThoseCells) {
  std::vector<double> v(36);
  std::iota(v.begin(), v.end(), 0.0);
  auto w = window_partition(t64({1, 6, 6, 1}, v), 3);  // 4 windows of 9
  auto data = w.vec();
  const std::size_t win = 2;
  std::vector<std::size_t> perm = {8, 0, 1, 2, 3, 4, 5, 6, 7};
  for (std::size_t p = 0; p < 9; ++p) data[win * 9 + p] = w[win * 9 + perm[p]];
  auto g = window_reverse(t64({4, 9, 1}, data), 6, 6);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 6; ++c) {
      const bool inside = r >= 3 && c < 3;
      double expect = v[r * 6 + c];
      if (inside) {
        const std::size_t p = (r - 3) * 3 + c, src = perm[p];
        expect = v[(3 + src / 3) * 6 + src % 3];
      }
      EXPECT_EQ(g[r * 6 + c], expect);
    }
}

TEST(WindowPartition, GeometryErrors) {
  auto x = random64({1, 5, 4, 2}, 3);
  EXPECT_THROW(window_partition(x, 2), std::logic_error);
  EXPECT_THROW(window_reverse(random64({3, 4, 2}, 1), 4, 4), DimensionError);
  EXPECT_THROW(window_reverse(random64({4, 5, 2}, 1), 4, 4), DimensionError);
  EXPECT_THROW(window_reverse(random64({4, 4, 2}, 1), 6, 6), DimensionError);
}

TEST(WindowPartition, PaddingGrowsToMultipleAndCropRestores) {
  auto x = random64({2, 5, 7, 3}, 4);
  auto p = pad_grid(x, 4);
  EXPECT_EQ(p.shape(), (Shape{2, 8, 8, 3}));
  EXPECT_TRUE(bitwise_equal(crop_grid(p, 5, 7), x));
  EXPECT_EQ(at4(p, 1, 6, 2, 1), 0.0);
  EXPECT_FALSE(window_key_mask<double>(8, 8, 4).defined());
  auto m = window_key_mask<double>(5, 7, 4, 2);
  ASSERT_EQ(m.shape(), (Shape{4, 1, 1, 18}));
  // window 3 covers rows 4..7, cols 4..7; only row 4, cols 4..6 are real
  for (std::size_t p2 = 0; p2 < 16; ++p2) {
    const bool real = p2 / 4 == 0 && p2 % 4 < 3;
    EXPECT_EQ(m[3 * 18 + p2], real ? 0.0 : kMaskedScore);
  }
  EXPECT_EQ(m[3 * 18 + 16], 0.0);
}

// ---------------------------------------------------------------------------
// WSA

TEST(Wsa, SingleTokenWindowsReduceToValueThenOutput) {
  Rng rng(5);
  auto w = AttentionWeights<double>::make(6, 2, rng, 1);
  auto x = random64({5, 1, 6}, 6);
  auto y = wsa(x, w);
  EXPECT_LT(max_abs_diff(y.vec(), w.o(w.v(x)).vec()), 1e-14);
}

TEST(Wsa, EqualScoresAverageTheValues) {
  Rng rng(7);
  auto w = AttentionWeights<double>::make(4, 2, rng, 2);
  fill(w.k.weight, 0.0);  // every key identical -> every score equal
  fill(w.rel_bias, 0.0);
  auto x = random64({3, 4, 4}, 8);
  auto y = wsa(x, w);
  auto expect = w.o(expand(mean(w.v(x), 1, true), {3, 4, 4}));
  EXPECT_LT(max_abs_diff(y.vec(), expect.vec()), 1e-14);
}

TEST(Wsa, WindowsDoNotExchangeInformation) {
  Rng rng(9);
  auto w = AttentionWeights<double>::make(8, 2, rng, 2);
  auto x = random64({6, 4, 8}, 10);
  auto y = wsa(x, w);
  auto d = x.vec();
  std::fill_n(d.begin() + 4 * 32, 32, 0.0);  // zero window 4
  auto y2 = wsa(t64(x.shape(), d), w);
  for (std::size_t win = 0; win < 6; ++win) {
    bool same = std::equal(y.vec().begin() + win * 32, y.vec().begin() + (win + 1) * 32, y2.vec().begin() + win * 32);
    EXPECT_EQ(same, win != 4) << win;
  }
}

TEST(Wsa, HeadChannelMismatchIsConfigError) {
  Rng rng(1);
  EXPECT_THROW(AttentionWeights<double>::make(10, 3, rng), ConfigError);
  auto w = AttentionWeights<double>::make(8, 2, rng, 2);
  EXPECT_THROW(wsa(random64({2, 4, 6}, 1), w), ConfigError);
  EXPECT_THROW(wsa(random64({2, 9, 8}, 1), w), ConfigError);
}

TEST(Wsa, LayerMatchesLoopReferenceIncludingPadding) {
  Rng rng(11);
  auto layer = WsaLayer<double>::make(8, 2, 3, rng);
  randomize(layer, 12);
  for (Shape s : {Shape{2, 6, 6, 8}, Shape{2, 5, 7, 8}, Shape{1, 2, 2, 8}}) {
    auto x = random64(s, 13);
    auto y = wsa_layer(x, layer);
    auto ref = reference_window_layer(x, layer.norm, layer.attn, nullptr);
    EXPECT_LT(max_abs_diff(y.vec(), ref.vec()), 1e-12) << to_string(s);
  }
}

// ---------------------------------------------------------------------------
// GGCA

TEST(Ggca, HandEvaluationHalvesThePatch) {
  Rng rng(1);
  auto w = AttentionWeights<double>::make(1, 1, rng);
  set_identity(w);
  const double x = 3.7;
  auto y = ggca_attention(t64({1, 1, 1}, {x}), t64({1, 1, 1}, {0.0}), w);
  EXPECT_DOUBLE_EQ(y.item(), x / 2);
}

TEST(Ggca, PatchesPassThroughUntouched) {
  Rng rng(2);
  auto layer = GgcaLayer<double>::make(8, 2, 2, rng);
  auto x = random64({2, 4, 4, 8}, 3);
  auto g = random64({2, 3, 8}, 4);
  auto out = ggca(x, g, layer);
  EXPECT_TRUE(bitwise_equal(out.patches, x));
  EXPECT_EQ(out.coords.shape(), g.shape());
}

TEST(Ggca, InvariantToPatchOrder) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto layer = GgcaLayer<double>::make(8, 2, 2, rng);
    randomize(layer, seed + 100);
    auto x = random64({2, 4, 4, 8}, seed + 10);
    auto g = random64({2, 3, 8}, seed + 20);
    auto perm = iota(16);
    Rng pr(seed);
    for (std::size_t i = 15; i > 0; --i) std::swap(perm[i], perm[pr.index(i + 1)]);
    auto flat = reshape(x, {2, 16, 8});
    std::vector<double> shuffled(flat.numel());
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t n = 0; n < 16; ++n)
        for (std::size_t c = 0; c < 8; ++c) shuffled[(b * 16 + n) * 8 + c] = flat[(b * 16 + perm[n]) * 8 + c];
    auto xp = t64({2, 4, 4, 8}, shuffled);
    auto a = ggca(x, g, layer).coords;
    auto b = ggca(xp, g, layer).coords;
    EXPECT_LE(max_abs_diff(a.vec(), b.vec()), 1e-10);
  }
}

TEST(Ggca, OutputsStayInsideValueEnvelope) {
  Rng rng(21);
  auto w = AttentionWeights<double>::make(6, 3, rng);
  set_identity(w.o);
  auto p = random64({2, 10, 6}, 22);
  auto g = random64({2, 4, 6}, 23);
  auto y = ggca_attention(p, g, w);
  auto v = w.v(concat<double>({g, p}, 1));  // [2, 14, 6]
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 6; ++c) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t n = 0; n < 14; ++n) {
        lo = std::min(lo, v[(b * 14 + n) * 6 + c]);
        hi = std::max(hi, v[(b * 14 + n) * 6 + c]);
      }
      for (std::size_t k = 0; k < 4; ++k) {
        const double o = y[(b * 4 + k) * 6 + c];
        EXPECT_GE(o, lo - 1e-12);
        EXPECT_LE(o, hi + 1e-12);
      }
    }
}

TEST(Ggca, DimensionErrors) {
  Rng rng(1);
  auto layer = GgcaLayer<double>::make(8, 2, 0, rng);
  EXPECT_THROW(ggca(random64({1, 2, 2, 8}, 1), random64({1, 2, 6}, 2), layer), ConfigError);
  EXPECT_THROW(ggca(random64({1, 2, 2, 8}, 1), random64({1, 0, 8}, 2), layer), ConfigError);
  EXPECT_THROW(ggca(random64({1, 4, 8}, 1), random64({1, 2, 8}, 2), layer), DimensionError);
}

// ---------------------------------------------------------------------------
// GCWA

TEST(Gcwa, NoCoordinatorsIsBitwiseWsa) {
  Rng rng(31);
  auto layer = GcwaLayer<double>::make(8, 2, 2, rng);
  randomize(layer, 32);
  WsaLayer<double> plain{layer.norm, layer.attn};
  for (Shape s : {Shape{2, 4, 4, 8}, Shape{1, 3, 5, 8}}) {
    auto x = random64(s, 33);
    auto a = gcwa(x, Tensor<double>::zeros({s[0], 0, 8}), layer);
    auto b = wsa_layer(x, plain);
    EXPECT_TRUE(bitwise_equal(a, b)) << to_string(s);
  }
}

TEST(Gcwa, HandEvaluationWithOneCoordinator) {
  Rng rng(1);
  auto w = AttentionWeights<double>::make(1, 1, rng, 1);
  set_identity(w);
  fill(w.k.weight, 0.0);  // equal scores
  auto y = gcwa_attention(t64({1, 1, 1}, {1.0}), t64({1, 1, 1}, {1.0}), w);
  EXPECT_DOUBLE_EQ(y.item(), 1.0);
  set_identity(w.k);
  auto y2 = gcwa_attention(t64({1, 1, 1}, {2.0}), t64({1, 1, 1}, {0.0}), w);
  // scores 4 and 0: (2 e^4 + 0) / (e^4 + 1)
  EXPECT_NEAR(y2.item(), 2 * std::exp(4.0) / (std::exp(4.0) + 1), 1e-15);
}

TEST(Gcwa, MaskedZeroCoordinatorsMatchWsa) {
  Rng rng(41);
  auto layer = GcwaLayer<double>::make(8, 2, 2, rng);
  randomize(layer, 42);
  WsaLayer<double> plain{layer.norm, layer.attn};
  auto x = random64({2, 4, 6, 8}, 43);
  auto y = gcwa(x, Tensor<double>::zeros({2, 3, 8}), layer, {.mask_coordinators = true});
  EXPECT_LT(max_abs_diff(y.vec(), wsa_layer(x, plain).vec()), 1e-12);
}

TEST(Gcwa, LayerMatchesLoopReferenceIncludingPadding) {
  Rng rng(51);
  auto layer = GcwaLayer<double>::make(8, 2, 3, rng);
  randomize(layer, 52);
  for (Shape s : {Shape{2, 6, 6, 8}, Shape{2, 4, 7, 8}}) {
    auto x = random64(s, 53);
    auto g = random64({s[0], 3, 8}, 54);
    auto y = gcwa(x, g, layer);
    auto gn = layer.norm_coords(g);
    auto ref = reference_window_layer(x, layer.norm, layer.attn, &gn);
    EXPECT_LT(max_abs_diff(y.vec(), ref.vec()), 1e-12) << to_string(s);
  }
}

TEST(Gcwa, PermutingWindowsPermutesOutputs) {
  Rng rng(61);
  auto w = AttentionWeights<double>::make(8, 2, rng, 2);
  auto win = random64({2 * 4, 4, 8}, 62);  // batch 2, four windows each
  auto g = random64({2, 3, 8}, 63);
  auto y = gcwa_attention(win, g, w);
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  std::vector<double> d(win.numel());
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 4; ++i)
      std::copy_n(win.vec().begin() + (b * 4 + perm[i]) * 32, 32, d.begin() + (b * 4 + i) * 32);
  auto y2 = gcwa_attention(t64(win.shape(), d), g, w);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 4; ++i)
      EXPECT_TRUE(std::equal(y.vec().begin() + (b * 4 + perm[i]) * 32, y.vec().begin() + (b * 4 + perm[i] + 1) * 32,
                             y2.vec().begin() + (b * 4 + i) * 32));
}

// One CoCA step: GGCA updates the coordinators from every patch, GCWA hands
// them to every window. Perturbing one window must reach the others through
// that path and only through it.
TEST(CrossWindowFlow, OnlyThroughCoordinators) {
  Rng rng(71);
  auto gg = GgcaLayer<double>::make(8, 2, 2, rng);
  auto gc = GcwaLayer<double>::make(8, 2, 2, rng);
  auto x = random64({1, 4, 4, 8}, 72);
  auto g = random64({1, 2, 8}, 73);
  auto x2 = x.clone();
  // cell (0,3), inside window 1; not a constant shift, which the pre-norm would erase
  for (std::size_t c = 0; c < 8; ++c) x2.mutable_data()[(0 * 4 + 3) * 8 + c] += 0.5 * static_cast<double>(c);

  auto run = [&](const Tensor<double>& in, bool ablate) {
    auto gp = ggca(in, g, gg).coords;
    return window_partition(gcwa(in, gp, gc, {.mask_coordinators = ablate}), 2);
  };
  for (bool ablate : {false, true}) {
    auto a = run(x, ablate), b = run(x2, ablate);
    for (std::size_t win = 0; win < 4; ++win) {
      if (win == 1) continue;
      const bool same = std::equal(a.vec().begin() + win * 32, a.vec().begin() + (win + 1) * 32, b.vec().begin() + win * 32);
      EXPECT_EQ(same, ablate) << "window " << win << (ablate ? " ablated" : "");
    }
  }
}

TEST(Attention, RowsSumToOne) {
  auto s = random64({3, 2, 5, 9}, 81, 20.0);
  auto p = softmax_rows(s);
  for (std::size_t r = 0; r < p.numel() / 9; ++r) {
    double t = 0;
    for (std::size_t j = 0; j < 9; ++j) t += p[r * 9 + j];
    EXPECT_NEAR(t, 1.0, 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Gradients

class AttentionGradients : public ::testing::TestWithParam<int> {};

TEST_P(AttentionGradients, WsaLayer) {
  const std::uint64_t seed = static_cast<std::uint64_t>(GetParam());
  Rng rng(seed);
  auto layer = WsaLayer<double>::make(8, 2, 2, rng);
  randomize(layer, seed + 1);
  auto x = random64({2, 3, 4, 8}, seed + 2, 1.0, true);
  auto params = named_parameters<double>(layer, "wsa");
  params.emplace_back("x", x);
  auto r = grad_check<double>([&] { return probe_loss(wsa_layer(x, layer)); }, params, {});
  EXPECT_TRUE(r.pass) << r.failure << " max " << r.max_rel_error;
}

TEST_P(AttentionGradients, GgcaThenGcwa) {
  const std::uint64_t seed = static_cast<std::uint64_t>(GetParam());
  Rng rng(seed);
  auto gg = GgcaLayer<double>::make(8, 2, 2, rng);
  auto gc = GcwaLayer<double>::make(8, 2, 2, rng);
  randomize(gg, seed + 1);
  randomize(gc, seed + 2);
  auto x = random64({2, 4, 3, 8}, seed + 3, 1.0, true);
  auto g = random64({2, 2, 8}, seed + 4, 1.0, true);
  auto params = named_parameters<double>(gg, "ggca");
  for (auto& p : named_parameters<double>(gc, "gcwa")) params.push_back(p);
  params.emplace_back("x", x);
  params.emplace_back("g", g);
  auto loss = [&] {
    auto out = ggca(x, g, gg);
    return add(probe_loss(gcwa(out.patches, out.coords, gc), seed), probe_loss(out.coords, seed + 5));
  };
  auto r = grad_check<double>(loss, params, {});
  EXPECT_TRUE(r.pass) << r.failure << " max " << r.max_rel_error;
}

INSTANTIATE_TEST_SUITE_P(Seeds, AttentionGradients, ::testing::Values(1, 2, 3, 4, 5));
