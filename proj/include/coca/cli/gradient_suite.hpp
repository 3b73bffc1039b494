#pragma once

// Finite-difference checks of every block type at 64-bit, on small shapes
// with randomized weights so that no gradient is trivially zero.

#include <functional>
#include <string>
#include <vector>

#include "coca/backbone/model.hpp"
#include "coca/numeric/grad_check.hpp"

namespace coca {

struct BlockGradResult {
  std::string block;
  std::uint64_t seed = 0;
  GradReport report;
};

struct GradientSuiteOptions {
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  /// Coordinates probed per parameter in the full-model check (0 = every one).
  std::size_t model_points_per_param = 0;
};

inline const std::vector<std::string>& gradient_suite_blocks() {
  static const std::vector<std::string> names = {"WSA",    "GGCA",      "GCWA",        "ConvGLU", "MBConv",
                                                 "generator", "token-merge", "anchor-loss", "model"};
  return names;
}

namespace detail {

template <class M>
void perturb(M& m, std::uint64_t seed, double stddev) {
  Rng rng(seed);
  m.visit("", [&](const std::string&, Tensor<double>& t) {
    for (auto& v : t.mutable_data()) v += rng.normal() * stddev;
  });
}

inline Tensor<double> leaf(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  return randn<double>(s, rng, 1.0, true);
}

/// sum(y * R) with a fixed random R: every output coordinate gets a distinct weight.
inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum_all(mul(y, randn<double>(y.shape(), rng)));
}

template <class M>
NamedParams<double> params_of(M& m, const std::string& prefix, std::initializer_list<std::pair<const char*, Tensor<double>>> extra) {
  auto p = named_parameters<double>(m, prefix);
  for (const auto& [n, t] : extra) p.emplace_back(n, t);
  return p;
}

}  // namespace detail

inline GradReport check_block_gradients(const std::string& block, std::uint64_t seed,
                                        const GradientSuiteOptions& opt = {}) {
  using detail::leaf;
  using detail::perturb;
  using detail::probe;
  Rng rng(seed);
  const GradCheckOptions gc{};
  if (block == "WSA") {
    // 5x6 map with 4x4 windows also exercises padding and the key mask
    auto l = WsaLayer<double>::make(8, 2, 4, rng);
    perturb(l, seed + 1, 0.2);
    auto x = leaf({2, 5, 6, 8}, seed + 2);
    return grad_check<double>([&] { return probe(wsa_layer(x, l), seed); }, detail::params_of(l, "wsa", {{"x", x}}), gc);
  }
  if (block == "GGCA") {
    auto l = GgcaLayer<double>::make(8, 2, 2, rng);
    perturb(l, seed + 1, 0.2);
    auto x = leaf({2, 3, 4, 8}, seed + 2);
    auto g = leaf({2, 3, 8}, seed + 3);
    return grad_check<double>([&] { return probe(ggca(x, g, l).coords, seed); },
                              detail::params_of(l, "ggca", {{"x", x}, {"g", g}}), gc);
  }
  if (block == "GCWA") {
    auto l = GcwaLayer<double>::make(8, 2, 2, rng);
    perturb(l, seed + 1, 0.2);
    auto x = leaf({2, 4, 3, 8}, seed + 2);
    auto g = leaf({2, 3, 8}, seed + 3);
    return grad_check<double>([&] { return probe(gcwa(x, g, l), seed); },
                              detail::params_of(l, "gcwa", {{"x", x}, {"g", g}}), gc);
  }
  if (block == "ConvGLU") {
    auto l = ConvGlu<double>::make(8, 3, rng);
    perturb(l, seed + 1, 0.2);
    auto x = leaf({2, 3, 4, 8}, seed + 2);
    return grad_check<double>([&] { return probe(conv_glu(x, l), seed); }, detail::params_of(l, "glu", {{"x", x}}), gc);
  }
  if (block == "MBConv") {
    auto l = MbConv<double>::make(4, 6, rng);
    perturb(l, seed + 1, 0.2);
    auto x = leaf({2, 4, 4, 4}, seed + 2);
    return grad_check<double>([&] { return probe(mbconv_block(x, l), seed); },
                              detail::params_of(l, "mbconv", {{"x", x}}), gc);
  }
  if (block == "generator") {
    auto l = CoordinatorGenerator<double>::make(8, 3, 8, rng);
    perturb(l, seed + 1, 0.2);
    auto x = leaf({2, 8, 5, 5}, seed + 2);
    return grad_check<double>([&] { return probe(generate_coordinators(x, l), seed); },
                              detail::params_of(l, "generator", {{"x", x}}), gc);
  }
  if (block == "token-merge") {
    auto l = TokenMerger<double>::make(3, 8, 12, 2, rng);
    perturb(l, seed + 1, 0.2);
    auto g = leaf({2, 3, 8}, seed + 2);
    return grad_check<double>([&] { return probe(token_merge(g, l), seed); },
                              detail::params_of(l, "merge", {{"g", g}}), gc);
  }
  if (block == "anchor-loss") {
    auto g = leaf({3, 4, 6}, seed + 2);
    return grad_check<double>([&] { return anchor_loss(g).total; }, {{"g", g}}, gc);
  }
  if (block == "model") {
    auto m = build_model<double>(variant_nano(), rng);
    perturb(m, seed + 1, 0.1);
    auto x = leaf({2, 3, 32, 32}, seed + 2);
    x.set_requires_grad(false);
    const std::vector<std::size_t> labels = {seed % 4, (seed + 1) % 4};
    GradCheckOptions mo = gc;
    mo.max_points_per_param = opt.model_points_per_param;
    mo.seed = seed;
    return grad_check<double>([&] { return training_loss(forward(m, x), labels); }, named_parameters<double>(m), mo);
  }
  throw ConfigError("unknown block '" + block + "' for gradient check");
}

/// Every block type over every seed; `on_result` is called as results arrive.
inline std::vector<BlockGradResult> run_gradient_suite(const GradientSuiteOptions& opt = {},
                                                       const std::function<void(const BlockGradResult&)>& on_result = {}) {
  std::vector<BlockGradResult> out;
  for (const auto& block : gradient_suite_blocks())
    for (auto seed : opt.seeds) {
      out.push_back({block, seed, check_block_gradients(block, seed, opt)});
      if (on_result) on_result(out.back());
    }
  return out;
}

}  // namespace coca
