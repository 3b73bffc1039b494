#pragma once

// Coordinator lifecycle: generation from the stage-2 input map, carrying
// coordinators across stage boundaries, and the anchor regularizer.
//
// Coordinators are [B, K, D] tensors; K is fixed for the whole network and D
// follows the channel width of the stage that owns them.

#include <string>

#include "coca/attention/attention.hpp"

namespace coca {

/// Channel gate: sigmoid(fc2(GELU(fc1(GAP(x))))), C -> C/r -> C.
template <class T>
struct SqueezeExcite {
  Linear<T> fc1;
  Linear<T> fc2;

  static SqueezeExcite make(std::size_t channels, std::size_t reduction, Rng& rng) {
    if (reduction == 0 || channels % reduction != 0)
      throw ConfigError("squeeze-excite: " + std::to_string(channels) + " channels not divisible by reduction " +
                        std::to_string(reduction));
    return {Linear<T>::make(channels, channels / reduction, rng), Linear<T>::make(channels / reduction, channels, rng)};
  }

  /// [B,C,H,W] -> [B,C,1,1] gate in (0,1).
  Tensor<T> gate(const Tensor<T>& x) const {
    auto g = sigmoid(fc2(gelu(fc1(global_avg_pool(x)))));
    return reshape(g, {x.dim(0), x.dim(1), 1, 1});
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    fc1.visit(join_name(prefix, "fc1"), f);
    fc2.visit(join_name(prefix, "fc2"), f);
  }
};

template <class T>
Tensor<T> se_recalibrate(const Tensor<T>& x, const SqueezeExcite<T>& se) {
  return mul(x, se.gate(x));
}

/// Spatial gate: sigmoid(conv7x7([mean_c(x); max_c(x)])).
template <class T>
struct SpatialGate {
  Conv2d<T> conv;

  static SpatialGate make(Rng& rng, std::size_t kernel = 7) {
    return {Conv2d<T>::make(2, 1, kernel, {.stride = 1, .padding = kernel / 2}, rng)};
  }

  /// [B,C,H,W] -> [B,1,H,W] gate in (0,1).
  Tensor<T> gate(const Tensor<T>& x) const {
    auto stats = concat<T>({mean(x, 1, true), max(x, 1, true)}, 1);
    return sigmoid(conv(stats));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    conv.visit(join_name(prefix, "conv"), f);
  }
};

template <class T>
Tensor<T> spatial_gate(const Tensor<T>& x, const SpatialGate<T>& sa) {
  return mul(x, sa.gate(x));
}

/// Produces the initial coordinators once per forward from a [B,C,H,W] map.
template <class T>
struct CoordinatorGenerator {
  SqueezeExcite<T> se;
  SpatialGate<T> sa;
  Mlp<T> proj;  // C -> 2C -> K*D
  std::size_t count = 0;
  std::size_t dim = 0;

  static CoordinatorGenerator make(std::size_t channels, std::size_t count, std::size_t dim, Rng& rng) {
    if (count == 0) throw ConfigError("coordinator count must be positive");
    CoordinatorGenerator g;
    g.se = SqueezeExcite<T>::make(channels, 4, rng);
    g.sa = SpatialGate<T>::make(rng);
    g.proj = Mlp<T>::make(channels, 2 * channels, count * dim, rng);
    g.count = count;
    g.dim = dim;
    return g;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    se.visit(join_name(prefix, "se"), f);
    sa.visit(join_name(prefix, "sa"), f);
    proj.visit(join_name(prefix, "proj"), f);
  }
};

template <class T>
Tensor<T> generate_coordinators(const Tensor<T>& features, const CoordinatorGenerator<T>& gen) {
  if (features.rank() != 4 || features.dim(1) != gen.se.fc1.in_features())
    throw ConfigError("generator expects [B," + std::to_string(gen.se.fc1.in_features()) + ",H,W] features, got " +
                      to_string(features.shape()));
  if (gen.proj.fc2.out_features() != gen.count * gen.dim)
    throw ConfigError("generator projection width " + std::to_string(gen.proj.fc2.out_features()) +
                      " does not equal K*D = " + std::to_string(gen.count * gen.dim));
  auto fused = mul(mul(features, gen.se.gate(features)), gen.sa.gate(features));
  auto g = gen.proj(global_avg_pool(fused));
  return reshape(g, {features.dim(0), gen.count, gen.dim});
}

/// Carries coordinators from one stage width to the next: a learnable query
/// bank of K tokens attends over the incoming coordinators, plus a linear
/// residual of the input.
template <class T>
struct TokenMerger {
  Tensor<T> queries;  // [K, D_out]
  Linear<T> k, v;     // D_in -> D_out
  Linear<T> residual;  // D_in -> D_out
  std::size_t heads = 1;

  static TokenMerger make(std::size_t count, std::size_t in_dim, std::size_t out_dim, std::size_t heads, Rng& rng) {
    if (heads == 0 || out_dim % heads != 0)
      throw ConfigError("token merge: width " + std::to_string(out_dim) + " not divisible by " +
                        std::to_string(heads) + " heads");
    TokenMerger m;
    m.queries = trunc_normal_param<T>({count, out_dim}, rng);
    m.k = Linear<T>::make(in_dim, out_dim, rng);
    m.v = Linear<T>::make(in_dim, out_dim, rng);
    m.residual = Linear<T>::make(in_dim, out_dim, rng);
    m.heads = heads;
    return m;
  }

  std::size_t in_dim() const { return k.in_features(); }
  std::size_t out_dim() const { return k.out_features(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "queries"), queries);
    k.visit(join_name(prefix, "k"), f);
    v.visit(join_name(prefix, "v"), f);
    residual.visit(join_name(prefix, "residual"), f);
  }
};

namespace detail {
template <class T>
void check_merge_input(const Tensor<T>& coords, const TokenMerger<T>& m) {
  if (coords.rank() != 3 || coords.dim(2) != m.in_dim())
    throw ConfigError("token merge expects coordinators of width " + std::to_string(m.in_dim()) + ", got " +
                      to_string(coords.shape()));
}
}  // namespace detail

/// Cross-attention part of the merge only (no residual).
template <class T>
Tensor<T> merge_attention(const Tensor<T>& coords, const TokenMerger<T>& m) {
  detail::check_merge_input(coords, m);
  const std::size_t b = coords.dim(0), kq = m.queries.dim(0), d = m.out_dim();
  const std::size_t hd = d / m.heads;
  auto q = detail::split_heads(expand(reshape(m.queries, {1, kq, d}), {b, kq, d}), m.heads);
  auto k = detail::split_heads(m.k(coords), m.heads);
  auto v = detail::split_heads(m.v(coords), m.heads);
  auto scores = scale(matmul(q, transpose(k, -1, -2)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
  return detail::merge_heads(matmul(softmax_rows(scores), v));
}

template <class T>
Tensor<T> token_merge(const Tensor<T>& coords, const TokenMerger<T>& m) {
  detail::check_merge_input(coords, m);
  auto attended = merge_attention(coords, m);
  return add(attended, m.residual(coords));
}

template <class T>
struct AnchorLossTerms {
  Tensor<T> diversity;
  Tensor<T> stability;
  Tensor<T> total;
};

inline constexpr double kDiversityWeight = 0.5;
inline constexpr double kStabilityWeight = 0.1;

/// diversity = mean over the batch of ||Gram(Ĝ) - I||_F^2 with Ĝ the
/// row-normalized K x K coordinators; stability = mean over the batch of
/// ||G - mean_batch(G)||_F^2. `normalize` = false uses the raw Gram.
template <class T>
AnchorLossTerms<T> anchor_loss(const Tensor<T>& coords, bool normalize = true) {
  if (coords.rank() != 3 || coords.dim(0) == 0)
    throw DimensionError("anchor loss expects [B,K,D] coordinators with B >= 1, got " + to_string(coords.shape()));
  const std::size_t b = coords.dim(0), k = coords.dim(1);
  const T inv_b = T(1) / static_cast<T>(b);
  auto g = coords;
  // 1e-24 vanishes next to any unit-scale squared norm, so unit rows divide by exactly 1
  if (normalize) g = div(coords, sqrt(add_scalar(sum(square(coords), 2, true), T(1e-24))));
  std::vector<T> eye(k * k, T(0));
  for (std::size_t i = 0; i < k; ++i) eye[i * k + i] = T(1);
  auto gram = matmul(g, transpose(g, 1, 2));
  auto diversity = scale(sum_all(square(sub(gram, Tensor<T>({k, k}, eye)))), inv_b);
  auto centered = sub(coords, mean(coords, 0, true));
  auto stability = scale(sum_all(square(centered)), inv_b);
  auto total = add(scale(diversity, T(kDiversityWeight)), scale(stability, T(kStabilityWeight)));
  return {diversity, stability, total};
}

}  // namespace coca
