#pragma once

// Convolutional and feed-forward blocks of the backbone.

#include <string>

#include "coca/coordinator/coordinator.hpp"

namespace coca {

/// NCHW <-> NHWC.
template <class T>
Tensor<T> to_grid(const Tensor<T>& map) {
  return permute(map, {0, 2, 3, 1});
}
template <class T>
Tensor<T> to_map(const Tensor<T>& grid) {
  return permute(grid, {0, 3, 1, 2});
}

/// Inverted residual: x + project(SE(GELU(dw3x3(GELU(expand(LN(x))))))).
template <class T>
struct MbConv {
  LayerNorm<T> norm;
  Conv2d<T> expand;
  Conv2d<T> dw;
  SqueezeExcite<T> se;
  Conv2d<T> project;

  static MbConv make(std::size_t channels, std::size_t ratio, Rng& rng) {
    const std::size_t e = channels * ratio;
    MbConv m;
    m.norm = LayerNorm<T>::make(channels);
    m.expand = Conv2d<T>::make(channels, e, 1, {}, rng);
    m.dw = Conv2d<T>::make(e, e, 3, {.stride = 1, .padding = 1, .groups = e}, rng);
    m.se = SqueezeExcite<T>::make(e, 4, rng);
    m.project = Conv2d<T>::make(e, channels, 1, {}, rng);
    return m;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(join_name(prefix, "norm"), f);
    expand.visit(join_name(prefix, "expand"), f);
    dw.visit(join_name(prefix, "dw"), f);
    se.visit(join_name(prefix, "se"), f);
    project.visit(join_name(prefix, "project"), f);
  }
};

template <class T>
Tensor<T> mbconv_block(const Tensor<T>& x, const MbConv<T>& m) {
  if (x.rank() != 4 || x.dim(1) != m.norm.gamma.numel())
    throw ConfigError("mbconv expects [B," + std::to_string(m.norm.gamma.numel()) + ",H,W], got " +
                      to_string(x.shape()));
  auto y = gelu(m.expand(channel_norm(x, m.norm)));
  y = se_recalibrate(gelu(m.dw(y)), m.se);
  return add(x, m.project(y));
}

/// Gated feed-forward on a [B,h,w,C] grid: fc1 to r*C, split in halves,
/// x + fc2(a * GELU(dw3x3(b))).
template <class T>
struct ConvGlu {
  LayerNorm<T> norm;
  Linear<T> fc1;
  Conv2d<T> dw;
  Linear<T> fc2;

  static ConvGlu make(std::size_t channels, std::size_t ratio, Rng& rng) {
    const std::size_t hidden = channels * ratio;
    if (hidden == 0 || hidden % 2 != 0)
      throw ConfigError("ConvGLU hidden width " + std::to_string(hidden) + " must be positive and even");
    const std::size_t half = hidden / 2;
    ConvGlu g;
    g.norm = LayerNorm<T>::make(channels);
    g.fc1 = Linear<T>::make(channels, hidden, rng);
    g.dw = Conv2d<T>::make(half, half, 3, {.stride = 1, .padding = 1, .groups = half}, rng);
    g.fc2 = Linear<T>::make(half, channels, rng);
    return g;
  }

  std::size_t hidden() const { return fc1.out_features(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(join_name(prefix, "norm"), f);
    fc1.visit(join_name(prefix, "fc1"), f);
    dw.visit(join_name(prefix, "dw"), f);
    fc2.visit(join_name(prefix, "fc2"), f);
  }
};

template <class T>
Tensor<T> conv_glu(const Tensor<T>& x, const ConvGlu<T>& g) {
  if (x.rank() != 4 || x.dim(3) != g.fc1.in_features())
    throw ConfigError("ConvGLU expects [B,h,w," + std::to_string(g.fc1.in_features()) + "], got " +
                      to_string(x.shape()));
  const std::size_t half = g.hidden() / 2;
  auto y = g.fc1(g.norm(x));
  auto value = slice(y, 3, 0, half);
  auto gate = gelu(to_grid(g.dw(to_map(slice(y, 3, half, 2 * half)))));
  return add(x, g.fc2(mul(value, gate)));
}

}  // namespace coca
