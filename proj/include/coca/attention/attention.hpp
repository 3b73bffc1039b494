#pragma once

// Multi-head window self-attention (WSA), coordinator cross-attention (GGCA)
// and coordinator-augmented window attention (GCWA).
//
// The *_attention functions are the raw operators: projections, scaled
// dot-product attention and the output projection, nothing else. The layer
// structs wrap them with pre-norms and residuals as used inside blocks.
//
// MAC accounting follows from the structure: coordinators are projected once
// per image and broadcast to every window, so an isolated GCWA costs
// 4hwC^2 + 2KC^2 + 2ThwC + 2KhwC exactly.

#include <cmath>
#include <string>
#include <vector>

#include "coca/attention/window.hpp"
#include "coca/numeric/layers.hpp"

namespace coca {

template <class T>
struct AttentionWeights {
  Linear<T> q, k, v, o;
  Tensor<T> rel_bias;  // [(2M-1)^2, heads]; undefined when there is no window geometry
  std::size_t heads = 1;
  std::size_t head_dim = 0;
  std::size_t window_side = 0;

  /// `window_side` > 0 allocates the relative position bias table.
  static AttentionWeights make(std::size_t dim, std::size_t heads, Rng& rng, std::size_t window_side = 0) {
    if (heads == 0 || dim % heads != 0)
      throw ConfigError("attention dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                        " heads");
    AttentionWeights a;
    a.q = Linear<T>::make(dim, dim, rng);
    a.k = Linear<T>::make(dim, dim, rng);
    a.v = Linear<T>::make(dim, dim, rng);
    a.o = Linear<T>::make(dim, dim, rng);
    a.heads = heads;
    a.head_dim = dim / heads;
    a.window_side = window_side;
    if (window_side > 0) {
      const std::size_t span = 2 * window_side - 1;
      a.rel_bias = trunc_normal_param<T>({span * span, heads}, rng);
    }
    return a;
  }

  std::size_t dim() const { return heads * head_dim; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    q.visit(join_name(prefix, "q"), f);
    k.visit(join_name(prefix, "k"), f);
    v.visit(join_name(prefix, "v"), f);
    o.visit(join_name(prefix, "o"), f);
    if (rel_bias.defined()) f(join_name(prefix, "rel_bias"), rel_bias);
  }
};

namespace detail {

template <class T>
void check_attention_dim(const AttentionWeights<T>& w, std::size_t c, const char* what) {
  if (c != w.dim())
    throw ConfigError(std::string(what) + " channel dim " + std::to_string(c) + " does not match attention dim " +
                      std::to_string(w.dim()) + " (" + std::to_string(w.heads) + " heads x " +
                      std::to_string(w.head_dim) + ")");
}

/// [.., N, C] -> [.., heads, N, head_dim] for rank-3 or rank-4 inputs.
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  Shape s = x.shape();
  const std::size_t c = s.back();
  s.back() = heads;
  s.push_back(c / heads);
  auto y = reshape(x, s);
  if (s.size() == 4) return permute(y, {0, 2, 1, 3});
  return permute(y, {0, 1, 3, 2, 4});
}

/// Inverse of split_heads.
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const std::size_t r = x.rank();
  auto y = r == 4 ? permute(x, {0, 2, 1, 3}) : permute(x, {0, 1, 3, 2, 4});
  Shape s = y.shape();
  const std::size_t hd = s.back();
  s.pop_back();
  s.back() *= hd;
  return reshape(y, s);
}

inline std::vector<std::size_t> relative_index(std::size_t side) {
  const std::size_t t = side * side, span = 2 * side - 1;
  std::vector<std::size_t> idx(t * t);
  for (std::size_t a = 0; a < t; ++a)
    for (std::size_t b = 0; b < t; ++b) {
      const std::size_t dr = a / side + side - 1 - b / side;
      const std::size_t dc = a % side + side - 1 - b % side;
      idx[a * t + b] = dr * span + dc;
    }
  return idx;
}

/// Patch-patch bias [heads, T, T] followed by `extra` zero columns.
template <class T>
Tensor<T> window_bias(const AttentionWeights<T>& w, std::size_t extra) {
  const std::size_t side = w.window_side, t = side * side;
  auto b = gather_rows(w.rel_bias, relative_index(side));  // [T*T, heads]
  b = permute(reshape(b, {t, t, w.heads}), {2, 0, 1});
  if (extra > 0) b = concat<T>({b, Tensor<T>::zeros({w.heads, t, extra})}, 2);
  return b;
}

}  // namespace detail

/// Window attention over windows [B*nW, T, C]; `coords` ([B, K, C], may be
/// undefined) extends every window's keys and values of image b with the K
/// coordinators of image b. `key_mask` is an additive [nW, 1, 1, T+K] mask.
template <class T>
Tensor<T> window_attention_core(const Tensor<T>& windows, const Tensor<T>* coords, const AttentionWeights<T>& w,
                                const Tensor<T>* key_mask, std::size_t windows_per_image) {
  if (windows.rank() != 3) throw DimensionError("window attention expects [B*nW,T,C], got " + to_string(windows.shape()));
  const std::size_t bw = windows.dim(0), t = windows.dim(1), c = windows.dim(2);
  detail::check_attention_dim(w, c, "window");
  if (w.window_side > 0 && w.window_side * w.window_side != t)
    throw ConfigError("window of " + std::to_string(t) + " tokens does not match attention window side " +
                      std::to_string(w.window_side));
  std::size_t b = 1, nw = bw;
  if (coords) {
    if (coords->rank() != 3 || coords->dim(2) != c)
      throw ConfigError("coordinator shape " + to_string(coords->shape()) + " does not match window channels " +
                        std::to_string(c));
    b = coords->dim(0);
    if (b == 0 || bw % b != 0)
      throw DimensionError(std::to_string(bw) + " windows cannot be split over a batch of " + std::to_string(b));
    nw = bw / b;
  } else if (windows_per_image > 0) {
    if (bw % windows_per_image != 0)
      throw DimensionError(std::to_string(bw) + " windows are not a multiple of " + std::to_string(windows_per_image));
    nw = windows_per_image;
    b = bw / nw;
  }
  const std::size_t h = w.heads, hd = w.head_dim;
  auto to5 = [&](const Tensor<T>& x) { return detail::split_heads(reshape(x, {b, nw, t, c}), h); };
  auto q = to5(w.q(windows));
  auto k = to5(w.k(windows));
  auto v = to5(w.v(windows));
  std::size_t extra = 0;
  if (coords) {
    extra = coords->dim(1);
    auto kc = detail::split_heads(reshape(w.k(*coords), {b, 1, extra, c}), h);
    auto vc = detail::split_heads(reshape(w.v(*coords), {b, 1, extra, c}), h);
    k = concat<T>({k, expand(kc, {b, nw, h, extra, hd})}, 3);
    v = concat<T>({v, expand(vc, {b, nw, h, extra, hd})}, 3);
  }
  auto scores = scale(matmul(q, transpose(k, -1, -2)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
  if (w.rel_bias.defined()) scores = add(scores, detail::window_bias(w, extra));
  if (key_mask && key_mask->defined()) scores = add(scores, *key_mask);
  auto out = matmul(softmax_rows(scores), v);  // [b, nw, h, t, hd]
  return w.o(reshape(detail::merge_heads(out), {bw, t, c}));
}

/// Plain window self-attention; windows never exchange information.
template <class T>
Tensor<T> wsa(const Tensor<T>& windows, const AttentionWeights<T>& w, const Tensor<T>* key_mask = nullptr,
              std::size_t windows_per_image = 0) {
  return window_attention_core<T>(windows, nullptr, w, key_mask, windows_per_image);
}

/// Window attention whose keys/values are augmented with coordinators G' [B,K,C].
template <class T>
Tensor<T> gcwa_attention(const Tensor<T>& windows, const Tensor<T>& coords, const AttentionWeights<T>& w,
                         const Tensor<T>* key_mask = nullptr) {
  return window_attention_core(windows, &coords, w, key_mask, 0);
}

/// Coordinators [B,K,C] query the concatenation of coordinator and patch
/// tokens [B,N,C]; returns updated coordinator features [B,K,C].
template <class T>
Tensor<T> ggca_attention(const Tensor<T>& patches, const Tensor<T>& coords, const AttentionWeights<T>& w) {
  if (patches.rank() != 3 || coords.rank() != 3)
    throw DimensionError("ggca expects [B,N,C] patches and [B,K,C] coordinators, got " + to_string(patches.shape()) +
                         " and " + to_string(coords.shape()));
  const std::size_t b = patches.dim(0), c = patches.dim(2), kc = coords.dim(1);
  if (coords.dim(2) != c)
    throw ConfigError("coordinator dim " + std::to_string(coords.dim(2)) + " does not match patch dim " +
                      std::to_string(c));
  if (coords.dim(0) != b) throw DimensionError("coordinator batch does not match patch batch");
  if (kc == 0) throw ConfigError("ggca needs at least one coordinator");
  detail::check_attention_dim(w, c, "ggca");
  const std::size_t h = w.heads;
  auto tokens = concat<T>({coords, patches}, 1);  // [B, K+N, C]
  auto q = detail::split_heads(w.q(coords), h);
  auto k = detail::split_heads(w.k(tokens), h);
  auto v = detail::split_heads(w.v(tokens), h);
  auto scores = scale(matmul(q, transpose(k, -1, -2)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(w.head_dim))));
  auto out = matmul(softmax_rows(scores), v);
  return w.o(detail::merge_heads(out));
}

// ---------------------------------------------------------------------------
// Block-level layers over patch grids [B, h, w, C]

/// x + WSA(LN(x)) with padding to the window side and cropping back.
template <class T>
struct WsaLayer {
  LayerNorm<T> norm;
  AttentionWeights<T> attn;

  static WsaLayer make(std::size_t dim, std::size_t heads, std::size_t side, Rng& rng) {
    return {LayerNorm<T>::make(dim), AttentionWeights<T>::make(dim, heads, rng, side)};
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(join_name(prefix, "norm"), f);
    attn.visit(join_name(prefix, "attn"), f);
  }
};

template <class T>
struct GcwaLayer {
  LayerNorm<T> norm;
  LayerNorm<T> norm_coords;
  AttentionWeights<T> attn;

  static GcwaLayer make(std::size_t dim, std::size_t heads, std::size_t side, Rng& rng) {
    return {LayerNorm<T>::make(dim), LayerNorm<T>::make(dim), AttentionWeights<T>::make(dim, heads, rng, side)};
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(join_name(prefix, "norm"), f);
    norm_coords.visit(join_name(prefix, "norm_coords"), f);
    attn.visit(join_name(prefix, "attn"), f);
  }
};

/// G' = G + Attn(LN(G), LN(P)); then G' + MLP(LN(G')) when the MLP is present.
template <class T>
struct GgcaLayer {
  LayerNorm<T> norm_coords;
  LayerNorm<T> norm_patches;
  AttentionWeights<T> attn;
  LayerNorm<T> norm_mlp;
  Mlp<T> mlp;  // fc1 undefined when mlp_ratio is 0

  static GgcaLayer make(std::size_t dim, std::size_t heads, std::size_t mlp_ratio, Rng& rng) {
    GgcaLayer g{LayerNorm<T>::make(dim), LayerNorm<T>::make(dim), AttentionWeights<T>::make(dim, heads, rng), {}, {}};
    if (mlp_ratio > 0) {
      g.norm_mlp = LayerNorm<T>::make(dim);
      g.mlp = Mlp<T>::make(dim, dim * mlp_ratio, dim, rng);
    }
    return g;
  }

  bool has_mlp() const { return mlp.fc1.weight.defined(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm_coords.visit(join_name(prefix, "norm_coords"), f);
    norm_patches.visit(join_name(prefix, "norm_patches"), f);
    attn.visit(join_name(prefix, "attn"), f);
    if (has_mlp()) {
      norm_mlp.visit(join_name(prefix, "norm_mlp"), f);
      mlp.visit(join_name(prefix, "mlp"), f);
    }
  }
};

struct GcwaOptions {
  /// Hide the coordinator keys entirely (additive -inf-like mask).
  bool mask_coordinators = false;
};

namespace detail {
template <class T>
void check_grid(const Tensor<T>& x, const char* what) {
  if (x.rank() != 4) throw DimensionError(std::string(what) + " expects a [B,h,w,C] grid, got " + to_string(x.shape()));
}

template <class T>
Tensor<T> windowed_residual(const Tensor<T>& x, const LayerNorm<T>& norm, const AttentionWeights<T>& attn,
                            const Tensor<T>* coords, bool mask_coords) {
  const std::size_t h = x.dim(1), w = x.dim(2);
  const std::size_t side = attn.window_side;
  if (side == 0) throw ConfigError("window attention weights carry no window side");
  const std::size_t hp = round_up(h, side), wp = round_up(w, side);
  auto windows = window_partition(pad_grid(norm(x), side), side);
  const std::size_t extra = coords ? coords->dim(1) : 0;
  auto mask = window_key_mask<T>(h, w, side, extra, mask_coords);
  const Tensor<T>* mp = mask.defined() ? &mask : nullptr;
  const std::size_t nw = (hp / side) * (wp / side);
  auto y = coords ? window_attention_core(windows, coords, attn, mp, 0) : wsa(windows, attn, mp, nw);
  return add(x, crop_grid(window_reverse(y, hp, wp), h, w));
}
}  // namespace detail

template <class T>
Tensor<T> wsa_layer(const Tensor<T>& x, const WsaLayer<T>& layer) {
  detail::check_grid(x, "wsa");
  LayerScope scope("wsa");
  return detail::windowed_residual<T>(x, layer.norm, layer.attn, nullptr, false);
}

template <class T>
struct GgcaOutput {
  Tensor<T> patches;  // the input grid, untouched
  Tensor<T> coords;
};

template <class T>
GgcaOutput<T> ggca(const Tensor<T>& x, const Tensor<T>& coords, const GgcaLayer<T>& layer) {
  detail::check_grid(x, "ggca");
  if (coords.rank() != 3 || coords.dim(2) != x.dim(3))
    throw ConfigError("coordinator shape " + to_string(coords.shape()) + " does not match patch grid " +
                      to_string(x.shape()));
  Tensor<T> g;
  {
    LayerScope scope("ggca");
    auto p = reshape(layer.norm_patches(x), {x.dim(0), x.dim(1) * x.dim(2), x.dim(3)});
    g = add(coords, ggca_attention(p, layer.norm_coords(coords), layer.attn));
  }
  if (layer.has_mlp()) {
    LayerScope scope("ggca_mlp");
    g = add(g, layer.mlp(layer.norm_mlp(g)));
  }
  return {x, g};
}

template <class T>
Tensor<T> gcwa(const Tensor<T>& x, const Tensor<T>& coords, const GcwaLayer<T>& layer, GcwaOptions opt = {}) {
  detail::check_grid(x, "gcwa");
  if (coords.rank() != 3 || coords.dim(2) != x.dim(3))
    throw ConfigError("coordinator shape " + to_string(coords.shape()) + " does not match patch grid " +
                      to_string(x.shape()));
  LayerScope scope("gcwa");
  auto g = layer.norm_coords(coords);
  return detail::windowed_residual(x, layer.norm, layer.attn, &g, opt.mask_coordinators);
}

}  // namespace coca
