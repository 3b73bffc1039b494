#pragma once

// Differentiable operations over Tensor<T>.
//
// The set is closed: matmul, conv2d, softmax/log-softmax, layer_norm, GELU,
// sigmoid, elementwise arithmetic with broadcasting, reductions and the
// layout ops (reshape, permute, concat, slice, expand, gather). Everything in
// the backbone is composed from these. Matmul and conv2d report their MACs to
// the active MacCounter.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <type_traits>
#include <string>
#include <vector>

#include "coca/numeric/tensor.hpp"

namespace coca {

namespace detail {

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da == db || db == 1)
      out[i] = da;
    else if (da == 1)
      out[i] = db;
    else
      throw DimensionError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable");
  }
  return out;
}

/// Strides of `in` viewed under the broadcast shape `out` (0 on broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  auto own = row_major_strides(in);
  std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i)
    st[i + off] = in[i] == 1 && out[i + off] != 1 ? 0 : own[i];
  return st;
}

/// Visits every position of `out` in row-major order, passing the linear
/// output index and the two strided input offsets.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = numel(out);
  if (total == 0) return;
  const std::size_t r = out.size();
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out[r - 1], a_in = sa[r - 1], b_in = sb[r - 1];
  const std::size_t outer = total / inner;
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0, i = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) f(i++, oa + j * a_in, ob + j * b_in);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  int r = static_cast<int>(rank);
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// outer x n x inner view around `axis`
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};
inline AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

template <class T, class Fwd, class GA, class GB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, GA ga, GB gb) {
  const bool same = a.shape() == b.shape();
  Shape out = same ? a.shape() : broadcast_shapes(a.shape(), b.shape());
  std::vector<T> y(numel(out));
  const auto& A = a.vec();
  const auto& B = b.vec();
  std::vector<std::size_t> sa, sb;
  if (same) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(A[i], B[i]);
  } else {
    sa = broadcast_strides(a.shape(), out);
    sb = broadcast_strides(b.shape(), out);
    for_each_broadcast(out, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = fwd(A[ia], B[ib]); });
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(name, out, std::move(y), {&a, &b},
                        [an, bn, same, sa, sb, ga, gb](const Node<T>& o) {
                          const auto& g = o.grad;
                          const auto& A = an->data;
                          const auto& B = bn->data;
                          const auto& Y = o.data;
                          if (an->requires_grad) {
                            auto& gA = an->ensure_grad();
                            if (same)
                              for (std::size_t i = 0; i < g.size(); ++i) gA[i] += g[i] * ga(A[i], B[i], Y[i]);
                            else
                              for_each_broadcast(o.shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                gA[ia] += g[i] * ga(A[ia], B[ib], Y[i]);
                              });
                          }
                          if (bn->requires_grad) {
                            auto& gB = bn->ensure_grad();
                            if (same)
                              for (std::size_t i = 0; i < g.size(); ++i) gB[i] += g[i] * gb(A[i], B[i], Y[i]);
                            else
                              for_each_broadcast(o.shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                gB[ib] += g[i] * gb(A[ia], B[ib], Y[i]);
                              });
                          }
                        });
}

// dy/dx expressed through x and y
template <class T, class Fwd, class Grad>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, Fwd fwd, Grad grad) {
  const auto& X = x.vec();
  std::vector<T> y(X.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(X[i]);
  auto xn = x.node_ptr();
  return make_result<T>(name, x.shape(), std::move(y), {&x}, [xn, grad](const Node<T>& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * grad(xn->data[i], o.data[i]);
  });
}

// C[MxN] += A[MxK] * B[KxN]
template <class T>
void gemm_nn(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (std::size_t p = 0; p < K; ++p) {
      const T av = a[p];
      const T* b = B + p * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// dA[MxK] += dC[MxN] * B[KxN]^T
template <class T>
void gemm_nt(const T* dC, const T* B, T* dA, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* g = dC + i * N;
    for (std::size_t p = 0; p < K; ++p) {
      const T* b = B + p * N;
      T s = 0;
      for (std::size_t j = 0; j < N; ++j) s += g[j] * b[j];
      dA[i * K + p] += s;
    }
  }
}

// dB[KxN] += A[MxK]^T * dC[MxN]
template <class T>
void gemm_tn(const T* A, const T* dC, T* dB, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* g = dC + i * N;
    for (std::size_t p = 0; p < K; ++p) {
      const T av = A[i * K + p];
      T* b = dB + p * N;
      for (std::size_t j = 0; j < N; ++j) b[j] += av * g[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy broadcasting)

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T q) { return -q / y; });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary_op<T>("scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary_op<T>("add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary_op<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary_op<T>("sqrt", x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary_op<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary_op<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

// ---------------------------------------------------------------------------
// Contraction

/// [.., m, k] x [.., k, n] -> [.., m, n] with broadcast leading extents.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k)
    throw DimensionError("matmul inner extents disagree: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Shape ba(a.shape().begin(), a.shape().end() - 2);
  Shape bb(b.shape().begin(), b.shape().end() - 2);
  Shape bo;
  try {
    bo = detail::broadcast_shapes(ba, bb);
  } catch (const DimensionError&) {
    throw DimensionError("matmul batch extents disagree: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t batches = numel(bo);
  Shape out = bo;
  out.push_back(m);
  out.push_back(n);
  std::vector<T> y(numel(out), T(0));
  record_macs(static_cast<std::uint64_t>(batches) * m * k * n);

  const bool flat_b = numel(bb) == 1 && numel(ba) == batches;
  // per-batch matrix offsets, in matrices
  std::vector<std::size_t> offa, offb;
  if (!flat_b) {
    auto sa = detail::broadcast_strides(ba, bo);
    auto sb = detail::broadcast_strides(bb, bo);
    offa.resize(batches);
    offb.resize(batches);
    detail::for_each_broadcast(bo, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      offa[i] = ia;
      offb[i] = ib;
    });
  }
  const T* A = a.vec().data();
  const T* B = b.vec().data();
  if (flat_b) {
    detail::gemm_nn(A, B, y.data(), batches * m, k, n);
  } else {
    for (std::size_t i = 0; i < batches; ++i)
      detail::gemm_nn(A + offa[i] * m * k, B + offb[i] * k * n, y.data() + i * m * n, m, k, n);
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::make_result<T>("matmul", out, std::move(y), {&a, &b},
                                [an, bn, m, k, n, batches, flat_b, offa, offb](const Node<T>& o) {
                                  const T* G = o.grad.data();
                                  if (an->requires_grad) {
                                    T* gA = an->ensure_grad().data();
                                    if (flat_b)
                                      detail::gemm_nt(G, bn->data.data(), gA, batches * m, k, n);
                                    else
                                      for (std::size_t i = 0; i < batches; ++i)
                                        detail::gemm_nt(G + i * m * n, bn->data.data() + offb[i] * k * n,
                                                        gA + offa[i] * m * k, m, k, n);
                                  }
                                  if (bn->requires_grad) {
                                    T* gB = bn->ensure_grad().data();
                                    if (flat_b)
                                      detail::gemm_tn(an->data.data(), G, gB, batches * m, k, n);
                                    else
                                      for (std::size_t i = 0; i < batches; ++i)
                                        detail::gemm_tn(an->data.data() + offa[i] * m * k, G + i * m * n,
                                                        gB + offb[i] * k * n, m, k, n);
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Layout

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw DimensionError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  auto xn = x.node_ptr();
  return detail::make_result<T>("reshape", std::move(shape), x.vec(), {&x}, [xn](const Node<T>& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
  });
}

/// out.shape[i] = x.shape[perm[i]]
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permutation rank mismatch for " + to_string(x.shape()));
  auto own = detail::row_major_strides(x.shape());
  Shape out(r);
  std::vector<std::size_t> st(r);
  std::vector<bool> used(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || used[perm[i]]) throw DimensionError("invalid permutation for " + to_string(x.shape()));
    used[perm[i]] = true;
    out[i] = x.shape()[perm[i]];
    st[i] = own[perm[i]];
  }
  std::vector<T> y(x.numel());
  const auto& X = x.vec();
  detail::for_each_broadcast(out, st, st, [&](std::size_t i, std::size_t ia, std::size_t) { y[i] = X[ia]; });
  auto xn = x.node_ptr();
  return detail::make_result<T>("permute", out, std::move(y), {&x}, [xn, st](const Node<T>& o) {
    auto& gx = xn->ensure_grad();
    detail::for_each_broadcast(o.shape, st, st, [&](std::size_t i, std::size_t ia, std::size_t) { gx[ia] += o.grad[i]; });
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x, int a0, int a1) {
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[detail::normalize_axis(a0, x.rank())], perm[detail::normalize_axis(a1, x.rank())]);
  return permute(x, perm);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw DimensionError("concat of zero tensors");
  const std::size_t r = xs[0].rank();
  const std::size_t ax = detail::normalize_axis(axis, r);
  Shape out = xs[0].shape();
  out[ax] = 0;
  for (const auto& x : xs) {
    if (x.rank() != r) throw DimensionError("concat rank mismatch: " + to_string(xs[0].shape()) + " vs " + to_string(x.shape()));
    for (std::size_t d = 0; d < r; ++d)
      if (d != ax && x.shape()[d] != xs[0].shape()[d])
        throw DimensionError("concat extent mismatch: " + to_string(xs[0].shape()) + " vs " + to_string(x.shape()));
    out[ax] += x.shape()[ax];
  }
  auto v = detail::axis_view(out, ax);
  std::vector<T> y(numel(out));
  std::vector<std::size_t> widths;
  std::size_t col = 0;
  for (const auto& x : xs) {
    const std::size_t w = x.shape()[ax] * v.inner;
    const auto& X = x.vec();
    for (std::size_t o = 0; o < v.outer; ++o)
      std::copy(X.begin() + o * w, X.begin() + (o + 1) * w, y.begin() + o * v.n * v.inner + col);
    widths.push_back(w);
    col += w;
  }
  std::vector<typename Tensor<T>::NodePtr> nodes;
  for (const auto& x : xs) nodes.push_back(x.node_ptr());
  return detail::make_result<T>("concat", out, std::move(y), xs, [nodes, widths, v](const Node<T>& o) {
    std::size_t col = 0;
    for (std::size_t t = 0; t < nodes.size(); ++t) {
      const std::size_t w = widths[t];
      if (nodes[t]->requires_grad) {
        auto& g = nodes[t]->ensure_grad();
        for (std::size_t oo = 0; oo < v.outer; ++oo)
          for (std::size_t j = 0; j < w; ++j) g[oo * w + j] += o.grad[oo * v.n * v.inner + col + j];
      }
      col += w;
    }
  });
}

/// Elements [start, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start, std::size_t end) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  if (start > end || end > x.shape()[ax])
    throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(end) + ") out of range for " +
                         to_string(x.shape()));
  auto v = detail::axis_view(x.shape(), ax);
  Shape out = x.shape();
  out[ax] = end - start;
  const std::size_t w = (end - start) * v.inner;
  std::vector<T> y(numel(out));
  const auto& X = x.vec();
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy(X.begin() + o * v.n * v.inner + start * v.inner, X.begin() + o * v.n * v.inner + start * v.inner + w,
              y.begin() + o * w);
  auto xn = x.node_ptr();
  return detail::make_result<T>("slice", out, std::move(y), {&x}, [xn, v, w, start](const Node<T>& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t oo = 0; oo < v.outer; ++oo)
      for (std::size_t j = 0; j < w; ++j) gx[oo * v.n * v.inner + start * v.inner + j] += o.grad[oo * w + j];
  });
}

/// Broadcast to `shape` (numpy rules).
template <class T>
Tensor<T> expand(const Tensor<T>& x, const Shape& shape) {
  Shape out = detail::broadcast_shapes(x.shape(), shape);
  if (out != shape) throw DimensionError("cannot expand " + to_string(x.shape()) + " to " + to_string(shape));
  auto st = detail::broadcast_strides(x.shape(), out);
  std::vector<T> y(numel(out));
  const auto& X = x.vec();
  detail::for_each_broadcast(out, st, st, [&](std::size_t i, std::size_t ia, std::size_t) { y[i] = X[ia]; });
  auto xn = x.node_ptr();
  return detail::make_result<T>("expand", out, std::move(y), {&x}, [xn, st](const Node<T>& o) {
    auto& gx = xn->ensure_grad();
    detail::for_each_broadcast(o.shape, st, st, [&](std::size_t i, std::size_t ia, std::size_t) { gx[ia] += o.grad[i]; });
  });
}

/// Rows of `x` (axis 0) picked by `index`; out shape [index.size(), x.shape[1:]...].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& index) {
  const std::size_t rows = x.dim(0), w = x.numel() / std::max<std::size_t>(rows, 1);
  Shape out = x.shape();
  out[0] = index.size();
  std::vector<T> y(numel(out));
  const auto& X = x.vec();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) throw DimensionError("gather index out of range");
    std::copy(X.begin() + index[i] * w, X.begin() + (index[i] + 1) * w, y.begin() + i * w);
  }
  auto xn = x.node_ptr();
  return detail::make_result<T>("gather", out, std::move(y), {&x}, [xn, index, w](const Node<T>& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < w; ++j) gx[index[i] * w + j] += o.grad[i * w + j];
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  auto v = detail::axis_view(x.shape(), ax);
  Shape out = x.shape();
  if (keepdim)
    out[ax] = 1;
  else
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<T> y(v.outer * v.inner, T(0));
  const auto& X = x.vec();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.n; ++i)
      for (std::size_t j = 0; j < v.inner; ++j) y[o * v.inner + j] += X[(o * v.n + i) * v.inner + j];
  auto xn = x.node_ptr();
  return detail::make_result<T>("sum", out, std::move(y), {&x}, [xn, v](const Node<T>& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t oo = 0; oo < v.outer; ++oo)
      for (std::size_t i = 0; i < v.n; ++i)
        for (std::size_t j = 0; j < v.inner; ++j) gx[(oo * v.n + i) * v.inner + j] += o.grad[oo * v.inner + j];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t n = x.dim(axis);
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(n));
}

template <class T>
Tensor<T> max(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  auto v = detail::axis_view(x.shape(), ax);
  if (v.n == 0) throw DimensionError("max over empty axis of " + to_string(x.shape()));
  Shape out = x.shape();
  if (keepdim)
    out[ax] = 1;
  else
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<T> y(v.outer * v.inner);
  std::vector<std::size_t> arg(y.size());
  const auto& X = x.vec();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < v.inner; ++j) {
      std::size_t best = (o * v.n) * v.inner + j;
      for (std::size_t i = 1; i < v.n; ++i) {
        std::size_t p = (o * v.n + i) * v.inner + j;
        if (X[p] > X[best]) best = p;
      }
      y[o * v.inner + j] = X[best];
      arg[o * v.inner + j] = best;
    }
  auto xn = x.node_ptr();
  return detail::make_result<T>("max", out, std::move(y), {&x}, [xn, arg](const Node<T>& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += o.grad[i];
  });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.vec()) s += v;
  auto xn = x.node_ptr();
  return detail::make_result<T>("sum_all", {}, {s}, {&x}, [xn](const Node<T>& o) {
    auto& gx = xn->ensure_grad();
    for (auto& g : gx) g += o.grad[0];
  });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax over the last axis, stabilized by row-max subtraction.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() == 0 || x.dim(-1) == 0) throw DimensionError("softmax_rows needs a non-empty last axis");
  const std::size_t n = x.dim(-1), rows = x.numel() / n;
  std::vector<T> y(x.numel());
  const auto& X = x.vec();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = X.data() + r * n;
    T* yr = y.data() + r * n;
    T mx = xr[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= s;
  }
  auto xn = x.node_ptr();
  return detail::make_result<T>("softmax", x.shape(), std::move(y), {&x}, [xn, n, rows](const Node<T>& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = o.data.data() + r * n;
      const T* gr = o.grad.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  if (x.rank() == 0 || x.dim(-1) == 0) throw DimensionError("log_softmax_rows needs a non-empty last axis");
  const std::size_t n = x.dim(-1), rows = x.numel() / n;
  std::vector<T> y(x.numel());
  const auto& X = x.vec();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = X.data() + r * n;
    T mx = xr[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(xr[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = xr[j] - lse;
  }
  auto xn = x.node_ptr();
  return detail::make_result<T>("log_softmax", x.shape(), std::move(y), {&x}, [xn, n, rows](const Node<T>& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = o.data.data() + r * n;
      const T* gr = o.grad.data() + r * n;
      T gs = 0;
      for (std::size_t j = 0; j < n; ++j) gs += gr[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += gr[j] - std::exp(yr[j]) * gs;
    }
  });
}

/// Normalizes over the last axis, then applies gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t c = x.dim(-1);
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("layer_norm affine extents " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                         " do not match " + to_string(x.shape()));
  if (!(eps > 0)) throw ConfigError("layer_norm eps must be positive");
  const std::size_t rows = x.numel() / std::max<std::size_t>(c, 1);
  std::vector<T> y(x.numel()), xhat(x.numel()), rstd(rows);
  const auto& X = x.vec();
  const auto& Gm = gamma.vec();
  const auto& Bt = beta.vec();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = X.data() + r * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xr[j] - mu) * rs;
      xhat[r * c + j] = h;
      y[r * c + j] = h * Gm[j] + Bt[j];
    }
  }
  auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(y), {&x, &gamma, &beta},
      [xn, gn, bn, xhat = std::move(xhat), rstd = std::move(rstd), c, rows](const Node<T>& o) {
        const auto& G = o.grad;
        if (gn->requires_grad) {
          auto& gg = gn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gg[j] += G[r * c + j] * xhat[r * c + j];
        }
        if (bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gb[j] += G[r * c + j];
        }
        if (xn->requires_grad) {
          auto& gx = xn->ensure_grad();
          const auto& Gm = gn->data;
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const T d = G[r * c + j] * Gm[j];
              m1 += d;
              m2 += d * xhat[r * c + j];
            }
            m1 /= static_cast<T>(c);
            m2 /= static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j)
              gx[r * c + j] += rstd[r] * (G[r * c + j] * Gm[j] - m1 - xhat[r * c + j] * m2);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// Cross-correlation. x [B,C,H,W], w [Co, C/groups, kh, kw], optional bias [Co].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::type_identity_t<const Tensor<T>*> bias,
                 Conv2dOptions opt) {
  if (x.rank() != 4 || w.rank() != 4)
    throw DimensionError("conv2d expects [B,C,H,W] input and [Co,Ci,k,k] weight, got " + to_string(x.shape()) +
                         " and " + to_string(w.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), Ci = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  const std::size_t g = opt.groups, s = opt.stride, p = opt.padding;
  if (g == 0 || s == 0) throw ConfigError("conv2d stride and groups must be positive");
  if (Ci * g != C || Co % g != 0)
    throw ConfigError("conv2d group factorization invalid: input channels " + std::to_string(C) + ", weight " +
                      to_string(w.shape()) + ", groups " + std::to_string(g));
  if (H + 2 * p < KH || W + 2 * p < KW)
    throw DimensionError("conv2d kernel larger than padded input " + to_string(x.shape()));
  if (bias && bias->numel() != Co) throw DimensionError("conv2d bias extent mismatch");
  const std::size_t Ho = (H + 2 * p - KH) / s + 1, Wo = (W + 2 * p - KW) / s + 1;
  const std::size_t cog = Co / g;
  record_macs(static_cast<std::uint64_t>(B) * Co * Ho * Wo * Ci * KH * KW);

  // valid output column range for each kernel column
  std::vector<std::size_t> ow_lo(KW), ow_hi(KW);
  for (std::size_t kw = 0; kw < KW; ++kw) {
    std::size_t lo = kw >= p ? 0 : (p - kw + s - 1) / s;
    std::size_t hi = W + p > kw ? std::min(Wo, (W + p - kw - 1) / s + 1) : 0;
    ow_lo[kw] = lo;
    ow_hi[kw] = std::max(lo, hi);
  }
  auto row_ok = [=](std::size_t oh, std::size_t kh, std::size_t& ih) {
    std::ptrdiff_t r = static_cast<std::ptrdiff_t>(oh * s + kh) - static_cast<std::ptrdiff_t>(p);
    if (r < 0 || r >= static_cast<std::ptrdiff_t>(H)) return false;
    ih = static_cast<std::size_t>(r);
    return true;
  };

  std::vector<T> y(B * Co * Ho * Wo, T(0));
  const T* X = x.vec().data();
  const T* Wt = w.vec().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co) {
      T* yp = y.data() + (b * Co + co) * Ho * Wo;
      if (bias) std::fill(yp, yp + Ho * Wo, bias->vec()[co]);
      const std::size_t grp = co / cog;
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const T* xp = X + (b * C + grp * Ci + ci) * H * W;
        for (std::size_t kh = 0; kh < KH; ++kh)
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const T wv = Wt[((co * Ci + ci) * KH + kh) * KW + kw];
            for (std::size_t oh = 0; oh < Ho; ++oh) {
              std::size_t ih;
              if (!row_ok(oh, kh, ih)) continue;
              const T* xr = xp + ih * W;
              T* yr = yp + oh * Wo;
              for (std::size_t ow = ow_lo[kw]; ow < ow_hi[kw]; ++ow) yr[ow] += wv * xr[ow * s + kw - p];
            }
          }
      }
    }

  auto xn = x.node_ptr(), wn = w.node_ptr();
  typename Tensor<T>::NodePtr bn = bias ? bias->node_ptr() : nullptr;
  std::function<void(const Node<T>&)> bwd = [=](const Node<T>& o) {
    const T* G = o.grad.data();
    const T* X = xn->data.data();
    const T* Wt = wn->data.data();
    T* gX = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
    T* gW = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
    if (bn && bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Co; ++co) {
          const T* gp = G + (b * Co + co) * Ho * Wo;
          T acc = 0;
          for (std::size_t i = 0; i < Ho * Wo; ++i) acc += gp[i];
          gb[co] += acc;
        }
    }
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t co = 0; co < Co; ++co) {
        const T* gp = G + (b * Co + co) * Ho * Wo;
        const std::size_t grp = co / cog;
        for (std::size_t ci = 0; ci < Ci; ++ci) {
          const std::size_t xoff = (b * C + grp * Ci + ci) * H * W;
          for (std::size_t kh = 0; kh < KH; ++kh)
            for (std::size_t kw = 0; kw < KW; ++kw) {
              const std::size_t widx = ((co * Ci + ci) * KH + kh) * KW + kw;
              const T wv = Wt[widx];
              T gw = 0;
              for (std::size_t oh = 0; oh < Ho; ++oh) {
                std::size_t ih;
                if (!row_ok(oh, kh, ih)) continue;
                const T* gr = gp + oh * Wo;
                const std::size_t rowoff = xoff + ih * W + kw - p;
                if (gX)
                  for (std::size_t ow = ow_lo[kw]; ow < ow_hi[kw]; ++ow) gX[rowoff + ow * s] += wv * gr[ow];
                if (gW)
                  for (std::size_t ow = ow_lo[kw]; ow < ow_hi[kw]; ++ow) gw += gr[ow] * X[rowoff + ow * s];
              }
              if (gW) gW[widx] += gw;
            }
        }
      }
  };
  Shape out{B, Co, Ho, Wo};
  if (bias) return detail::make_result<T>("conv2d", out, std::move(y), {&x, &w, bias}, bwd);
  return detail::make_result<T>("conv2d", out, std::move(y), {&x, &w}, bwd);
}

/// [B,C,H,W] -> [B,C] spatial mean.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool expects [B,C,H,W], got " + to_string(x.shape()));
  if (x.dim(2) == 0 || x.dim(3) == 0) throw DimensionError("global_avg_pool on empty spatial extent");
  return mean(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2);
}

}  // namespace coca
