#pragma once

// Parameterized building blocks shared by every module: linear maps,
// convolutions and layer norms, plus the parameter visitation protocol.
//
// Every parameter-owning struct provides
//   template <class F> void visit(const std::string& prefix, F&& f)
// calling f(name, tensor) for each parameter in a fixed order. Counting,
// optimization and checkpointing all go through visit().

#include <string>
#include <vector>

#include "coca/numeric/ops.hpp"
#include "coca/numeric/rng.hpp"

namespace coca {

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// Truncated normal init, std 0.02 clipped at two standard deviations.
template <class T>
Tensor<T> trunc_normal_param(const Shape& shape, Rng& rng, double stddev = 0.02) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(stddev, 2.0));
  return Tensor<T>(shape, std::move(v), true);
}

template <class T>
Tensor<T> zeros_param(const Shape& shape) {
  return Tensor<T>::zeros(shape, true);
}

template <class T>
Tensor<T> ones_param(const Shape& shape) {
  return Tensor<T>::ones(shape, true);
}

/// y = x W + b with W stored [in, out].
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;  // may be undefined

  static Linear make(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
    Linear l;
    l.weight = trunc_normal_param<T>({in, out}, rng);
    if (with_bias) l.bias = zeros_param<T>({out});
    return l;
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "weight"), weight);
    if (bias.defined()) f(join_name(prefix, "bias"), bias);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-5);

  static LayerNorm make(std::size_t c) { return {ones_param<T>({c}), zeros_param<T>({c}), T(1e-5)}; }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "gamma"), gamma);
    f(join_name(prefix, "beta"), beta);
  }
};

/// LayerNorm over the channel axis of an NCHW map.
template <class T>
Tensor<T> channel_norm(const Tensor<T>& x, const LayerNorm<T>& norm) {
  return permute(norm(permute(x, {0, 2, 3, 1})), {0, 3, 1, 2});
}

template <class T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;  // may be undefined
  Conv2dOptions options;

  static Conv2d make(std::size_t in, std::size_t out, std::size_t k, Conv2dOptions opt, Rng& rng,
                     bool with_bias = true) {
    Conv2d c;
    if (opt.groups == 0 || in % opt.groups != 0 || out % opt.groups != 0)
      throw ConfigError("conv groups " + std::to_string(opt.groups) + " do not divide channels " +
                        std::to_string(in) + "->" + std::to_string(out));
    c.weight = trunc_normal_param<T>({out, in / opt.groups, k, k}, rng);
    if (with_bias) c.bias = zeros_param<T>({out});
    c.options = opt;
    return c;
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv2d(x, weight, bias.defined() ? &bias : nullptr, options);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "weight"), weight);
    if (bias.defined()) f(join_name(prefix, "bias"), bias);
  }
};

/// fc2(GELU(fc1(x))).
template <class T>
struct Mlp {
  Linear<T> fc1;
  Linear<T> fc2;

  static Mlp make(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    return {Linear<T>::make(in, hidden, rng), Linear<T>::make(hidden, out, rng)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    fc1.visit(join_name(prefix, "fc1"), f);
    fc2.visit(join_name(prefix, "fc2"), f);
  }
};

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T, class M>
NamedParams<T> named_parameters(M& module, const std::string& prefix = "") {
  NamedParams<T> out;
  module.visit(prefix, [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <class M>
std::size_t count_parameters(M& module) {
  std::size_t n = 0;
  module.visit("", [&](const std::string&, auto& t) { n += t.numel(); });
  return n;
}

}  // namespace coca
