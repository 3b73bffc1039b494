#pragma once

// AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "coca/numeric/layers.hpp"

namespace coca {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Weight decay applies to matrices and kernels; vectors (biases, norm
/// scales) and relative-position tables are left alone.
inline bool decays(const std::string& name, std::size_t rank) {
  return rank >= 2 && name.find("rel_bias") == std::string::npos;
}

template <class T>
class AdamW {
 public:
  AdamW(const NamedParams<T>& params, AdamWOptions opt = {}) : opt_(opt) {
    for (const auto& [name, t] : params)
      slots_.push_back({name, t, std::vector<double>(t.numel(), 0.0), std::vector<double>(t.numel(), 0.0),
                        decays(name, t.rank())});
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      if (!s.param.has_grad()) continue;
      auto p = s.param.mutable_data();
      auto g = s.param.grad();
      const double shrink = s.decay ? 1.0 - lr * opt_.weight_decay : 1.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        s.m[i] = opt_.beta1 * s.m[i] + (1 - opt_.beta1) * gi;
        s.v[i] = opt_.beta2 * s.v[i] + (1 - opt_.beta2) * gi * gi;
        const double update = (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + opt_.eps);
        p[i] = static_cast<T>(static_cast<double>(p[i]) * shrink - lr * update);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }
  std::size_t decayed_tensors() const {
    std::size_t n = 0;
    for (const auto& s : slots_) n += s.decay;
    return n;
  }

 private:
  struct Slot {
    std::string name;
    Tensor<T> param;
    std::vector<double> m, v;
    bool decay;
  };
  AdamWOptions opt_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

/// Linear warmup to `base` over `warmup` steps, then cosine decay to zero at `total`.
inline double cosine_lr(std::size_t step, std::size_t total, double base, std::size_t warmup = 0) {
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

}  // namespace coca
