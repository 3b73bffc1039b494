#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "coca/numeric/tensor.hpp"

namespace coca {

/// Seeded generator whose draw sequence is identical on every platform.
///
/// std::mt19937_64 has a fully specified output sequence; the standard
/// distributions do not, so uniform and normal draws are derived here from raw
/// 64-bit outputs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 42) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  /// Normal(0, std) resampled until it lies within +-bound*std.
  double truncated_normal(double stddev, double bound = 2.0) {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= bound) return z * stddev;
    }
  }

  /// Derives an independent stream, e.g. one per dataset split.
  Rng fork() { return Rng(next_u64()); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

template <class T>
Tensor<T> randn(const Shape& shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>(shape, std::move(v), requires_grad);
}

template <class T>
Tensor<T> rand_uniform(const Shape& shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(shape, std::move(v), requires_grad);
}

}  // namespace coca
