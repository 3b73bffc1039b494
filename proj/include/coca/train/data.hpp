#pragma once

// Procedural 4-class image set: horizontal stripes, vertical stripes, one
// large blob, several small blobs. Phases and blob centres are uniform on the
// torus and every image is standardized, so each class has the same expected
// value at every pixel and no linear function of the pixels separates them.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "coca/numeric/rng.hpp"
#include "coca/numeric/tensor.hpp"

namespace coca {

struct SyntheticOptions {
  std::uint64_t seed = 42;
  std::size_t classes = 4;
  std::size_t image_size = 32;
  std::size_t samples = 512;
  double noise = 0.35;
};

class SyntheticDataset {
 public:
  static constexpr std::size_t kChannels = 3;
  static constexpr std::size_t kMaxClasses = 4;

  explicit SyntheticDataset(SyntheticOptions opt = {}) : opt_(opt) {
    if (opt.classes < 2 || opt.classes > kMaxClasses) throw ConfigError("synthetic dataset supports 2 to 4 classes");
    if (opt.image_size < 8) throw ConfigError("synthetic images must be at least 8 pixels wide");
    if (opt.samples == 0) throw ConfigError("synthetic dataset needs at least one sample");
  }

  const SyntheticOptions& options() const { return opt_; }
  std::size_t size() const { return opt_.samples; }
  std::size_t pixels() const { return kChannels * opt_.image_size * opt_.image_size; }

  /// Balanced labels: sample i belongs to class i mod classes.
  std::size_t label(std::size_t i) const { return i % opt_.classes; }

  /// Image i as CHW floats. Depends only on (seed, i).
  std::vector<double> image(std::size_t i) const {
    Rng rng(opt_.seed * 0x9E3779B97F4A7C15ull + i + 1);
    const std::size_t s = opt_.image_size;
    const double sd = static_cast<double>(s);
    std::vector<double> plane(s * s, 0.0);
    auto stripes = [&](bool horizontal) {
      const double period = rng.uniform(4.0, 8.0);
      const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x)
          plane[y * s + x] = std::sin(2 * std::numbers::pi * static_cast<double>(horizontal ? y : x) / period + phase);
    };
    auto blob = [&](double sigma) {
      const double cy = rng.uniform(0.0, sd), cx = rng.uniform(0.0, sd);
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          double dy = std::abs(static_cast<double>(y) - cy), dx = std::abs(static_cast<double>(x) - cx);
          dy = std::min(dy, sd - dy);
          dx = std::min(dx, sd - dx);
          plane[y * s + x] += std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
        }
    };
    switch (label(i)) {
      case 0: stripes(true); break;
      case 1: stripes(false); break;
      case 2: blob(rng.uniform(sd / 8, sd / 5)); break;
      default:
        for (int b = 0; b < 3; ++b) blob(rng.uniform(sd / 16, sd / 10));
    }
    std::vector<double> img(pixels());
    for (std::size_t c = 0; c < kChannels; ++c) {
      const double gain = rng.uniform(0.5, 1.5);
      for (std::size_t p = 0; p < s * s; ++p) img[c * s * s + p] = gain * plane[p] + opt_.noise * rng.normal();
    }
    double mean = 0, var = 0;
    for (double v : img) mean += v;
    mean /= static_cast<double>(img.size());
    for (double v : img) var += (v - mean) * (v - mean);
    const double inv = 1.0 / std::sqrt(var / static_cast<double>(img.size()) + 1e-12);
    for (double& v : img) v = (v - mean) * inv;
    return img;
  }

  /// [B,3,S,S] batch of the given sample indices plus their labels.
  template <class T>
  std::pair<Tensor<T>, std::vector<std::size_t>> batch(const std::vector<std::size_t>& indices) const {
    const std::size_t s = opt_.image_size;
    std::vector<T> data;
    data.reserve(indices.size() * pixels());
    std::vector<std::size_t> labels;
    for (std::size_t i : indices) {
      for (double v : image(i)) data.push_back(static_cast<T>(v));
      labels.push_back(label(i));
    }
    return {Tensor<T>({indices.size(), kChannels, s, s}, std::move(data)), std::move(labels)};
  }

 private:
  SyntheticOptions opt_;
};

struct ProbeResult {
  double train_accuracy = 0;
  double test_accuracy = 0;
};

/// Softmax-regression probe on raw pixels, trained by full-batch gradient
/// descent on `train` and scored on both sets. With unit-variance pixels the
/// loss curvature is about d, so the step is lr / d.
inline ProbeResult linear_probe(const SyntheticDataset& train, const SyntheticDataset& test, int epochs = 200,
                                double lr = 1.0) {
  const std::size_t d = train.pixels() + 1, k = train.options().classes;
  auto features = [](const SyntheticDataset& ds) {
    std::vector<std::vector<double>> f;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      f.push_back(ds.image(i));
      f.back().push_back(1.0);
    }
    return f;
  };
  const auto xtr = features(train), xte = features(test);
  std::vector<double> w(k * d, 0.0), grad(k * d), logits(k);
  auto predict = [&](const std::vector<double>& x) {
    for (std::size_t c = 0; c < k; ++c) {
      double z = 0;
      for (std::size_t j = 0; j < d; ++j) z += w[c * d + j] * x[j];
      logits[c] = z;
    }
  };
  for (int e = 0; e < epochs; ++e) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < xtr.size(); ++i) {
      predict(xtr[i]);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t c = 0; c < k; ++c) {
        const double g = logits[c] / z - (c == train.label(i) ? 1.0 : 0.0);
        for (std::size_t j = 0; j < d; ++j) grad[c * d + j] += g * xtr[i][j];
      }
    }
    const double step = lr / static_cast<double>(xtr.size() * d);
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= step * grad[j];
  }
  auto accuracy = [&](const std::vector<std::vector<double>>& x, const SyntheticDataset& ds) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      predict(x[i]);
      const auto best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      correct += best == ds.label(i);
    }
    return static_cast<double>(correct) / static_cast<double>(x.size());
  };
  return {accuracy(xtr, train), accuracy(xte, test)};
}

}  // namespace coca
