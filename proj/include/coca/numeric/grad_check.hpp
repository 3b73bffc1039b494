#pragma once

// Central finite-difference oracle for tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "coca/numeric/layers.hpp"

namespace coca {

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error, so coordinates whose true
  /// gradient is ~0 are judged on absolute error instead. Central differences
  /// of an O(10) loss carry ~1e-10 of round-off, so gradients that vanish
  /// exactly (a key bias under softmax shift invariance) need a floor well
  /// above that; 1e-4 x tolerance 1e-4 means |analytic - numeric| < 1e-8.
  double abs_floor = 1e-4;
  /// Probe at most this many coordinates per parameter (0 = all). Sampled
  /// coordinates are drawn from `seed`.
  std::size_t max_points_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradReport {
  struct Entry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t points = 0;
  };
  std::vector<Entry> parameters;
  double max_rel_error = 0.0;
  std::size_t points = 0;
  bool pass = false;
  /// Set when f was non-finite at a probe; the comparison is then void.
  bool oracle_failed = false;
  std::string failure;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares d loss / d params from the tape against
/// (f(p + eps e_i) - f(p - eps e_i)) / (2 eps) for every probed coordinate.
/// `loss` must rebuild the graph from the current parameter values on each call.
template <class T>
GradReport grad_check(const std::function<Tensor<T>()>& loss, NamedParams<T> params,
                      const GradCheckOptions& opt = {}) {
  GradReport report;
  auto fail = [&](const std::string& why) {
    report.oracle_failed = true;
    report.pass = false;
    report.failure = why;
    return report;
  };

  for (auto& [name, p] : params) p.zero_grad();
  try {
    Tensor<T> l = loss();
    if (!std::isfinite(static_cast<double>(l.item()))) return fail("loss is non-finite at the base point");
    l.backward();
  } catch (const NonFiniteError& e) {
    return fail(e.what());
  }

  Rng rng(opt.seed);
  NoGradGuard no_grad;
  for (auto& [name, p] : params) {
    GradReport::Entry entry{name, 0.0, 0};
    std::vector<T> analytic(p.numel(), T(0));
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(p.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opt.max_points_per_param && coords.size() > opt.max_points_per_param) {
      for (std::size_t i = 0; i < opt.max_points_per_param; ++i)
        std::swap(coords[i], coords[i + rng.index(coords.size() - i)]);
      coords.resize(opt.max_points_per_param);
    }

    auto data = p.mutable_data();
    for (std::size_t i : coords) {
      const T saved = data[i];
      double fp = 0, fm = 0;
      try {
        data[i] = static_cast<T>(saved + opt.eps);
        fp = static_cast<double>(loss().item());
        data[i] = static_cast<T>(saved - opt.eps);
        fm = static_cast<double>(loss().item());
      } catch (const NonFiniteError& e) {
        data[i] = saved;
        return fail(name + ": " + e.what());
      }
      data[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) return fail(name + ": non-finite loss at probe");
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double err = relative_error(static_cast<double>(analytic[i]), numeric, opt.abs_floor);
      entry.max_rel_error = std::max(entry.max_rel_error, err);
      ++entry.points;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.points += entry.points;
    report.parameters.push_back(entry);
  }
  report.pass = report.max_rel_error < opt.tolerance;
  if (!report.pass) {
    auto worst = std::max_element(report.parameters.begin(), report.parameters.end(),
                                  [](const auto& a, const auto& b) { return a.max_rel_error < b.max_rel_error; });
    report.failure = worst->name + ": relative error " + std::to_string(worst->max_rel_error);
  }
  return report;
}

}  // namespace coca
