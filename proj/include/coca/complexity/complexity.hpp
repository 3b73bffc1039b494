#pragma once

// Closed-form attention costs and their measured counterparts.
//
// Convention: one unit is one multiply-accumulate of a matmul or convolution.
// Biases, softmax, norms, activations, masks and position biases are free.
// T is the number of tokens per window (window side squared). Under this
// convention the formulas below are exact for a single image:
//
//   MSA  = 4hwC^2 + 2(hw)^2 C
//   WSA  = 4hwC^2 + 2T hwC
//   GGCA = 4KC^2 + 2hwC^2 + 2K(K + hw)C
//   GCWA = 4hwC^2 + 2KC^2 + 2T hwC + 2K hwC
//   CoCA = GGCA + GCWA = 6(K + hw)C^2 + (2K^2 + 2T hw + 4K hw)C

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "coca/backbone/model.hpp"

namespace coca {

enum class CostKind { MSA, WSA, GGCA, GCWA, CoCA };

inline const char* to_string(CostKind k) {
  switch (k) {
    case CostKind::MSA: return "MSA";
    case CostKind::WSA: return "WSA";
    case CostKind::GGCA: return "GGCA";
    case CostKind::GCWA: return "GCWA";
    case CostKind::CoCA: return "CoCA";
  }
  return "?";
}

inline CostKind parse_cost_kind(const std::string& s) {
  for (CostKind k : {CostKind::MSA, CostKind::WSA, CostKind::GGCA, CostKind::GCWA, CostKind::CoCA})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown attention kind '" + s + "' (expected MSA, WSA, GGCA, GCWA or CoCA)");
}

struct CostParams {
  std::size_t h = 0, w = 0;  // feature map extents
  std::size_t C = 0;         // channels
  std::size_t side = 0;      // window side
  std::size_t K = 0;         // coordinators
  std::size_t heads = 1;     // does not change any count; used when building layers

  std::uint64_t T() const { return static_cast<std::uint64_t>(side) * side; }
  std::uint64_t hw() const { return static_cast<std::uint64_t>(h) * w; }

  /// Windows must tile the map exactly for the windowed kinds; otherwise
  /// padded tokens are computed too. GGCA and MSA have no windows.
  void validate(CostKind kind) const {
    if (h == 0 || w == 0 || C == 0 || side == 0 || heads == 0)
      throw ConfigError("cost params: h, w, C, side and heads must be positive");
    const bool windowed = kind != CostKind::GGCA && kind != CostKind::MSA;
    if (windowed && (h % side != 0 || w % side != 0))
      throw ConfigError("cost params: " + std::to_string(h) + "x" + std::to_string(w) + " map not tiled by " +
                        std::to_string(side) + "x" + std::to_string(side) + " windows");
    if (C % heads != 0) throw ConfigError("cost params: C not divisible by heads");
  }
};

inline std::uint64_t closed_form(CostKind kind, const CostParams& p) {
  p.validate(kind);
  const std::uint64_t hw = p.hw(), c = p.C, k = p.K, t = p.T();
  switch (kind) {
    case CostKind::MSA: return 4 * hw * c * c + 2 * hw * hw * c;
    case CostKind::WSA: return 4 * hw * c * c + 2 * t * hw * c;
    case CostKind::GGCA: return 4 * k * c * c + 2 * hw * c * c + 2 * k * (k + hw) * c;
    case CostKind::GCWA: return 4 * hw * c * c + 2 * k * c * c + 2 * t * hw * c + 2 * k * hw * c;
    case CostKind::CoCA: return 6 * (k + hw) * c * c + (2 * k * k + 2 * t * hw + 4 * k * hw) * c;
  }
  throw ConfigError("closed_form: unknown attention kind");
}

/// Runs one isolated layer of `kind` on a single random image and returns the
/// MACs it executed. MSA is a WSA whose window covers the whole (square) map.
template <class T = double>
std::uint64_t measure(CostKind kind, const CostParams& p, std::uint64_t seed = 0) {
  p.validate(kind);
  Rng rng(seed);
  NoGradGuard no_grad;
  MacCounter mc;
  CountingScope counting(mc);
  auto x = randn<T>({1, p.h, p.w, p.C}, rng);
  auto coords = randn<T>({1, p.K, p.C}, rng);
  switch (kind) {
    case CostKind::MSA: {
      if (p.h != p.w) throw ConfigError("measure(MSA) needs a square map");
      wsa_layer(x, WsaLayer<T>::make(p.C, p.heads, p.h, rng));
      return mc.at("wsa");
    }
    case CostKind::WSA:
      wsa_layer(x, WsaLayer<T>::make(p.C, p.heads, p.side, rng));
      return mc.at("wsa");
    case CostKind::GGCA:
      ggca(x, coords, GgcaLayer<T>::make(p.C, p.heads, 0, rng));
      return mc.at("ggca");
    case CostKind::GCWA:
      gcwa(x, coords, GcwaLayer<T>::make(p.C, p.heads, p.side, rng));
      return mc.at("gcwa");
    case CostKind::CoCA: {
      auto g = ggca(x, coords, GgcaLayer<T>::make(p.C, p.heads, 0, rng)).coords;
      gcwa(x, g, GcwaLayer<T>::make(p.C, p.heads, p.side, rng));
      return mc.at("ggca") + mc.at("gcwa");
    }
  }
  throw ConfigError("measure: unknown attention kind");
}

struct CostRow {
  std::string layer;
  std::string kind;
  std::size_t h = 0, w = 0, C = 0, T = 0, K = 0;
  std::uint64_t formula = 0;
  std::uint64_t measured = 0;

  std::int64_t delta() const { return static_cast<std::int64_t>(measured) - static_cast<std::int64_t>(formula); }
  double rel_delta() const { return formula ? static_cast<double>(delta()) / static_cast<double>(formula) : 0.0; }
};

inline CostRow cost_row(std::string layer, CostKind kind, const CostParams& p, std::uint64_t measured) {
  return {std::move(layer), to_string(kind), p.h, p.w, p.C, static_cast<std::size_t>(p.T()), p.K,
          closed_form(kind, p), measured};
}

struct CostReport {
  std::vector<CostRow> rows;
  std::vector<std::string> notes;

  bool exact() const {
    for (const auto& r : rows)
      if (r.delta() != 0) return false;
    return true;
  }

  std::string csv() const {
    std::ostringstream os;
    os << "layer,kind,h,w,C,T,K,formula_macs,measured_macs,rel_delta\n";
    for (const auto& r : rows)
      os << r.layer << ',' << r.kind << ',' << r.h << ',' << r.w << ',' << r.C << ',' << r.T << ',' << r.K << ','
         << r.formula << ',' << r.measured << ',' << std::setprecision(6) << r.rel_delta() << '\n';
    return os.str();
  }

  std::string table() const {
    std::ostringstream os;
    os << std::left << std::setw(22) << "layer" << std::setw(6) << "kind" << std::right << std::setw(5) << "h"
       << std::setw(5) << "w" << std::setw(6) << "C" << std::setw(5) << "T" << std::setw(4) << "K" << std::setw(14)
       << "formula" << std::setw(14) << "measured" << std::setw(11) << "rel_delta" << '\n';
    for (const auto& r : rows)
      os << std::left << std::setw(22) << r.layer << std::setw(6) << r.kind << std::right << std::setw(5) << r.h
         << std::setw(5) << r.w << std::setw(6) << r.C << std::setw(5) << r.T << std::setw(4) << r.K << std::setw(14)
         << r.formula << std::setw(14) << r.measured << std::setw(11) << std::setprecision(3) << r.rel_delta()
         << '\n';
    for (const auto& n : notes) os << "note: " << n << '\n';
    return os.str();
  }
};

struct LinearFit {
  double slope = 0, intercept = 0, r2 = 0;
};

/// Ordinary least squares y = slope * x + intercept.
inline LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("fit_line needs at least two paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0) throw DimensionError("fit_line needs distinct x values");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (f.slope * x[i] + f.intercept);
    ss_res += e * e;
  }
  f.r2 = syy == 0 ? 1.0 : 1.0 - ss_res / syy;
  return f;
}

struct ScalingPoint {
  std::size_t side_len = 0;  // h = w
  std::uint64_t hw = 0;
  std::uint64_t measured_overhead = 0;  // measured CoCA - measured WSA
  std::uint64_t formula_overhead = 0;
};

struct ScalingReport {
  std::vector<ScalingPoint> points;
  LinearFit fit;
  /// Exact slope of the overhead in hw minus the 2C^2 of GGCA's patch K/V
  /// projections: the coordinator interaction term, expected to be exactly 4KC.
  double coordinator_slope = 0;
  std::uint64_t expected_coordinator_slope = 0;
  bool matches_formula = false;
  bool linear = false;

  bool pass() const { return matches_formula && linear && coordinator_slope == static_cast<double>(expected_coordinator_slope); }
};

/// Sweeps square maps, measuring the CoCA-over-WSA overhead at each size and
/// fitting it against hw.
inline ScalingReport linear_scaling_check(const CostParams& base, const std::vector<std::size_t>& sides,
                                          std::uint64_t seed = 0) {
  if (sides.size() < 3) throw ConfigError("linear_scaling_check needs at least three resolutions");
  ScalingReport r;
  r.matches_formula = true;
  std::vector<double> xs, ys;
  for (std::size_t s : sides) {
    CostParams p = base;
    p.h = p.w = s;
    ScalingPoint pt{s, p.hw(), measure<float>(CostKind::CoCA, p, seed) - measure<float>(CostKind::WSA, p, seed),
                    closed_form(CostKind::CoCA, p) - closed_form(CostKind::WSA, p)};
    r.matches_formula = r.matches_formula && pt.measured_overhead == pt.formula_overhead;
    xs.push_back(static_cast<double>(pt.hw));
    ys.push_back(static_cast<double>(pt.measured_overhead));
    r.points.push_back(pt);
  }
  r.fit = fit_line(xs, ys);
  // exact integer slope: every consecutive pair must give the same quotient with no remainder
  bool exact = true;
  std::int64_t slope = 0;
  for (std::size_t i = 1; i < r.points.size(); ++i) {
    const auto dy = static_cast<std::int64_t>(r.points[i].measured_overhead) -
                    static_cast<std::int64_t>(r.points[i - 1].measured_overhead);
    const auto dx = static_cast<std::int64_t>(r.points[i].hw) - static_cast<std::int64_t>(r.points[i - 1].hw);
    if (dx == 0 || dy % dx != 0 || (i > 1 && dy / dx != slope)) exact = false;
    if (dx != 0) slope = dy / dx;
  }
  const auto c = static_cast<std::int64_t>(base.C);
  r.coordinator_slope = static_cast<double>(slope - 2 * c * c);
  r.expected_coordinator_slope = 4ull * base.K * base.C;
  r.linear = exact && r.fit.r2 > 0.999;
  return r;
}

/// Whole-model MAC totals for one image, split so that both readings of
/// "model FLOPs" (with or without the coordinator generator and mergers) are
/// available. The anchor regularizer is a training term and is not run.
struct ModelCost {
  std::uint64_t total = 0;
  std::uint64_t generator = 0;
  std::uint64_t merge = 0;
  MacCounter counter;
  CostReport attention;  // per transformer block, formula vs measured

  std::uint64_t without_coordinator_plumbing() const { return total - generator - merge; }
};

namespace detail {
inline std::size_t halve_up(std::size_t n) { return (n + 1) / 2; }
}  // namespace detail

template <class T>
ModelCost measure_model(const Model<T>& m, std::size_t image_size) {
  ModelCost r;
  Rng rng(0);
  auto images = randn<T>({1, 3, image_size, image_size}, rng);
  {
    NoGradGuard no_grad;
    CountingScope counting(r.counter);
    forward(m, images, {.anchor = false});
  }
  r.total = r.counter.total();
  r.generator = r.counter.total_under("generator");
  // the stem and each downsampler are 3x3 stride-2 convolutions with padding 1
  std::size_t side = detail::halve_up(detail::halve_up(image_size));
  const auto& cfg = m.config;
  for (std::size_t t = 0; t < m.stages.size(); ++t) {
    side = detail::halve_up(side);
    const std::string stage = "stage" + std::to_string(t + 2);
    r.merge += r.counter.total_under(stage + ".merge");
    const std::size_t win = cfg.windows[t];
    const std::size_t padded = round_up(side, win);
    if (padded != side)
      r.attention.notes.push_back(stage + ": " + std::to_string(side) + "x" + std::to_string(side) +
                                  " map padded to " + std::to_string(padded) + "; window formulas use the padded extent");
    for (std::size_t i = 0; i < m.stages[t].blocks.size(); ++i) {
      const auto& b = m.stages[t].blocks[i];
      const std::string block = stage + ".block" + std::to_string(i + 1);
      CostParams p{padded, padded, cfg.stage_dim(t), win, cfg.coordinators, cfg.heads[t]};
      if (b.kind == BlockKind::Wsa) {
        r.attention.rows.push_back(cost_row(block + ".wsa", CostKind::WSA, p, r.counter.at(block + ".wsa")));
      } else {
        CostParams pg = p;
        pg.h = pg.w = side;
        r.attention.rows.push_back(cost_row(block + ".ggca", CostKind::GGCA, pg, r.counter.at(block + ".ggca")));
        r.attention.rows.push_back(cost_row(block + ".gcwa", CostKind::GCWA, p, r.counter.at(block + ".gcwa")));
      }
    }
  }
  return r;
}

}  // namespace coca
