// coca: inspect, verify and toy-train the backbone from the command line.
//
// Exit codes: 0 success, 1 a check failed, 2 invalid configuration or
// arguments, 3 training diverged, 4 I/O or checkpoint error.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "coca/cli/checkpoint.hpp"
#include "coca/cli/config_file.hpp"
#include "coca/cli/gradient_suite.hpp"
#include "coca/complexity/complexity.hpp"
#include "coca/train/trainer.hpp"

using namespace coca;

namespace {

constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitIo = 4;

constexpr std::size_t kSizeGuard = 2'000'000;

struct Common {
  std::string variant;
  std::string config_path;
  std::uint64_t seed = 42;
  bool f64 = false;
  std::string out;
};

void add_common(CLI::App* app, Common& c) {
  auto* v = app->add_option("--variant", c.variant, "built-in model: 11M, 21M, 28M or nano");
  auto* f = app->add_option("--config", c.config_path, "key = value model description file");
  v->excludes(f);
  app->add_option("--seed", c.seed, "seed for weights, data and sampling")->capture_default_str();
  app->add_flag("--f64", c.f64, "run in 64-bit precision");
  app->add_option("--out", c.out, "output path");
}

ModelConfig resolve(const Common& c, const std::string& fallback = "nano") {
  if (!c.config_path.empty()) return load_config_file(c.config_path);
  const std::string name = c.variant.empty() ? fallback : c.variant;
  auto v = find_variant(name);
  if (!v) throw ConfigError("unknown variant '" + name + "' (expected 11M, 21M, 28M or nano)");
  v->validate();
  return *v;
}

std::optional<double> target_params(const std::string& name) {
  static const std::map<std::string, double> m = {{"11M", 11.4e6}, {"21M", 20.6e6}, {"28M", 27.8e6}};
  auto it = m.find(name);
  return it == m.end() ? std::nullopt : std::optional(it->second);
}

std::optional<double> target_flops(const std::string& name) {
  static const std::map<std::string, double> m = {{"11M", 2.2e9}, {"21M", 4.1e9}, {"28M", 4.9e9}};
  auto it = m.find(name);
  return it == m.end() ? std::nullopt : std::optional(it->second);
}

std::string pct(double measured, double reference) {
  std::ostringstream os;
  os << std::showpos << std::fixed << std::setprecision(2) << 100.0 * (measured - reference) / reference << '%';
  return os.str();
}

std::string plan_string(const ModelConfig& c) {
  std::string s;
  const auto plan = plan_blocks(c);
  for (std::size_t t = 0; t < plan.size(); ++t) {
    s += "  stage" + std::to_string(t + 2) + ":";
    for (auto k : plan[t]) s += std::string(" ") + to_string(k);
    s += '\n';
  }
  return s;
}

template <class T>
int cmd_shapes(const ModelConfig& cfg, std::uint64_t seed, std::size_t image_size) {
  Rng rng(seed);
  auto m = build_model<T>(cfg, rng);
  std::vector<std::size_t> dims = {cfg.conv_dim};
  for (std::size_t t = 0; t < 3; ++t) dims.push_back(cfg.stage_dim(t));
  std::cout << "config " << cfg.name << ": depths " << detail::format_list(cfg.depths) << ", dims "
            << detail::format_list(dims) << ", heads " << detail::format_list(cfg.heads) << ", coordinators "
            << (cfg.use_coordinators ? std::to_string(cfg.coordinators) : std::string("off")) << '\n'
            << "block plan:\n"
            << plan_string(cfg);
  ShapeTrace trace;
  Rng img_rng(seed + 1);
  {
    NoGradGuard no_grad;
    forward(m, randn<T>({1, 3, image_size, image_size}, img_rng), {.anchor = false, .trace = &trace});
  }
  std::cout << "shapes at " << image_size << "x" << image_size << ":\n";
  int failures = 0;
  auto expect = [&](const std::string& layer, const Shape& got, const Shape& want) {
    if (got == want) return;
    std::cout << "shape invariant failed at " << layer << ": " << to_string(got) << " != " << to_string(want) << '\n';
    ++failures;
  };
  for (const auto& [layer, shape] : trace) {
    std::cout << "  " << std::left << std::setw(28) << layer << to_string(shape) << '\n';
    const std::string stage = layer.substr(0, layer.find('.'));
    const bool coords = layer == "generator" || layer.ends_with(".merge") || layer.ends_with(".coordinators");
    if (stage.rfind("stage", 0) == 0 && stage != "stage1") {
      const std::size_t t = static_cast<std::size_t>(stage[5] - '2');
      if (coords) expect(layer, shape, {1, cfg.coordinators, cfg.stage_dim(t)});
      else if (shape.size() != 4 || shape[0] != 1 || shape[3] != cfg.stage_dim(t)) expect(layer, shape, {1, 0, 0, cfg.stage_dim(t)});
    } else if (layer == "generator") {
      expect(layer, shape, {1, cfg.coordinators, cfg.stage_dim(0)});
    } else if (layer == "head") {
      expect(layer, shape, {1, cfg.num_classes});
    } else if (shape.size() != 4 || shape[1] != cfg.conv_dim) {
      expect(layer, shape, {1, cfg.conv_dim, 0, 0});
    }
  }
  return failures ? kExitCheckFailed : 0;
}

int cmd_params(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  auto m = build_model<float>(cfg, rng);
  const std::size_t total = count_parameters(m);
  std::cout << "parameters of " << cfg.name << ":\n";
  for (const auto& [group, n] : parameter_breakdown(m))
    std::cout << "  " << std::left << std::setw(12) << group << std::right << std::setw(12) << n << '\n';
  std::cout << "  " << std::left << std::setw(12) << "total" << std::right << std::setw(12) << total << "  ("
            << std::fixed << std::setprecision(3) << total / 1e6 << "M)\n";
  if (auto ref = target_params(cfg.name))
    std::cout << "target " << *ref / 1e6 << "M, delta " << pct(static_cast<double>(total), *ref) << '\n';
  return 0;
}

int cmd_flops(const ModelConfig& cfg, std::uint64_t seed, std::size_t image_size, bool csv, const std::string& out) {
  Rng rng(seed);
  auto m = build_model<float>(cfg, rng);
  const auto c = measure_model(m, image_size);
  std::cout << "MACs of " << cfg.name << " at " << image_size << "x" << image_size << " (1 MAC = 1 FLOP):\n"
            << std::fixed << std::setprecision(4) << "  total                 " << c.total / 1e9 << " G\n"
            << "  coordinator generator " << c.generator / 1e9 << " G\n"
            << "  token mergers         " << c.merge / 1e9 << " G\n"
            << "  without both          " << c.without_coordinator_plumbing() / 1e9 << " G\n";
  if (auto ref = target_flops(cfg.name); ref && image_size == 224)
    std::cout << "target " << *ref / 1e9 << " G, delta " << pct(static_cast<double>(c.total), *ref) << '\n';
  std::cout << "attention layers, closed form vs measured:\n";
  if (csv) std::cout << c.attention.csv();
  else std::cout << c.attention.table();
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw CheckpointError("cannot write '" + out + "'");
    f << c.attention.csv();
  }
  return c.attention.exact() ? 0 : kExitCheckFailed;
}

int cmd_gradcheck(std::size_t seeds, std::size_t model_points, bool inject_fault) {
  GradientSuiteOptions opt;
  opt.seeds.clear();
  for (std::size_t s = 1; s <= seeds; ++s) opt.seeds.push_back(s);
  opt.model_points_per_param = model_points;
  std::optional<BackwardFaultGuard> fault;
  if (inject_fault) fault.emplace("matmul", 1.01);
  std::map<std::string, std::pair<double, bool>> worst;
  std::map<std::string, std::size_t> points;
  std::cout << "finite-difference gradient check, 64-bit, tolerance 1e-4, seeds 1.." << seeds
            << (inject_fault ? " (matmul backward deliberately corrupted)" : "") << '\n';
  const auto results = run_gradient_suite(opt, [&](const BlockGradResult& r) {
    auto& w = worst.try_emplace(r.block, 0.0, true).first->second;
    w.first = std::max(w.first, r.report.max_rel_error);
    w.second = w.second && r.report.pass;
    points[r.block] += r.report.points;
  });
  bool all = true;
  std::cout << std::left << std::setw(14) << "block" << std::setw(16) << "max rel error" << std::setw(10) << "points"
            << "result\n";
  for (const auto& block : gradient_suite_blocks()) {
    const auto& [err, pass] = worst.at(block);
    all = all && pass;
    std::cout << std::left << std::setw(14) << block << std::setw(16) << std::scientific << std::setprecision(3) << err
              << std::setw(10) << points[block] << (pass ? "pass" : "FAIL") << '\n';
  }
  for (const auto& r : results)
    if (!r.report.pass) std::cout << "  " << r.block << " seed " << r.seed << ": " << r.report.failure << '\n';
  return all ? 0 : kExitCheckFailed;
}

struct ToyOptions {
  TrainOptions train;
  std::size_t samples = 512;
  double noise = 0.35;
  bool no_coordinators = false;
  bool uniform_mlp = false;
  bool override_guard = false;
  std::string metrics;
};

ModelConfig apply_ablation(ModelConfig c, const ToyOptions& o) {
  if (o.no_coordinators) c.use_coordinators = false;
  if (o.uniform_mlp) c.mlp_ratios = {4, 4, 4};
  c.validate();
  return c;
}

SyntheticDataset dataset_for(const ModelConfig& cfg, const ToyOptions& o, std::uint64_t seed) {
  return SyntheticDataset({seed, cfg.num_classes, cfg.image_size, o.samples, o.noise});
}

template <class T>
struct ToyRun {
  Model<T> model;
  TrainResult result;
  double accuracy = 0;
};

template <class T>
ToyRun<T> run_toy(const ModelConfig& cfg, const ToyOptions& o, std::uint64_t seed, std::ostream* metrics) {
  Rng rng(seed);
  ToyRun<T> run{build_model<T>(cfg, rng), {}, 0};
  const std::size_t n = count_parameters(run.model);
  if (n > kSizeGuard && !o.override_guard)
    throw ConfigError("model has " + std::to_string(n) + " parameters; toy training above " +
                      std::to_string(kSizeGuard) + " needs --override-size-guard");
  const auto data = dataset_for(cfg, o, seed);
  TrainOptions t = o.train;
  t.seed = seed;
  run.result = train(run.model, data, t, metrics);
  run.accuracy = evaluate_accuracy(run.model, data);
  return run;
}

template <class T>
int cmd_train_toy(const ModelConfig& base, const ToyOptions& o, std::uint64_t seed, std::string out) {
  const auto cfg = apply_ablation(base, o);
  if (out.empty()) out = "coca_toy.ckpt";
  std::ofstream metrics_file;
  std::ostream* metrics = &std::cout;
  if (!o.metrics.empty()) {
    metrics_file.open(o.metrics);
    if (!metrics_file) throw CheckpointError("cannot write '" + o.metrics + "'");
    metrics = &metrics_file;
  }
  auto run = run_toy<T>(cfg, o, seed, metrics);
  save_model(out, run.model);
  if (run.result.diverged) {
    std::cerr << "training diverged: " << run.result.error << "\nlast good parameters (step "
              << run.result.steps_completed << ") saved to " << out << '\n';
    return kExitDiverged;
  }
  std::cerr << "final train accuracy " << std::fixed << std::setprecision(4) << run.accuracy << " over "
            << o.samples << " samples; anchor diversity "
            << (diversity_decreased(run.result.log) ? "decreased" : "did not decrease") << "; checkpoint " << out
            << '\n';
  return 0;
}

template <class T>
int cmd_eval(const std::string& path, const ToyOptions& o, std::uint64_t seed) {
  auto m = load_model<T>(path);
  const auto data = dataset_for(m.config, o, seed);
  std::vector<std::size_t> last;
  for (std::size_t i = data.size() - std::min<std::size_t>(o.train.batch, data.size()); i < data.size(); ++i)
    last.push_back(i);
  auto [x, y] = data.template batch<T>(last);
  Tensor<T> logits;
  {
    NoGradGuard no_grad;
    logits = forward(m, x, {.anchor = false}).logits;
  }
  std::uint64_t h = 1469598103934665603ull;
  for (auto b : detail::encode_elements<T>(logits.data())) h = (h ^ b) * 1099511628211ull;
  std::cout << "checkpoint " << path << " (" << m.config.name << ")\n"
            << "accuracy " << std::fixed << std::setprecision(4) << evaluate_accuracy(m, data) << '\n'
            << "final-batch logits fnv1a " << std::hex << std::setw(16) << std::setfill('0') << h << std::dec << '\n';
  return 0;
}

template <class T>
int cmd_ablate(const ModelConfig& base, const ToyOptions& o, std::uint64_t seed, bool no_anchor, bool no_train) {
  if (!o.no_coordinators && !o.uniform_mlp && !no_anchor)
    throw ConfigError("ablate needs at least one of --no-coordinators, --no-anchor, --uniform-mlp-ratio");
  const auto variant = apply_ablation(base, o);
  Rng r1(seed), r2(seed);
  auto mb = build_model<float>(base, r1);
  auto mv = build_model<float>(variant, r2);
  const auto pb = count_parameters(mb), pv = count_parameters(mv);
  const auto fb = measure_model(mb, base.image_size).total, fv = measure_model(mv, variant.image_size).total;
  std::cout << "ablation of " << base.name << ":" << (o.no_coordinators ? " no-coordinators" : "")
            << (no_anchor ? " no-anchor" : "") << (o.uniform_mlp ? " uniform-mlp-ratio" : "") << '\n'
            << std::fixed << std::setprecision(3) << "  params  base " << pb / 1e6 << "M  variant " << pv / 1e6
            << "M  delta " << (static_cast<double>(pv) - static_cast<double>(pb)) / 1e6 << "M\n"
            << "  MACs    base " << fb / 1e9 << "G  variant " << fv / 1e9 << "G at " << base.image_size << "px\n";
  if (no_train) return 0;
  ToyOptions ob = o, ov = o;
  ob.no_coordinators = ob.uniform_mlp = false;
  ov.train.use_anchor = o.train.use_anchor && !no_anchor;
  auto rb = run_toy<T>(base, ob, seed, nullptr);
  auto rv = run_toy<T>(variant, ov, seed, nullptr);
  if (rb.result.diverged || rv.result.diverged) {
    std::cerr << "training diverged: " << (rb.result.diverged ? rb.result.error : rv.result.error) << '\n';
    return kExitDiverged;
  }
  const double cb = rb.result.log.back().ce, cv = rv.result.log.back().ce;
  std::cout << std::setprecision(4) << "  train accuracy  base " << rb.accuracy << "  variant " << rv.accuracy
            << "  delta " << std::showpos << rv.accuracy - rb.accuracy << std::noshowpos << '\n'
            << "  final ce        base " << cb << "  variant " << cv << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coordinator window-attention backbone: inspection, verification and toy training"};
  app.footer("exit codes: 0 ok, 1 check failed, 2 invalid configuration, 3 training diverged, 4 I/O error");
  app.require_subcommand(1);

  Common common;
  std::size_t image_size = 0;
  ToyOptions toy;
  bool csv = false, inject_fault = false, no_anchor = false, no_train = false;
  std::size_t seeds = 5, model_points = 0;
  std::string checkpoint;

  auto* shapes = app.add_subcommand("shapes", "per-stage tensor shapes and block plan");
  auto* params = app.add_subcommand("params", "parameter totals per module");
  auto* flops = app.add_subcommand("flops", "closed-form and measured MACs");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every block type (64-bit)");
  auto* trainc = app.add_subcommand("train-toy", "train on the synthetic 4-class set");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the synthetic set");
  auto* ablate = app.add_subcommand("ablate", "compare a model against an ablated variant");
  for (auto* c : {shapes, params, flops, trainc, ablate}) add_common(c, common);
  for (auto* c : {shapes, flops}) c->add_option("--image-size", image_size, "input resolution (default: from config)");
  flops->add_flag("--csv", csv, "print the attention table as CSV");
  grad->add_option("--seeds", seeds, "number of seeds per block")->capture_default_str();
  grad->add_option("--model-points", model_points, "coordinates per parameter in the full-model check (0 = all)")
      ->capture_default_str();
  grad->add_flag("--inject-fault", inject_fault, "corrupt the matmul backward to prove the check can fail");
  for (auto* c : {trainc, eval, ablate}) {
    c->add_option("--steps", toy.train.steps)->capture_default_str();
    c->add_option("--lr", toy.train.lr)->capture_default_str();
    c->add_option("--batch", toy.train.batch)->capture_default_str();
    c->add_option("--samples", toy.samples, "synthetic training set size")->capture_default_str();
    c->add_option("--noise", toy.noise, "synthetic pixel noise")->capture_default_str();
  }
  eval->add_option("--seed", common.seed, "dataset seed")->capture_default_str();
  eval->add_flag("--f64", common.f64, "the checkpoint holds 64-bit tensors");
  eval->add_option("--checkpoint", checkpoint)->required();
  for (auto* c : {trainc, ablate}) {
    c->add_flag("--no-coordinators", toy.no_coordinators, "pure window-attention model");
    c->add_flag("--uniform-mlp-ratio", toy.uniform_mlp, "MLP ratio 4 in every stage");
    c->add_flag("--override-size-guard", toy.override_guard, "allow toy training above 2M parameters");
  }
  trainc->add_flag("--no-anchor", no_anchor, "drop the anchor regularizer from the loss");
  trainc->add_option("--metrics", toy.metrics, "metrics CSV path (default: stdout)");
  ablate->add_flag("--no-anchor", no_anchor, "drop the anchor regularizer from the variant's loss");
  ablate->add_flag("--no-train", no_train, "report parameters and MACs only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*grad) return cmd_gradcheck(seeds, model_points, inject_fault);
    if (*eval) return common.f64 ? cmd_eval<double>(checkpoint, toy, common.seed) : cmd_eval<float>(checkpoint, toy, common.seed);
    const auto cfg = resolve(common);
    const std::size_t size = image_size ? image_size : cfg.image_size;
    if (*shapes) return common.f64 ? cmd_shapes<double>(cfg, common.seed, size) : cmd_shapes<float>(cfg, common.seed, size);
    if (*params) return cmd_params(cfg, common.seed);
    if (*flops) return cmd_flops(cfg, common.seed, size, csv, common.out);
    if (*trainc) {
      toy.train.use_anchor = !no_anchor;
      return common.f64 ? cmd_train_toy<double>(cfg, toy, common.seed, common.out)
                        : cmd_train_toy<float>(cfg, toy, common.seed, common.out);
    }
    if (*ablate)
      return common.f64 ? cmd_ablate<double>(cfg, toy, common.seed, no_anchor, no_train)
                        : cmd_ablate<float>(cfg, toy, common.seed, no_anchor, no_train);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const NonFiniteError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return 0;
}
