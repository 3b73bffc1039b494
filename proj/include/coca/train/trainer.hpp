#pragma once

// Toy training loop on the synthetic set: cross-entropy plus the anchor
// regularizer, AdamW, warmup + cosine schedule. On a non-finite loss the
// parameters are rolled back to the last finite step and training stops.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "coca/backbone/model.hpp"
#include "coca/train/data.hpp"
#include "coca/train/optim.hpp"

namespace coca {

struct TrainOptions {
  std::size_t steps = 2000;
  std::size_t batch = 32;
  double lr = 1e-3;
  std::size_t warmup = 100;
  double weight_decay = 0.05;
  bool use_anchor = true;
  std::uint64_t seed = 42;
};

struct StepLog {
  std::size_t step = 0;
  double ce = 0, anchor_div = 0, anchor_stab = 0, total = 0, train_acc = 0;
};

struct TrainResult {
  std::vector<StepLog> log;
  std::size_t steps_completed = 0;
  bool diverged = false;
  std::string error;
};

inline constexpr const char* kMetricsHeader = "step,ce_loss,anchor_div,anchor_stab,total_loss,train_acc";

inline void write_metrics_line(std::ostream& os, const StepLog& s) {
  os << s.step << ',' << std::setprecision(9) << s.ce << ',' << s.anchor_div << ',' << s.anchor_stab << ','
     << s.total << ',' << s.train_acc << '\n';
}

namespace detail {

template <class T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t c = logits.dim(1);
  auto first = logits.vec().begin() + static_cast<std::ptrdiff_t>(row * c);
  return static_cast<std::size_t>(std::max_element(first, first + static_cast<std::ptrdiff_t>(c)) - first);
}

template <class T>
std::size_t count_correct(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) n += argmax_row(logits, i) == labels[i];
  return n;
}

}  // namespace detail

/// Fraction of the dataset the model classifies correctly.
template <class T>
double evaluate_accuracy(const Model<T>& m, const SyntheticDataset& data, std::size_t batch = 64) {
  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
    auto [x, y] = data.batch<T>(idx);
    correct += detail::count_correct(forward(m, x, {.anchor = false}).logits, y);
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <class T>
TrainResult train(Model<T>& m, const SyntheticDataset& data, const TrainOptions& opt, std::ostream* metrics = nullptr) {
  if (opt.batch == 0 || opt.batch > data.size()) throw ConfigError("batch size must be in [1, dataset size]");
  auto params = named_parameters<T>(m);
  AdamW<T> optim(params, {.weight_decay = opt.weight_decay});
  std::vector<std::vector<T>> last_good;
  for (const auto& [name, t] : params) last_good.emplace_back(t.vec());

  Rng order_rng(opt.seed);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  auto next_batch = [&] {
    if (cursor + opt.batch > order.size()) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[order_rng.index(i + 1)]);
      cursor = 0;
    }
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                 order.begin() + static_cast<std::ptrdiff_t>(cursor + opt.batch));
    cursor += opt.batch;
    return idx;
  };

  TrainResult r;
  if (metrics) *metrics << kMetricsHeader << '\n';
  for (std::size_t step = 0; step < opt.steps; ++step) {
    auto [x, labels] = data.batch<T>(next_batch());
    StepLog s;
    s.step = step;
    try {
      optim.zero_grad();
      auto out = forward(m, x);
      auto ce = cross_entropy(out.logits, labels);
      auto loss = training_loss(out, labels, opt.use_anchor);
      s.ce = static_cast<double>(ce.item());
      if (out.anchor.total.defined()) {
        s.anchor_div = static_cast<double>(out.anchor.diversity.item());
        s.anchor_stab = static_cast<double>(out.anchor.stability.item());
      }
      s.total = static_cast<double>(loss.item());
      s.train_acc = static_cast<double>(detail::count_correct(out.logits, labels)) / static_cast<double>(labels.size());
      if (!std::isfinite(s.total)) throw NonFiniteError("loss is not finite at step " + std::to_string(step));
      loss.backward();
      optim.step(cosine_lr(step, opt.steps, opt.lr, opt.warmup));
      for (const auto& [name, t] : params)
        if (std::any_of(t.vec().begin(), t.vec().end(), [](T v) { return !std::isfinite(v); }))
          throw NonFiniteError("parameter " + name + " is not finite after step " + std::to_string(step));
    } catch (const NonFiniteError& e) {
      for (std::size_t i = 0; i < params.size(); ++i)
        std::copy(last_good[i].begin(), last_good[i].end(), params[i].second.mutable_data().begin());
      r.diverged = true;
      r.error = e.what();
      return r;
    }
    for (std::size_t i = 0; i < params.size(); ++i) last_good[i] = params[i].second.vec();
    r.log.push_back(s);
    r.steps_completed = step + 1;
    if (metrics) write_metrics_line(*metrics, s);
  }
  return r;
}

/// Whether the mean anchor diversity over the last `window` steps is below
/// the mean over the first `window` steps.
inline bool diversity_decreased(const std::vector<StepLog>& log, std::size_t window = 50) {
  if (log.size() < 2 * window) return false;
  double first = 0, last = 0;
  for (std::size_t i = 0; i < window; ++i) {
    first += log[i].anchor_div;
    last += log[log.size() - 1 - i].anchor_div;
  }
  return last < first;
}

}  // namespace coca
