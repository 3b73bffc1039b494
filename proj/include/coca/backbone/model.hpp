#pragma once

// Full backbone: convolutional stem and MBConv stage, coordinator generator,
// three transformer stages of WSA / CoCA blocks with token merging at each
// boundary, and a pooled classification head.
//
// Layer scopes (used for diagnostics and MAC accounting) are
//   stem, stage1.block<i>, stage<s>.down, generator, anchor, stage<s>.merge,
//   stage<s>.block<i>.{wsa,ggca,ggca_mlp,gcwa,glu}, head

#include <map>
#include <string>
#include <vector>

#include "coca/backbone/blocks.hpp"
#include "coca/backbone/config.hpp"

namespace coca {

template <class T>
struct TransformerBlock {
  BlockKind kind = BlockKind::Wsa;
  WsaLayer<T> wsa;    // Wsa blocks
  GgcaLayer<T> ggca;  // CoCA blocks
  GcwaLayer<T> gcwa;  // CoCA blocks
  ConvGlu<T> glu;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    if (kind == BlockKind::Wsa) {
      wsa.visit(join_name(prefix, "wsa"), f);
    } else {
      ggca.visit(join_name(prefix, "ggca"), f);
      gcwa.visit(join_name(prefix, "gcwa"), f);
    }
    glu.visit(join_name(prefix, "glu"), f);
  }
};

template <class T>
struct TransformerStage {
  Conv2d<T> down;  // 3x3 stride 2, previous width -> this width
  LayerNorm<T> down_norm;
  bool has_merge = false;
  TokenMerger<T> merge;
  std::vector<TransformerBlock<T>> blocks;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    down.visit(join_name(prefix, "down"), f);
    down_norm.visit(join_name(prefix, "down_norm"), f);
    if (has_merge) merge.visit(join_name(prefix, "merge"), f);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(join_name(prefix, "block" + std::to_string(i + 1)), f);
  }
};

template <class T>
struct Model {
  ModelConfig config;
  Conv2d<T> stem1;
  LayerNorm<T> stem_norm;
  Conv2d<T> stem2;
  std::vector<MbConv<T>> mbconv;
  bool has_generator = false;
  CoordinatorGenerator<T> generator;
  std::vector<TransformerStage<T>> stages;
  LayerNorm<T> head_norm;
  Linear<T> head_hidden;  // undefined when config.head_hidden == 0
  Linear<T> classifier;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    stem1.visit(join_name(prefix, "stem.conv1"), f);
    stem_norm.visit(join_name(prefix, "stem.norm"), f);
    stem2.visit(join_name(prefix, "stem.conv2"), f);
    for (std::size_t i = 0; i < mbconv.size(); ++i)
      mbconv[i].visit(join_name(prefix, "stage1.block" + std::to_string(i + 1)), f);
    if (has_generator) generator.visit(join_name(prefix, "generator"), f);
    for (std::size_t s = 0; s < stages.size(); ++s) stages[s].visit(join_name(prefix, "stage" + std::to_string(s + 2)), f);
    head_norm.visit(join_name(prefix, "head.norm"), f);
    if (head_hidden.weight.defined()) head_hidden.visit(join_name(prefix, "head.hidden"), f);
    classifier.visit(join_name(prefix, "head.classifier"), f);
  }
};

template <class T>
Model<T> build_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  Model<T> m;
  m.config = config;
  const std::size_t c0 = config.conv_dim;
  const Conv2dOptions s2{.stride = 2, .padding = 1};
  m.stem1 = Conv2d<T>::make(3, c0, 3, s2, rng);
  m.stem_norm = LayerNorm<T>::make(c0);
  m.stem2 = Conv2d<T>::make(c0, c0, 3, s2, rng);
  for (std::size_t i = 0; i < config.depths[0]; ++i) m.mbconv.push_back(MbConv<T>::make(c0, config.mbconv_expand, rng));

  const auto plan = plan_blocks(config);
  const std::size_t k = config.coordinators;
  m.has_generator = config.use_coordinators;
  std::size_t prev = c0;
  for (std::size_t t = 0; t < ModelConfig::kTransformerStages; ++t) {
    const std::size_t c = config.stage_dim(t), heads = config.heads[t], side = config.windows[t];
    TransformerStage<T> st;
    st.down = Conv2d<T>::make(prev, c, 3, s2, rng);
    st.down_norm = LayerNorm<T>::make(c);
    if (t == 0 && m.has_generator) m.generator = CoordinatorGenerator<T>::make(c, k, c, rng);
    if (t > 0 && config.use_coordinators) {
      st.has_merge = true;
      st.merge = TokenMerger<T>::make(k, prev, c, heads, rng);
    }
    for (BlockKind kind : plan[t]) {
      TransformerBlock<T> b;
      b.kind = kind;
      if (kind == BlockKind::Wsa) {
        b.wsa = WsaLayer<T>::make(c, heads, side, rng);
      } else {
        b.ggca = GgcaLayer<T>::make(c, heads, config.coord_mlp_ratio, rng);
        b.gcwa = GcwaLayer<T>::make(c, heads, side, rng);
      }
      b.glu = ConvGlu<T>::make(c, config.mlp_ratios[t], rng);
      st.blocks.push_back(std::move(b));
    }
    m.stages.push_back(std::move(st));
    prev = c;
  }
  m.head_norm = LayerNorm<T>::make(prev);
  std::size_t feat = prev;
  if (config.head_hidden > 0) {
    m.head_hidden = Linear<T>::make(prev, config.head_hidden, rng);
    feat = config.head_hidden;
  }
  m.classifier = Linear<T>::make(feat, config.num_classes, rng);
  return m;
}

/// (layer, output shape) in execution order.
using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

struct ForwardOptions {
  /// Hide coordinator keys from every GCWA, cutting the global path.
  bool mask_coordinators = false;
  /// Skip the anchor terms (they are then undefined).
  bool anchor = true;
  ShapeTrace* trace = nullptr;
};

template <class T>
struct ForwardResult {
  Tensor<T> logits;        // [B, classes]
  Tensor<T> coordinators;  // generated G [B, K, D2]; undefined without coordinators
  Tensor<T> final_coordinators;
  AnchorLossTerms<T> anchor;  // undefined without coordinators
};

template <class T>
ForwardResult<T> forward(const Model<T>& m, const Tensor<T>& images, ForwardOptions opt = {}) {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) == 0 || images.dim(3) == 0)
    throw DimensionError("forward expects [B,3,H,W] images, got " + to_string(images.shape()));
  ForwardResult<T> r;
  auto trace = [&](const std::string& name, const Tensor<T>& t) {
    if (opt.trace) opt.trace->emplace_back(name, t.shape());
  };
  Tensor<T> x;
  {
    LayerScope scope("stem");
    x = m.stem2(gelu(channel_norm(m.stem1(images), m.stem_norm)));
  }
  trace("stem", x);
  for (std::size_t i = 0; i < m.mbconv.size(); ++i) {
    LayerScope scope("stage1.block" + std::to_string(i + 1));
    x = mbconv_block(x, m.mbconv[i]);
    trace("stage1.block" + std::to_string(i + 1), x);
  }
  Tensor<T> grid, g;
  for (std::size_t t = 0; t < m.stages.size(); ++t) {
    const auto& st = m.stages[t];
    const std::string stage = "stage" + std::to_string(t + 2);
    {
      LayerScope scope(stage + ".down");
      auto map = t == 0 ? x : to_map(grid);
      grid = st.down_norm(to_grid(st.down(map)));
    }
    trace(stage + ".down", grid);
    if (t == 0 && m.has_generator) {
      {
        LayerScope scope("generator");
        g = generate_coordinators(to_map(grid), m.generator);
      }
      r.coordinators = g;
      trace("generator", g);
      if (opt.anchor) {
        LayerScope scope("anchor");
        r.anchor = anchor_loss(g);
      }
    }
    if (st.has_merge) {
      LayerScope scope(stage + ".merge");
      g = token_merge(g, st.merge);
      trace(stage + ".merge", g);
    }
    for (std::size_t i = 0; i < st.blocks.size(); ++i) {
      const auto& b = st.blocks[i];
      LayerScope scope(stage + ".block" + std::to_string(i + 1));
      if (b.kind == BlockKind::Wsa) {
        grid = wsa_layer(grid, b.wsa);
      } else {
        g = ggca(grid, g, b.ggca).coords;
        grid = gcwa(grid, g, b.gcwa, {.mask_coordinators = opt.mask_coordinators});
      }
      {
        LayerScope glu("glu");
        grid = conv_glu(grid, b.glu);
      }
      trace(stage + ".block" + std::to_string(i + 1), grid);
      if (b.kind == BlockKind::CoCA) trace(stage + ".block" + std::to_string(i + 1) + ".coordinators", g);
    }
  }
  r.final_coordinators = g;
  {
    LayerScope scope("head");
    auto pooled = mean(reshape(m.head_norm(grid), {grid.dim(0), grid.dim(1) * grid.dim(2), grid.dim(3)}), 1);
    if (m.head_hidden.weight.defined()) pooled = gelu(m.head_hidden(pooled));
    r.logits = m.classifier(pooled);
  }
  trace("head", r.logits);
  return r;
}

/// The pure window-attention model sharing every weight of `m`: each CoCA
/// block becomes a WSA block using its GCWA norm and projections, and the
/// generator and mergers are dropped.
template <class T>
Model<T> without_coordinators(const Model<T>& m) {
  Model<T> w = m;
  w.config.use_coordinators = false;
  w.has_generator = false;
  w.generator = {};
  for (auto& st : w.stages) {
    st.has_merge = false;
    st.merge = {};
    for (auto& b : st.blocks) {
      if (b.kind != BlockKind::CoCA) continue;
      b.kind = BlockKind::Wsa;
      b.wsa = WsaLayer<T>{b.gcwa.norm, b.gcwa.attn};
      b.ggca = {};
      b.gcwa = {};
    }
  }
  return w;
}

/// Mean cross-entropy of [B, classes] logits against integer labels.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  std::vector<T> onehot(b * c, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c) throw DimensionError("label " + std::to_string(labels[i]) + " out of range");
    onehot[i * c + labels[i]] = T(1);
  }
  auto picked = sum_all(mul(log_softmax_rows(logits), Tensor<T>({b, c}, std::move(onehot))));
  return scale(picked, T(-1) / static_cast<T>(b));
}

/// Cross-entropy plus the anchor regularizer when present and enabled.
template <class T>
Tensor<T> training_loss(const ForwardResult<T>& r, const std::vector<std::size_t>& labels, bool use_anchor = true) {
  auto ce = cross_entropy(r.logits, labels);
  if (use_anchor && r.anchor.total.defined()) return add(ce, r.anchor.total);
  return ce;
}

/// Parameter totals grouped by the first path component ("stem", "stage3", ...).
template <class T>
std::map<std::string, std::size_t> parameter_breakdown(Model<T>& m) {
  std::map<std::string, std::size_t> out;
  m.visit("", [&](const std::string& name, Tensor<T>& t) { out[name.substr(0, name.find('.'))] += t.numel(); });
  return out;
}

}  // namespace coca
