#pragma once

// Declarative model description and the per-stage block plan.
//
// Stage 1 is convolutional (MBConv); stages 2-4 are transformer stages.
// Per-stage vectors with three entries (heads, mlp_ratios, windows,
// interaction) describe the transformer stages only; depths has four.

#include <optional>
#include <string>
#include <vector>

#include "coca/numeric/errors.hpp"

namespace coca {

struct ModelConfig {
  std::string name = "custom";
  std::size_t conv_dim = 0;
  std::size_t head_dim = 24;
  std::vector<std::size_t> heads;       // transformer stages
  std::vector<std::size_t> depths;      // all four stages
  std::vector<std::size_t> mlp_ratios;  // transformer stages
  std::vector<std::size_t> windows;     // window side per transformer stage
  std::vector<int> interaction;         // CoCA frequency per transformer stage, -1 = none
  std::vector<std::size_t> dims;        // optional explicit widths; must equal heads * head_dim
  std::size_t num_classes = 1000;
  std::size_t image_size = 224;
  std::size_t coordinators = 16;
  std::size_t mbconv_expand = 6;
  std::size_t coord_mlp_ratio = 2;
  std::size_t head_hidden = 1024;  // 0 = classifier directly on pooled features
  bool use_coordinators = true;

  static constexpr std::size_t kTransformerStages = 3;

  std::size_t stage_dim(std::size_t t) const { return heads.at(t) * head_dim; }

  /// Throws ConfigError naming the offending stage (1-based over all four).
  void validate() const {
    auto fail = [&](const std::string& where, const std::string& what) {
      throw ConfigError("config '" + name + "', " + where + ": " + what);
    };
    if (conv_dim == 0) fail("stage 1", "conv_dim must be positive");
    if (head_dim == 0) fail("model", "head_dim must be positive");
    if (depths.size() != 4) fail("model", "depths needs 4 entries, got " + std::to_string(depths.size()));
    auto need3 = [&](std::size_t n, const char* key) {
      if (n != kTransformerStages) fail("model", std::string(key) + " needs 3 entries, got " + std::to_string(n));
    };
    need3(heads.size(), "heads");
    need3(mlp_ratios.size(), "mlp_ratios");
    need3(windows.size(), "windows");
    need3(interaction.size(), "interaction");
    if (!dims.empty()) need3(dims.size(), "dims");
    if (num_classes == 0) fail("head", "num_classes must be positive");
    if (image_size == 0) fail("model", "image_size must be positive");
    if (mbconv_expand == 0) fail("stage 1", "mbconv_expand must be positive");
    if (conv_dim * mbconv_expand % 4 != 0) fail("stage 1", "expanded MBConv width not divisible by the SE reduction 4");
    if (depths[0] == 0) fail("stage 1", "depth must be positive");
    for (std::size_t t = 0; t < kTransformerStages; ++t) {
      const std::string stage = "stage " + std::to_string(t + 2);
      if (heads[t] == 0) fail(stage, "heads must be positive");
      if (!dims.empty() && dims[t] != heads[t] * head_dim)
        fail(stage, "dim " + std::to_string(dims[t]) + " != heads x head_dim = " + std::to_string(heads[t]) + " x " +
                        std::to_string(head_dim));
      if (depths[t + 1] == 0) fail(stage, "depth must be positive");
      if (windows[t] == 0) fail(stage, "window must be positive");
      if (interaction[t] == 0 || interaction[t] < -1) fail(stage, "interaction must be -1 or a positive integer");
      if (mlp_ratios[t] == 0 || mlp_ratios[t] * stage_dim(t) % 2 != 0)
        fail(stage, "ConvGLU hidden width must be positive and even");
    }
    if (use_coordinators) {
      if (coordinators == 0) fail("coordinators", "count must be positive");
      if (stage_dim(0) % 4 != 0) fail("stage 2", "generator width not divisible by the SE reduction 4");
    }
  }
};

enum class BlockKind { Wsa, CoCA };

inline const char* to_string(BlockKind k) { return k == BlockKind::Wsa ? "WSA" : "CoCA"; }

/// Block kinds per transformer stage.
using BlockPlan = std::vector<std::vector<BlockKind>>;

/// Blocks whose 1-based index is divisible by the stage's interaction
/// frequency are CoCA blocks; -1 makes the whole stage WSA.
inline std::vector<BlockKind> plan_stage(std::size_t depth, int interaction) {
  if (interaction == 0 || interaction < -1)
    throw ConfigError("interaction must be -1 or a positive integer, got " + std::to_string(interaction));
  std::vector<BlockKind> kinds(depth, BlockKind::Wsa);
  if (interaction > 0)
    for (std::size_t i = 1; i <= depth; ++i)
      if (i % static_cast<std::size_t>(interaction) == 0) kinds[i - 1] = BlockKind::CoCA;
  return kinds;
}

inline BlockPlan plan_blocks(const std::vector<std::size_t>& depths, const std::vector<int>& interaction) {
  if (depths.size() != interaction.size())
    throw ConfigError("plan_blocks: " + std::to_string(depths.size()) + " depths but " +
                      std::to_string(interaction.size()) + " interaction entries");
  BlockPlan plan;
  for (std::size_t s = 0; s < depths.size(); ++s) plan.push_back(plan_stage(depths[s], interaction[s]));
  return plan;
}

inline BlockPlan plan_blocks(const ModelConfig& c) {
  std::vector<std::size_t> d(c.depths.begin() + 1, c.depths.end());
  if (!c.use_coordinators) return plan_blocks(d, std::vector<int>(d.size(), -1));
  return plan_blocks(d, c.interaction);
}

inline ModelConfig variant_11m() {
  ModelConfig c;
  c.name = "11M";
  c.conv_dim = 72;
  c.heads = {4, 8, 14};
  c.depths = {2, 2, 12, 2};
  c.mlp_ratios = {5, 4, 3};
  c.windows = {7, 7, 7};
  c.interaction = {2, 3, -1};
  return c;
}

inline ModelConfig variant_21m() {
  ModelConfig c = variant_11m();
  c.name = "21M";
  c.conv_dim = 96;
  c.heads = {6, 12, 18};
  return c;
}

inline ModelConfig variant_28m() {
  ModelConfig c = variant_21m();
  c.name = "28M";
  c.depths = {2, 2, 15, 2};
  return c;
}

/// Desk-scale configuration for tests and toy training.
inline ModelConfig variant_nano() {
  ModelConfig c;
  c.name = "nano";
  c.conv_dim = 8;
  c.head_dim = 4;
  c.heads = {2, 2, 2};
  c.depths = {1, 1, 2, 1};
  c.mlp_ratios = {5, 4, 3};
  c.windows = {4, 4, 4};
  c.interaction = {2, 2, -1};
  c.num_classes = 4;
  c.image_size = 32;
  c.coordinators = 4;
  c.head_hidden = 0;
  return c;
}

inline std::optional<ModelConfig> find_variant(const std::string& name) {
  if (name == "11M") return variant_11m();
  if (name == "21M") return variant_21m();
  if (name == "28M") return variant_28m();
  if (name == "nano") return variant_nano();
  return std::nullopt;
}

}  // namespace coca
