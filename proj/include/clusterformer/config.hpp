#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "clusterformer/cluster_ops.hpp"

namespace clusterformer {

// Flat `key = value` text; '#' starts a comment, blank lines are ignored.
using KeyValues = std::map<std::string, std::string>;
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_value_file(const std::string& path);

struct ModelConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 4;
  std::size_t in_channels = 3;
  std::vector<std::size_t> stage_depths{2, 2, 6, 2};
  std::vector<std::size_t> stage_dims{96, 192, 384, 768};
  std::vector<std::size_t> stage_K{100, 100, 100, 100};
  std::vector<std::size_t> num_heads{3, 6, 12, 24};
  std::size_t T = 3;
  std::size_t head_dim = 32;
  std::size_t num_classes = 1000;
  std::uint64_t seed = 0;
  std::size_t ffn_ratio = 4;
  double layer_norm_eps = 1e-5;
  double logit_scale = 0.0;  // 0 selects 1 / sqrt(head_dim)
  Activation activation = Activation::kGelu;
  Similarity similarity = Similarity::kCosine;
  bool m_step_residual = false;

  // Swin-Tiny layout: patch 4, depths 2/2/6/2, widths 96..768, K = 100.
  static ModelConfig swin_tiny();
  // Desk-scale: 32 px, patch 2, 2 stages of width 16/32, K = 4, T = 3.
  static ModelConfig tiny();

  std::size_t num_stages() const { return stage_dims.size(); }
  // Token grid side at stage s (square inputs).
  std::size_t grid_side(std::size_t stage) const;
  // stage_K clamped to the stage's token count.
  std::size_t effective_K(std::size_t stage) const;

  // Throws ConfigError on any violated invariant.
  void validate() const;

  // Unknown keys are ignored so model and run settings can share a file.
  static ModelConfig from_key_values(const KeyValues& kv, ModelConfig base = swin_tiny());
  // Canonical text form, one key per line, round-trips through from_key_values.
  std::string to_text() const;

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace clusterformer
