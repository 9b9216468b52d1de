#pragma once

// Hierarchical clustering encoder: patch embedding, stages of recurrent
// clustering + dispatch with 2x2 pooling between stages, and a linear head
// over the mean of the final-stage centers.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "clusterformer/cluster_ops.hpp"
#include "clusterformer/config.hpp"
#include "clusterformer/tensor.hpp"

namespace clusterformer {

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct ClusterBlock {
  LayerNormParams norm1;
  RcaParams rca;
  LayerNormParams norm2;
  FeedForwardParams ffn;
};

struct EncoderStage {
  LinearParams downsample;  // undefined for stage 0
  std::vector<ClusterBlock> blocks;
  std::size_t K = 0;
};

enum class ParamKind { kWeight, kBias, kNormGain, kNormBias };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
};

struct Model {
  ModelConfig config;
  LinearParams embed;
  LayerNormParams embed_norm;
  std::vector<EncoderStage> stages;
  LinearParams head;
  // Every parameter in canonical order, matching parameter_layout(config).
  std::vector<std::pair<std::string, Tensor>> named;

  std::vector<Tensor> parameters() const;
};

using ParamFactory = std::function<Tensor(const ParamSpec&)>;

// Builds the model structure, asking the factory for each parameter in order.
Model assemble(const ModelConfig& config, const ParamFactory& factory);

// Deep copy: fresh parameter tensors holding the same values.
Model clone_model(const Model& model);

std::vector<ParamSpec> parameter_layout(const ModelConfig& config);
std::size_t param_count(const ModelConfig& config);
std::size_t param_count(const Model& model);

// Truncated normal (std 0.02, cut at 2 std) weights, zero biases, unit gains.
// Values are float-representable so single-precision checkpoints are exact.
Model init_params(const ModelConfig& config, std::uint64_t seed);

// image: H x W x C. Returns h x w x D tokens (layer-normed).
Tensor patch_embed(const Tensor& image, const Model& model);

struct BlockOutput {
  Tensor tokens;  // h x w x D
  ClusterState state;
};

BlockOutput block_forward(const Tensor& tokens, const ClusterBlock& block, std::size_t K, const ModelConfig& config);
BlockOutput stage_forward(const Tensor& tokens, const EncoderStage& stage, const ModelConfig& config);

// h x w x D -> (h/2) x (w/2) x target, 2x2 mean then linear.
Tensor downsample(const Tensor& tokens, const LinearParams& projection);

// Mean over centers, then one linear layer. Returns [num_classes].
Tensor classify(const Tensor& centers, const LinearParams& head);

struct ForwardResult {
  Tensor logits;
  std::vector<ClusterState> states;
  std::vector<std::pair<std::size_t, std::size_t>> grids;  // token grid per stage
};

ForwardResult model_forward(const Tensor& image, const Model& model);

// Logits for each image without autograd, spread over `threads` workers.
// Each image is evaluated independently, so results do not depend on the
// thread count.
std::vector<Tensor> predict_logits(const Model& model, const std::vector<Tensor>& images, std::size_t threads = 1);

}  // namespace clusterformer
