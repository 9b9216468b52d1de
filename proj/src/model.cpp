#include "clusterformer/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <iostream>
#include <mutex>
#include <random>
#include <thread>

#include "clusterformer/errors.hpp"
#include "clusterformer/ops.hpp"

namespace clusterformer {

namespace {

struct Builder {
  const ParamFactory& factory;
  std::vector<std::pair<std::string, Tensor>>& named;

  Tensor make(const std::string& name, Shape shape, ParamKind kind) {
    ParamSpec spec{name, std::move(shape), kind};
    Tensor t = factory(spec);
    named.emplace_back(name, t);
    return t;
  }

  LinearParams linear(const std::string& prefix, std::size_t in, std::size_t out) {
    LinearParams p;
    p.weight = make(prefix + ".weight", {in, out}, ParamKind::kWeight);
    p.bias = make(prefix + ".bias", {out}, ParamKind::kBias);
    return p;
  }

  LayerNormParams norm(const std::string& prefix, std::size_t d) {
    return {make(prefix + ".gamma", {d}, ParamKind::kNormGain), make(prefix + ".beta", {d}, ParamKind::kNormBias)};
  }

  FeedForwardParams ffn(const std::string& prefix, std::size_t d, std::size_t hidden, Activation act) {
    FeedForwardParams f;
    f.fc1 = linear(prefix + ".fc1", d, hidden);
    f.fc2 = linear(prefix + ".fc2", hidden, d);
    f.activation = act;
    return f;
  }
};

Tensor tokens_to_rows(const Tensor& grid) {
  if (grid.rank() != 3) throw ShapeError("expected h x w x D tokens, got " + shape_to_string(grid.shape()));
  return reshape(grid, {grid.dim(0) * grid.dim(1), grid.dim(2)});
}

double truncated_normal(std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  for (;;) {
    const double v = normal(rng);
    if (std::abs(v) <= 2.0 * stddev) return v;
  }
}

}  // namespace

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

Model assemble(const ModelConfig& config, const ParamFactory& factory) {
  config.validate();
  Model m;
  m.config = config;
  Builder b{factory, m.named};
  const std::size_t d0 = config.stage_dims[0];
  m.embed = b.linear("embed", config.patch_size * config.patch_size * config.in_channels, d0);
  m.embed_norm = b.norm("embed_norm", d0);
  for (std::size_t s = 0; s < config.num_stages(); ++s) {
    const std::string sp = "stage" + std::to_string(s);
    const std::size_t d = config.stage_dims[s];
    EncoderStage stage;
    stage.K = config.effective_K(s);
    if (s > 0) stage.downsample = b.linear(sp + ".downsample", config.stage_dims[s - 1], d);
    for (std::size_t l = 0; l < config.stage_depths[s]; ++l) {
      const std::string bp = sp + ".block" + std::to_string(l);
      const std::size_t hidden = config.ffn_ratio * d;
      ClusterBlock blk;
      blk.norm1 = b.norm(bp + ".norm1", d);
      blk.rca.query = b.linear(bp + ".rca.query", d, d);
      blk.rca.key = b.linear(bp + ".rca.key", d, d);
      blk.rca.value = b.linear(bp + ".rca.value", d, d);
      blk.rca.init_ffn = b.ffn(bp + ".rca.init_ffn", d, hidden, config.activation);
      blk.rca.dispatch_mlp = b.ffn(bp + ".rca.dispatch", d, hidden, config.activation);
      blk.rca.num_heads = config.num_heads[s];
      blk.rca.head_dim = config.head_dim;
      blk.rca.logit_scale = config.logit_scale;
      blk.rca.similarity = config.similarity;
      blk.rca.m_step_residual = config.m_step_residual;
      blk.norm2 = b.norm(bp + ".norm2", d);
      blk.ffn = b.ffn(bp + ".ffn", d, hidden, config.activation);
      stage.blocks.push_back(std::move(blk));
    }
    m.stages.push_back(std::move(stage));
  }
  m.head = b.linear("head", config.stage_dims.back(), config.num_classes);
  return m;
}

Model clone_model(const Model& model) {
  std::size_t i = 0;
  return assemble(model.config, [&](const ParamSpec& spec) {
    const Tensor& src = model.named.at(i++).second;
    return Tensor::parameter(spec.shape, {src.data().begin(), src.data().end()});
  });
}

std::vector<ParamSpec> parameter_layout(const ModelConfig& config) {
  std::vector<ParamSpec> specs;
  assemble(config, [&](const ParamSpec& s) {
    specs.push_back(s);
    return Tensor();
  });
  return specs;
}

std::size_t param_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& s : parameter_layout(config)) n += shape_numel(s.shape);
  return n;
}

std::size_t param_count(const Model& model) {
  std::size_t n = 0;
  for (const auto& [name, t] : model.named) n += t.numel();
  return n;
}

Model init_params(const ModelConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Model m = assemble(config, [&](const ParamSpec& s) {
    std::vector<double> values(shape_numel(s.shape));
    switch (s.kind) {
      case ParamKind::kWeight:
        for (auto& v : values) v = static_cast<float>(truncated_normal(rng, 0.02));
        break;
      case ParamKind::kNormGain:
        std::fill(values.begin(), values.end(), 1.0);
        break;
      case ParamKind::kBias:
      case ParamKind::kNormBias:
        break;
    }
    return Tensor::parameter(s.shape, std::move(values));
  });
  for (std::size_t s = 0; s < config.num_stages(); ++s) {
    if (config.effective_K(s) < config.stage_K[s]) {
      std::clog << "warning: stage " << s << " K=" << config.stage_K[s] << " exceeds its "
                << config.grid_side(s) * config.grid_side(s) << " tokens; clamped to " << config.effective_K(s) << '\n';
    }
  }
  return m;
}

Tensor patch_embed(const Tensor& image, const Model& model) {
  const ModelConfig& c = model.config;
  if (image.rank() != 3 || image.dim(2) != c.in_channels) {
    throw ShapeError("patch_embed: expected H x W x " + std::to_string(c.in_channels) + " image, got " +
                     shape_to_string(image.shape()));
  }
  const std::size_t gh = image.dim(0) / c.patch_size, gw = image.dim(1) / c.patch_size;
  Tensor patches = patchify(image, c.patch_size);
  Tensor tokens = layer_norm(apply(model.embed, patches), model.embed_norm.gamma, model.embed_norm.beta,
                             c.layer_norm_eps);
  return reshape(tokens, {gh, gw, c.stage_dims[0]});
}

BlockOutput block_forward(const Tensor& tokens, const ClusterBlock& block, std::size_t K, const ModelConfig& config) {
  const std::size_t h = tokens.dim(0), w = tokens.dim(1), d = tokens.dim(2);
  const Tensor x = tokens_to_rows(tokens);
  const Tensor normed = layer_norm(x, block.norm1.gamma, block.norm1.beta, config.layer_norm_eps);
  const Tensor init = init_centers(reshape(normed, {h, w, d}), K, block.rca);
  ClusterState state = recurrent_cluster(normed, init, config.T, block.rca);
  const Tensor x1 = add(x, dispatch_delta(normed, state.centers, block.rca));
  const Tensor x2 = add(x1, apply(block.ffn, layer_norm(x1, block.norm2.gamma, block.norm2.beta, config.layer_norm_eps)));
  return {reshape(x2, {h, w, d}), std::move(state)};
}

BlockOutput stage_forward(const Tensor& tokens, const EncoderStage& stage, const ModelConfig& config) {
  if (tokens.rank() != 3) throw ShapeError("stage_forward: expected h x w x D tokens, got " + shape_to_string(tokens.shape()));
  BlockOutput out{tokens, {}};
  for (const auto& block : stage.blocks) out = block_forward(out.tokens, block, stage.K, config);
  return out;
}

Tensor downsample(const Tensor& tokens, const LinearParams& projection) {
  if (tokens.rank() != 3 || tokens.dim(0) % 2 != 0 || tokens.dim(1) % 2 != 0) {
    throw ShapeError("downsample: token grid must have even extents, got " + shape_to_string(tokens.shape()));
  }
  const std::size_t h = tokens.dim(0) / 2, w = tokens.dim(1) / 2;
  const Tensor pooled = adaptive_avg_pool(tokens, h, w);
  const Tensor projected = apply(projection, tokens_to_rows(pooled));
  return reshape(projected, {h, w, projected.dim(1)});
}

Tensor classify(const Tensor& centers, const LinearParams& head) {
  const Tensor logits = apply(head, mean_rows(centers));
  return reshape(logits, {logits.dim(1)});
}

ForwardResult model_forward(const Tensor& image, const Model& model) {
  const ModelConfig& c = model.config;
  if (image.rank() != 3 || image.dim(0) != c.image_size || image.dim(1) != c.image_size) {
    throw ShapeError("model_forward: expected " + std::to_string(c.image_size) + "x" + std::to_string(c.image_size) +
                     " image, got " + shape_to_string(image.shape()));
  }
  ForwardResult result;
  Tensor tokens = patch_embed(image, model);
  for (std::size_t s = 0; s < model.stages.size(); ++s) {
    if (s > 0) tokens = downsample(tokens, model.stages[s].downsample);
    result.grids.emplace_back(tokens.dim(0), tokens.dim(1));
    BlockOutput out = stage_forward(tokens, model.stages[s], c);
    tokens = std::move(out.tokens);
    result.states.push_back(std::move(out.state));
  }
  result.logits = classify(result.states.back().centers, model.head);
  return result;
}

std::vector<Tensor> predict_logits(const Model& model, const std::vector<Tensor>& images, std::size_t threads) {
  std::vector<Tensor> out(images.size());
  const Precision precision = current_precision();
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    PrecisionScope scope(precision);
    NoGradScope no_grad;
    for (std::size_t i = next++; i < images.size(); i = next++) {
      try {
        out[i] = model_forward(images[i], model).logits;
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, images.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace clusterformer
