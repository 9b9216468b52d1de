#include "clusterformer/cluster_ops.hpp"

#include <algorithm>
#include <cmath>

namespace clusterformer {

namespace {

thread_local ProjectionTrace* t_trace = nullptr;

constexpr double kCosineEps = 1e-12;

void check_token_set(const Tensor& x, std::size_t dim, const char* what) {
  if (x.rank() != 2 || x.dim(1) != dim) {
    throw ShapeError(std::string(what) + ": expected [n x " + std::to_string(dim) + "], got " +
                     shape_to_string(x.shape()));
  }
}

Tensor project(const LinearParams& layer, const Tensor& x, char which) {
  note_projection(which);
  return apply(layer, x);
}

std::size_t linear_count(const LinearParams& l) {
  return (l.weight.defined() ? l.weight.numel() : 0) + (l.bias.defined() ? l.bias.numel() : 0);
}

std::size_t ffn_count(const FeedForwardParams& f) { return linear_count(f.fc1) + linear_count(f.fc2); }

// Per-head M-step: concatenation over heads of A_h V_h.
Tensor aggregate_heads(const std::vector<Tensor>& assignments, const Tensor& values, std::size_t num_heads) {
  auto value_heads = multi_head_split(values, num_heads);
  std::vector<Tensor> out;
  out.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) out.push_back(matmul(assignments[h], value_heads[h]));
  return multi_head_merge(out);
}

}  // namespace

Tensor apply(const LinearParams& layer, const Tensor& x) { return linear(x, layer.weight, layer.bias); }

Tensor apply(const FeedForwardParams& ffn, const Tensor& x) {
  return apply(ffn.fc2, activate(apply(ffn.fc1, x), ffn.activation));
}

double RcaParams::effective_logit_scale() const {
  return logit_scale > 0.0 ? logit_scale : 1.0 / std::sqrt(static_cast<double>(head_dim));
}

std::size_t RcaParams::parameter_count() const {
  return linear_count(query) + linear_count(key) + linear_count(value) + ffn_count(init_ffn) +
         ffn_count(dispatch_mlp);
}

ProjectionTrace::ProjectionTrace() : parent_(t_trace) { t_trace = this; }
ProjectionTrace::~ProjectionTrace() { t_trace = parent_; }

void note_projection(char which) {
  for (ProjectionTrace* t = t_trace; t != nullptr; t = t->parent_) {
    switch (which) {
      case 'q': ++t->query; break;
      case 'k': ++t->key; break;
      case 'v': ++t->value; break;
      default: break;
    }
  }
}

std::pair<std::size_t, std::size_t> center_grid(std::size_t K, std::size_t h, std::size_t w) {
  if (K < 1 || h < 1 || w < 1) throw ConfigError("center_grid: K and grid extents must be positive");
  if (K > h * w) {
    throw ConfigError("init_centers: K=" + std::to_string(K) + " exceeds " + std::to_string(h) + "x" +
                      std::to_string(w) + " tokens");
  }
  const double ideal = std::sqrt(static_cast<double>(K) * static_cast<double>(h) / static_cast<double>(w));
  std::size_t rows = static_cast<std::size_t>(std::llround(ideal));
  rows = std::clamp<std::size_t>(rows, 1, h);
  std::size_t cols = (K + rows - 1) / rows;
  if (cols > w) {
    cols = w;
    rows = (K + cols - 1) / cols;
  }
  return {rows, cols};
}

Tensor init_centers(const Tensor& features, std::size_t K, const RcaParams& params) {
  if (features.rank() != 3) {
    throw ShapeError("init_centers: expected h x w x D grid, got " + shape_to_string(features.shape()));
  }
  const std::size_t h = features.dim(0), w = features.dim(1), d = features.dim(2);
  const auto [rows, cols] = center_grid(K, h, w);
  Tensor pooled = reshape(adaptive_avg_pool(features, rows, cols), {rows * cols, d});
  if (rows * cols != K) pooled = slice_rows(pooled, 0, K);
  return apply(params.init_ffn, pooled);
}

std::vector<Tensor> multi_head_split(const Tensor& x, std::size_t num_heads) {
  if (x.rank() != 2 || num_heads == 0 || x.dim(1) % num_heads != 0) {
    throw ShapeError("multi_head_split: " + shape_to_string(x.shape()) + " not divisible into " +
                     std::to_string(num_heads) + " heads");
  }
  if (num_heads == 1) return {x};
  const std::size_t width = x.dim(1) / num_heads;
  std::vector<Tensor> heads;
  heads.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) heads.push_back(slice_cols(x, h * width, (h + 1) * width));
  return heads;
}

Tensor multi_head_merge(const std::vector<Tensor>& heads) {
  if (heads.size() == 1) return heads.front();
  return concat_cols(heads);
}

std::vector<Tensor> head_assignments(const Tensor& queries, const Tensor& keys, const RcaParams& params) {
  auto q_heads = multi_head_split(queries, params.num_heads);
  auto k_heads = multi_head_split(keys, params.num_heads);
  const double s = params.effective_logit_scale();
  std::vector<Tensor> out;
  out.reserve(params.num_heads);
  for (std::size_t h = 0; h < params.num_heads; ++h) {
    Tensor logits = scale(matmul(q_heads[h], transpose(k_heads[h])), s);
    out.push_back(softmax_axis(logits, 0));
  }
  return out;
}

Tensor fuse_assignments(const std::vector<Tensor>& per_head) {
  if (per_head.size() == 1) return per_head.front();
  Tensor acc = per_head.front();
  for (std::size_t h = 1; h < per_head.size(); ++h) acc = add(acc, per_head[h]);
  return scale(acc, 1.0 / static_cast<double>(per_head.size()));
}

Tensor e_step(const Tensor& centers, const Tensor& features, const RcaParams& params) {
  check_token_set(centers, params.dim(), "e_step centers");
  check_token_set(features, params.dim(), "e_step features");
  Tensor q = project(params.query, centers, 'q');
  Tensor k = project(params.key, features, 'k');
  return fuse_assignments(head_assignments(q, k, params));
}

Tensor m_step(const Tensor& assignment, const Tensor& features, const RcaParams& params) {
  check_token_set(features, params.dim(), "m_step features");
  if (assignment.rank() != 2 || assignment.dim(1) != features.dim(0)) {
    throw ShapeError("m_step: shape mismatch " + shape_to_string(assignment.shape()) + " vs " +
                     shape_to_string(features.shape()));
  }
  return matmul(assignment, project(params.value, features, 'v'));
}

ClusterState recurrent_cluster(const Tensor& features, const Tensor& init, std::size_t T, const RcaParams& params) {
  if (T == 0) throw ConfigError("recurrent_cluster: T must be at least 1");
  check_token_set(features, params.dim(), "recurrent_cluster features");
  check_token_set(init, params.dim(), "recurrent_cluster centers");
  const Tensor keys = project(params.key, features, 'k');
  const Tensor values = project(params.value, features, 'v');
  Tensor centers = init;
  std::vector<Tensor> assignments;
  for (std::size_t t = 0; t < T; ++t) {
    Tensor queries = project(params.query, centers, 'q');
    assignments = head_assignments(queries, keys, params);
    Tensor updated = aggregate_heads(assignments, values, params.num_heads);
    centers = params.m_step_residual ? add(centers, updated) : updated;
  }
  return {centers, fuse_assignments(assignments)};
}

Tensor dispatch_delta(const Tensor& features, const Tensor& centers, const RcaParams& params) {
  if (features.rank() != 2 || centers.rank() != 2 || features.dim(1) != centers.dim(1)) {
    throw ShapeError("dispatch_features: shape mismatch " + shape_to_string(features.shape()) + " vs " +
                     shape_to_string(centers.shape()));
  }
  const std::size_t K = centers.dim(0);
  Tensor sim;  // HW x K
  if (params.similarity == Similarity::kCosine) {
    sim = matmul(row_normalize(features, kCosineEps), transpose(row_normalize(centers, kCosineEps)));
  } else {
    sim = scale(matmul(features, transpose(centers)), 1.0 / std::sqrt(static_cast<double>(features.dim(1))));
  }
  Tensor aggregate = scale(matmul(sim, centers), 1.0 / static_cast<double>(K));
  return apply(params.dispatch_mlp, aggregate);
}

Tensor dispatch_features(const Tensor& features, const Tensor& centers, const RcaParams& params) {
  return add(features, dispatch_delta(features, centers, params));
}

Tensor legacy_cross_attention(const Tensor& centers, const Tensor& features, const RcaParams& params,
                              LegacyMode mode) {
  check_token_set(centers, params.dim(), "legacy_cross_attention centers");
  check_token_set(features, params.dim(), "legacy_cross_attention features");
  Tensor q = project(params.query, centers, 'q');
  Tensor k = project(params.key, features, 'k');
  Tensor v = project(params.value, features, 'v');
  const std::size_t axis = (mode == LegacyMode::kSoftmaxOverK) ? 0 : 1;
  auto q_heads = multi_head_split(q, params.num_heads);
  auto k_heads = multi_head_split(k, params.num_heads);
  std::vector<Tensor> weights;
  for (std::size_t h = 0; h < params.num_heads; ++h) {
    weights.push_back(
        softmax_axis(scale(matmul(q_heads[h], transpose(k_heads[h])), params.effective_logit_scale()), axis));
  }
  return add(centers, aggregate_heads(weights, v, params.num_heads));
}

}  // namespace clusterformer
