#pragma once

// Recurrent cross-attention clustering.
//
// Cluster centers C (K x D) act as attention queries over image tokens
// I (HW x D). One recurrent layer alternates
//
//   E-step:  A = softmax over K of (C Wq)(I Wk)^T        A is K x HW
//   M-step:  C = A (I Wv)
//
// T times with one shared set of projections. Key and value projections are
// computed once per call, the query projection once per iteration.

#include <cstddef>
#include <utility>
#include <vector>

#include "clusterformer/ops.hpp"
#include "clusterformer/tensor.hpp"

namespace clusterformer {

struct LinearParams {
  Tensor weight;  // d_in x d_out
  Tensor bias;    // d_out, may be undefined
};

Tensor apply(const LinearParams& layer, const Tensor& x);

// Two fully connected layers with an activation between them.
struct FeedForwardParams {
  LinearParams fc1;
  LinearParams fc2;
  Activation activation = Activation::kGelu;
};

Tensor apply(const FeedForwardParams& ffn, const Tensor& x);

enum class Similarity { kCosine, kScaledDot };

struct RcaParams {
  LinearParams query;
  LinearParams key;
  LinearParams value;
  FeedForwardParams init_ffn;
  FeedForwardParams dispatch_mlp;
  std::size_t num_heads = 1;
  std::size_t head_dim = 32;
  double logit_scale = 0.0;  // <= 0 selects 1 / sqrt(head_dim)
  Similarity similarity = Similarity::kCosine;
  bool m_step_residual = false;

  std::size_t dim() const { return num_heads * head_dim; }
  double effective_logit_scale() const;
  std::size_t parameter_count() const;
};

struct ClusterState {
  Tensor centers;     // K x D
  Tensor assignment;  // K x HW, columns sum to 1
};

// Counts projection applications on the current thread while alive.
class ProjectionTrace {
 public:
  ProjectionTrace();
  ~ProjectionTrace();
  ProjectionTrace(const ProjectionTrace&) = delete;
  ProjectionTrace& operator=(const ProjectionTrace&) = delete;

  std::size_t query = 0;
  std::size_t key = 0;
  std::size_t value = 0;

 private:
  ProjectionTrace* parent_;
  friend void note_projection(char which);
};

// Called by the projection sites: 'q', 'k' or 'v'.
void note_projection(char which);

// Near-square (rows, cols) layout for K pooled cells on an h x w grid; the
// flattened pool is truncated to the first K cells when rows * cols > K.
std::pair<std::size_t, std::size_t> center_grid(std::size_t K, std::size_t h, std::size_t w);

// features: h x w x D grid. Returns K x D.
Tensor init_centers(const Tensor& features, std::size_t K, const RcaParams& params);

std::vector<Tensor> multi_head_split(const Tensor& x, std::size_t num_heads);
Tensor multi_head_merge(const std::vector<Tensor>& heads);

// Per-head assignment maps, softmax over the K axis of scaled Q K^T logits.
std::vector<Tensor> head_assignments(const Tensor& queries, const Tensor& keys, const RcaParams& params);
// Mean over heads.
Tensor fuse_assignments(const std::vector<Tensor>& per_head);

Tensor e_step(const Tensor& centers, const Tensor& features, const RcaParams& params);
// assignment (K x HW) times projected values, shared by every head.
Tensor m_step(const Tensor& assignment, const Tensor& features, const RcaParams& params);

ClusterState recurrent_cluster(const Tensor& features, const Tensor& init, std::size_t T, const RcaParams& params);

// MLP((1/K) sum_k sim(C_k, p_i) C_k) for every token p_i.
Tensor dispatch_delta(const Tensor& features, const Tensor& centers, const RcaParams& params);
// features + dispatch_delta(features, centers)
Tensor dispatch_features(const Tensor& features, const Tensor& centers, const RcaParams& params);

enum class LegacyMode { kSoftmaxOverHW, kSoftmaxOverK };

// Single residual cross-attention update C + softmax(Q K^T) V.
Tensor legacy_cross_attention(const Tensor& centers, const Tensor& features, const RcaParams& params,
                              LegacyMode mode);

}  // namespace clusterformer
