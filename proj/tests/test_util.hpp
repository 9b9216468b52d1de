#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <random>
#include <vector>

#include "clusterformer/tensor.hpp"

namespace cftest {

inline clusterformer::Tensor random_tensor(std::mt19937_64& rng, clusterformer::Shape shape, double lo = -1.0,
                                           double hi = 1.0, bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(clusterformer::shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return clusterformer::Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

inline clusterformer::Tensor param(std::mt19937_64& rng, clusterformer::Shape shape, double lo = -1.0,
                                   double hi = 1.0) {
  return random_tensor(rng, std::move(shape), lo, hi, true);
}

inline std::vector<double> to_vec(const clusterformer::Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline std::vector<double> grad_or_zero(const clusterformer::Tensor& t) {
  if (!t.has_grad()) return std::vector<double>(t.numel(), 0.0);
  return {t.grad().begin(), t.grad().end()};
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace cftest

#include "clusterformer/cluster_ops.hpp"
#include "clusterformer/oracle.hpp"

namespace cftest {

inline clusterformer::LinearParams random_linear(std::mt19937_64& rng, std::size_t in, std::size_t out,
                                                 bool requires_grad = false, double amp = 0.5) {
  return {random_tensor(rng, {in, out}, -amp, amp, requires_grad),
          random_tensor(rng, {out}, -amp, amp, requires_grad)};
}

inline clusterformer::Tensor eye(std::size_t n) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return clusterformer::Tensor::from_data({n, n}, d);
}

inline clusterformer::LinearParams identity_linear(std::size_t d) {
  return {eye(d), clusterformer::Tensor::zeros({d})};
}

// Two-layer FFN that computes the identity: [I 0] then [I; 0], no activation.
inline clusterformer::FeedForwardParams identity_ffn(std::size_t d, std::size_t hidden) {
  std::vector<double> w1(d * hidden, 0.0), w2(hidden * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    w1[i * hidden + i] = 1.0;
    w2[i * d + i] = 1.0;
  }
  return {{clusterformer::Tensor::from_data({d, hidden}, w1), clusterformer::Tensor::zeros({hidden})},
          {clusterformer::Tensor::from_data({hidden, d}, w2), clusterformer::Tensor::zeros({d})},
          clusterformer::Activation::kIdentity};
}

inline clusterformer::RcaParams random_rca(std::mt19937_64& rng, std::size_t d, std::size_t heads,
                                           bool requires_grad = false) {
  clusterformer::RcaParams p;
  p.num_heads = heads;
  p.head_dim = d / heads;
  p.query = random_linear(rng, d, d, requires_grad);
  p.key = random_linear(rng, d, d, requires_grad);
  p.value = random_linear(rng, d, d, requires_grad);
  p.init_ffn = {random_linear(rng, d, 4 * d, requires_grad), random_linear(rng, 4 * d, d, requires_grad),
                clusterformer::Activation::kGelu};
  p.dispatch_mlp = {random_linear(rng, d, d, requires_grad), random_linear(rng, d, d, requires_grad),
                    clusterformer::Activation::kGelu};
  return p;
}

inline clusterformer::RcaParams identity_rca(std::size_t d) {
  clusterformer::RcaParams p;
  p.num_heads = 1;
  p.head_dim = d;
  p.logit_scale = 1.0;
  p.query = p.key = p.value = identity_linear(d);
  p.init_ffn = identity_ffn(d, 4 * d);
  p.dispatch_mlp = identity_ffn(d, d);
  return p;
}

inline clusterformer::OracleRcaWeights oracle_weights(const clusterformer::RcaParams& p) {
  clusterformer::OracleRcaWeights w;
  w.wq = clusterformer::DenseMatrix::from(p.query.weight);
  w.wk = clusterformer::DenseMatrix::from(p.key.weight);
  w.wv = clusterformer::DenseMatrix::from(p.value.weight);
  w.bq = to_vec(p.query.bias);
  w.bk = to_vec(p.key.bias);
  w.bv = to_vec(p.value.bias);
  w.num_heads = p.num_heads;
  w.logit_scale = p.effective_logit_scale();
  return w;
}

}  // namespace cftest
