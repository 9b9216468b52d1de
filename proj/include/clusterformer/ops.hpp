#pragma once

// Differentiable operations over Tensor. Token sets are always
// (tokens x channels); grids are (rows x cols x channels).

#include <cstddef>
#include <span>
#include <vector>

#include "clusterformer/tensor.hpp"

namespace clusterformer {

enum class Activation { kGelu, kIdentity };

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x[n x d] + bias[d] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
// x[n x d_in] * weight[d_in x d_out] (+ bias[d_out] when defined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Max-subtracted softmax along `axis`.
Tensor softmax_axis(const Tensor& x, std::size_t axis);

// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
Tensor gelu(const Tensor& x);
Tensor activate(const Tensor& x, Activation act);

// Per-row normalisation with population variance, then gamma/beta affine.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

// Cell (i, j) averages rows [floor(i h / oh), ceil((i + 1) h / oh)) and the
// analogous column window.
Tensor adaptive_avg_pool(const Tensor& grid, std::size_t out_h, std::size_t out_w);

// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Rows divided by max(||row||, eps).
Tensor row_normalize(const Tensor& x, double eps);
// [n x d] -> [1 x d]
Tensor mean_rows(const Tensor& x);

// image[H x W x C] -> [(H/p)(W/p) x p*p*C], patches in raster order, each
// flattened as (dy, dx, c).
Tensor patchify(const Tensor& image, std::size_t patch);

}  // namespace clusterformer
