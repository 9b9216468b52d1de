#include "clusterformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tensor_internal.hpp"

namespace clusterformer {

using detail::make_result;
using detail::TensorImpl;

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_to_string(x.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += G[m x n] * B[k x n]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* g, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * G[m x n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* g, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

void accumulate(TensorImpl& parent, std::span<const double> g, double factor = 1.0) {
  if (!parent.requires_grad) return;
  auto& pg = parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) pg[i] += factor * g[i];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  record_flops(2ull * m * k * n);
  return make_result({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](TensorImpl& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) gemm_nt(m, n, k, self.grad.data(), pb.data.data(), pa.ensure_grad().data());
    if (pb.requires_grad) gemm_tn(m, k, n, pa.data.data(), self.grad.data(), pb.ensure_grad().data());
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  auto in = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  return make_result({c, r}, std::move(out), "transpose", {a}, [r, c](TensorImpl& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& pg = p.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) pg[i * c + j] += self.grad[j * r + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  record_flops(out.size());
  return make_result(a.shape(), std::move(out), "add", {a, b}, [](TensorImpl& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  record_flops(out.size());
  return make_result(a.shape(), std::move(out), "sub", {a, b}, [](TensorImpl& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad, -1.0);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  record_flops(out.size());
  return make_result(a.shape(), std::move(out), "mul", {a, b}, [](TensorImpl& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  record_flops(out.size());
  return make_result(a.shape(), std::move(out), "scale", {a}, [factor](TensorImpl& self) {
    accumulate(*self.parents[0], self.grad, factor);
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (bias.numel() != d) {
    throw ShapeError("add_row_bias: shape mismatch " + shape_to_string(x.shape()) + " vs " +
                     shape_to_string(bias.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += b[j];
  record_flops(n * d);
  return make_result(x.shape(), std::move(out), "add_row_bias", {x, bias}, [n, d](TensorImpl& self) {
    accumulate(*self.parents[0], self.grad);
    auto& pb = *self.parents[1];
    if (!pb.requires_grad) return;
    auto& g = pb.ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0)) {
    throw ShapeError("linear: shape mismatch " + shape_to_string(x.shape()) + " vs " +
                     shape_to_string(weight.shape()));
  }
  Tensor y = matmul(x, weight);
  return bias.defined() ? add_row_bias(y, bias) : y;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  record_flops(x.numel());
  return make_result({1}, {s}, "sum", {x}, [](TensorImpl& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    for (auto& g : p.ensure_grad()) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor softmax_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax_axis: axis " + std::to_string(axis) + " out of range for " +
                     shape_to_string(x.shape()));
  }
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t q = 0; q < inner; ++q) {
      const std::size_t base = o * len * inner + q;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, in[base + l * inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(in[base + l * inner] - mx);
        out[base + l * inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= total;
    }
  }
  record_flops(8ull * in.size());
  return make_result(shape, std::move(out), "softmax_axis", {x}, [outer, inner, len](TensorImpl& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& pg = p.ensure_grad();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t q = 0; q < inner; ++q) {
        const std::size_t base = o * len * inner + q;
        double dot = 0.0;
        for (std::size_t l = 0; l < len; ++l) dot += g[base + l * inner] * y[base + l * inner];
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t i = base + l * inner;
          pg[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double v = in[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return make_result(x.shape(), std::move(out), "gelu", {x}, [](TensorImpl& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& pg = p.ensure_grad();
    for (std::size_t i = 0; i < pg.size(); ++i) {
      const double v = p.data[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      pg[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::kGelu:
      return gelu(x);
    case Activation::kIdentity:
      return x;
  }
  return x;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: shape mismatch " + shape_to_string(x.shape()) + " vs gamma " +
                     shape_to_string(gamma.shape()) + ", beta " + shape_to_string(beta.shape()));
  }
  auto in = x.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  std::vector<double> xhat(in.size());
  std::vector<double> inv_std(n);
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = in.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * inv_std[i];
      out[i * d + j] = xhat[i * d + j] * gm[j] + bt[j];
    }
  }
  return make_result(x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
                     [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorImpl& self) {
                       auto& px = *self.parents[0];
                       auto& pg = *self.parents[1];
                       auto& pb = *self.parents[2];
                       const auto& g = self.grad;
                       if (pg.requires_grad) {
                         auto& gg = pg.ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
                       }
                       if (pb.requires_grad) {
                         auto& gb = pb.ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                       }
                       if (!px.requires_grad) return;
                       auto& gx = px.ensure_grad();
                       const double inv_d = 1.0 / static_cast<double>(d);
                       for (std::size_t i = 0; i < n; ++i) {
                         double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           const double dxh = g[i * d + j] * pg.data[j];
                           mean_dxhat += dxh;
                           mean_dxhat_xhat += dxh * xhat[i * d + j];
                         }
                         mean_dxhat *= inv_d;
                         mean_dxhat_xhat *= inv_d;
                         for (std::size_t j = 0; j < d; ++j) {
                           const double dxh = g[i * d + j] * pg.data[j];
                           gx[i * d + j] += inv_std[i] * (dxh - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
                         }
                       }
                     });
}

Tensor adaptive_avg_pool(const Tensor& grid, std::size_t out_h, std::size_t out_w) {
  require_rank(grid, 3, "adaptive_avg_pool");
  const std::size_t h = grid.dim(0), w = grid.dim(1), d = grid.dim(2);
  if (out_h < 1 || out_w < 1 || out_h > h || out_w > w) {
    throw ShapeError("adaptive_avg_pool: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " not within input " + shape_to_string(grid.shape()));
  }
  // Window [floor(i*n/o), ceil((i+1)*n/o)).
  auto windows = [](std::size_t n, std::size_t o) {
    std::vector<std::pair<std::size_t, std::size_t>> wins(o);
    for (std::size_t i = 0; i < o; ++i) wins[i] = {(i * n) / o, ((i + 1) * n + o - 1) / o};
    return wins;
  };
  auto rows = windows(h, out_h);
  auto cols = windows(w, out_w);
  auto in = grid.data();
  std::vector<double> out(out_h * out_w * d, 0.0);
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      double* cell = out.data() + (i * out_w + j) * d;
      const double count = static_cast<double>((rows[i].second - rows[i].first) * (cols[j].second - cols[j].first));
      for (std::size_t r = rows[i].first; r < rows[i].second; ++r)
        for (std::size_t c = cols[j].first; c < cols[j].second; ++c)
          for (std::size_t k = 0; k < d; ++k) cell[k] += in[(r * w + c) * d + k];
      for (std::size_t k = 0; k < d; ++k) cell[k] /= count;
    }
  }
  return make_result({out_h, out_w, d}, std::move(out), "adaptive_avg_pool", {grid},
                     [rows, cols, w, d, out_w](TensorImpl& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) return;
                       auto& pg = p.ensure_grad();
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                         for (std::size_t j = 0; j < cols.size(); ++j) {
                           const double* g = self.grad.data() + (i * out_w + j) * d;
                           const double inv = 1.0 / static_cast<double>((rows[i].second - rows[i].first) *
                                                                        (cols[j].second - cols[j].first));
                           for (std::size_t r = rows[i].first; r < rows[i].second; ++r)
                             for (std::size_t c = cols[j].first; c < cols[j].second; ++c)
                               for (std::size_t k = 0; k < d; ++k) pg[(r * w + c) * d + k] += g[k] * inv;
                         }
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_to_string(logits.shape()));
  }
  for (auto l : labels) {
    if (l >= c) {
      throw ConfigError("cross_entropy: label " + std::to_string(l) + " out of range for " + std::to_string(c) +
                        " classes");
    }
  }
  auto z = logits.data();
  std::vector<double> probs(n * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = z.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lse);
    loss += lse - row[labels[i]];
  }
  loss /= static_cast<double>(n);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return make_result({1}, {loss}, "cross_entropy", {logits},
                     [n, c, probs = std::move(probs), lab = std::move(lab)](TensorImpl& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) return;
                       auto& pg = p.ensure_grad();
                       const double g = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < c; ++j) {
                           const double target = (j == lab[i]) ? 1.0 : 0.0;
                           pg[i * c + j] += g * (probs[i * c + j] - target);
                         }
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {x},
                     [](TensorImpl& self) { accumulate(*self.parents[0], self.grad); });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_rows");
  const std::size_t d = x.dim(1);
  if (begin >= end || end > x.dim(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_to_string(x.shape()));
  }
  std::vector<double> out(x.data().begin() + begin * d, x.data().begin() + end * d);
  return make_result({end - begin, d}, std::move(out), "slice_rows", {x}, [begin, d](TensorImpl& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& pg = p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pg[begin * d + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_cols");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (begin >= end || end > d) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_to_string(x.shape()));
  }
  const std::size_t w = end - begin;
  auto in = x.data();
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = in[i * d + begin + j];
  return make_result({n, w}, std::move(out), "slice_cols", {x}, [n, d, w, begin](TensorImpl& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& pg = p.ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) pg[i * d + begin + j] += self.grad[i * w + j];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts.front().dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != d) {
      throw ShapeError("concat_rows: shape mismatch " + shape_to_string(parts.front().shape()) + " vs " +
                       shape_to_string(p.shape()));
    }
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result({rows, d}, std::move(out), "concat_rows", parts, [](TensorImpl& self) {
    std::size_t offset = 0;
    for (auto& parent : self.parents) {
      const std::size_t len = parent->data.size();
      accumulate(*parent, std::span<const double>(self.grad).subspan(offset, len));
      offset += len;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts.front().dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != n) {
      throw ShapeError("concat_cols: shape mismatch " + shape_to_string(parts.front().shape()) + " vs " +
                       shape_to_string(p.shape()));
    }
    total += p.dim(1);
  }
  std::vector<double> out(n * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    auto in = p.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + offset + j] = in[i * w + j];
    offset += w;
  }
  return make_result({n, total}, std::move(out), "concat_cols", parts, [n, total](TensorImpl& self) {
    std::size_t off = 0;
    for (auto& parent : self.parents) {
      const std::size_t w = parent->shape[1];
      if (parent->requires_grad) {
        auto& pg = parent->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j) pg[i * w + j] += self.grad[i * total + off + j];
      }
      off += w;
    }
  });
}

Tensor row_normalize(const Tensor& x, double eps) {
  require_rank(x, 2, "row_normalize");
  const std::size_t n = x.dim(0), d = x.dim(1);
  auto in = x.data();
  std::vector<double> norms(n);
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += in[i * d + j] * in[i * d + j];
    norms[i] = std::sqrt(s);
    const double denom = std::max(norms[i], eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = in[i * d + j] / denom;
  }
  return make_result(x.shape(), std::move(out), "row_normalize", {x},
                     [n, d, eps, norms = std::move(norms)](TensorImpl& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) return;
                       auto& pg = p.ensure_grad();
                       for (std::size_t i = 0; i < n; ++i) {
                         const double* g = self.grad.data() + i * d;
                         const double* xv = p.data.data() + i * d;
                         if (norms[i] > eps) {
                           double dot = 0.0;
                           for (std::size_t j = 0; j < d; ++j) dot += xv[j] * g[j];
                           const double inv = 1.0 / norms[i];
                           const double inv3 = inv * inv * inv;
                           for (std::size_t j = 0; j < d; ++j) pg[i * d + j] += g[j] * inv - xv[j] * dot * inv3;
                         } else {
                           for (std::size_t j = 0; j < d; ++j) pg[i * d + j] += g[j] / eps;
                         }
                       }
                     });
}

Tensor mean_rows(const Tensor& x) {
  require_rank(x, 2, "mean_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  auto in = x.data();
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += in[i * d + j];
  for (auto& v : out) v /= static_cast<double>(n);
  return make_result({1, d}, std::move(out), "mean_rows", {x}, [n, d](TensorImpl& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& pg = p.ensure_grad();
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) pg[i * d + j] += self.grad[j] * inv;
  });
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  require_rank(image, 3, "patchify");
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  if (patch == 0 || H % patch != 0 || W % patch != 0) {
    throw ShapeError("patchify: image " + shape_to_string(image.shape()) + " not divisible by patch " +
                     std::to_string(patch));
  }
  const std::size_t gh = H / patch, gw = W / patch, len = patch * patch * C;
  // index[out] = flat input position
  std::vector<std::size_t> index(gh * gw * len);
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px)
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t o = (py * gw + px) * len + (dy * patch + dx) * C + c;
            index[o] = ((py * patch + dy) * W + (px * patch + dx)) * C + c;
          }
  auto in = image.data();
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = in[index[i]];
  return make_result({gh * gw, len}, std::move(out), "patchify", {image},
                     [index = std::move(index)](TensorImpl& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) return;
                       auto& pg = p.ensure_grad();
                       for (std::size_t i = 0; i < index.size(); ++i) pg[index[i]] += self.grad[i];
                     });
}

}  // namespace clusterformer
