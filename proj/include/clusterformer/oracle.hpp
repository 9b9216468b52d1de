#pragma once

// Independent reference computations used by the test suites and the
// gradcheck command. Nothing here calls into cluster_ops: the clustering
// oracle works on plain row-major arrays with explicit loops.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "clusterformer/tensor.hpp"

namespace clusterformer {

struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}
  static DenseMatrix from(const Tensor& t);

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct OracleRcaWeights {
  DenseMatrix wq, wk, wv;  // D x D
  std::vector<double> bq, bk, bv;  // empty means no bias
  std::size_t num_heads = 1;
  double logit_scale = 1.0;
};

struct OracleRcaResult {
  DenseMatrix assignment;  // K x HW, mean over heads
  DenseMatrix centers;     // K x D
};

// One E-step and one M-step, computed naively in double precision.
OracleRcaResult oracle_rca_step(const DenseMatrix& features, const DenseMatrix& centers,
                                const OracleRcaWeights& weights);

// T E/M iterations: keys and values projected once, queries every iteration.
OracleRcaResult oracle_rca(const DenseMatrix& features, const DenseMatrix& centers,
                           const OracleRcaWeights& weights, std::size_t T);

// Central differences, one coordinate at a time.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double eps = 1e-5);

// |a - b| / max(|a|, |b|, floor)
double relative_error(double analytic, double numeric, double floor);

struct ParamGradStats {
  std::string name;
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool pass = true;
};

struct GradReport {
  std::string op;
  double tolerance = 0.0;
  std::vector<ParamGradStats> params;

  bool pass() const;
  double max_rel_error() const;
  double mean_rel_error() const;

  std::string to_text() const;
  static std::string csv_header();
  std::string to_csv_row() const;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Denominator floor of the relative error; shields near-zero gradients
  // from amplified rounding noise.
  double rel_floor = 1e-6;
  // Fraction of coordinates checked per input, at least one each.
  double fraction = 1.0;
  std::uint64_t seed = 7;
};

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Reduces op(inputs) to a scalar with a fixed random projection and compares
// backward() against central differences for every (sampled) coordinate of
// every input. Runs in double precision.
GradReport grad_check(const std::string& op_name, const TensorFn& op, std::vector<Tensor> inputs,
                      std::vector<std::string> input_names, double tolerance, const GradCheckOptions& options = {});

// Variant for an already-scalar objective over named leaves (whole models).
GradReport grad_check_scalar(const std::string& name, const std::function<Tensor()>& loss,
                             std::vector<std::pair<std::string, Tensor>> leaves, double tolerance,
                             const GradCheckOptions& options = {});

}  // namespace clusterformer
