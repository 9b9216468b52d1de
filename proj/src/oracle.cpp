#include "clusterformer/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "clusterformer/ops.hpp"

namespace clusterformer {

namespace {

DenseMatrix project(const DenseMatrix& x, const DenseMatrix& w, const std::vector<double>& b) {
  DenseMatrix out(x.rows, w.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < w.cols; ++j) {
      double acc = b.empty() ? 0.0 : b[j];
      for (std::size_t p = 0; p < x.cols; ++p) acc += x(i, p) * w(p, j);
      out(i, j) = acc;
    }
  }
  return out;
}

// E/M step given already-projected keys and values.
OracleRcaResult em_step(const DenseMatrix& queries, const DenseMatrix& keys, const DenseMatrix& values,
                        std::size_t num_heads, double logit_scale) {
  const std::size_t K = queries.rows, HW = keys.rows, D = queries.cols;
  const std::size_t width = D / num_heads;
  OracleRcaResult result{DenseMatrix(K, HW), DenseMatrix(K, D)};
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t c0 = h * width;
    DenseMatrix probs(K, HW);
    for (std::size_t n = 0; n < HW; ++n) {
      std::vector<double> logits(K);
      for (std::size_t k = 0; k < K; ++k) {
        double dot = 0.0;
        for (std::size_t c = 0; c < width; ++c) dot += queries(k, c0 + c) * keys(n, c0 + c);
        logits[k] = dot * logit_scale;
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (std::size_t k = 0; k < K; ++k) z += std::exp(logits[k] - mx);
      for (std::size_t k = 0; k < K; ++k) probs(k, n) = std::exp(logits[k] - mx) / z;
    }
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t n = 0; n < HW; ++n) result.assignment(k, n) += probs(k, n) / static_cast<double>(num_heads);
      for (std::size_t c = 0; c < width; ++c) {
        double acc = 0.0;
        for (std::size_t n = 0; n < HW; ++n) acc += probs(k, n) * values(n, c0 + c);
        result.centers(k, c0 + c) = acc;
      }
    }
  }
  return result;
}

}  // namespace

DenseMatrix DenseMatrix::from(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("DenseMatrix::from: expected rank 2, got " + shape_to_string(t.shape()));
  DenseMatrix m(t.dim(0), t.dim(1));
  std::copy(t.data().begin(), t.data().end(), m.values.begin());
  return m;
}

OracleRcaResult oracle_rca_step(const DenseMatrix& features, const DenseMatrix& centers,
                                const OracleRcaWeights& weights) {
  return oracle_rca(features, centers, weights, 1);
}

OracleRcaResult oracle_rca(const DenseMatrix& features, const DenseMatrix& centers, const OracleRcaWeights& weights,
                           std::size_t T) {
  if (features.cols != centers.cols || features.cols % weights.num_heads != 0) {
    throw ShapeError("oracle_rca: incompatible feature/center widths");
  }
  const DenseMatrix keys = project(features, weights.wk, weights.bk);
  const DenseMatrix values = project(features, weights.wv, weights.bv);
  OracleRcaResult state{DenseMatrix(centers.rows, features.rows), centers};
  for (std::size_t t = 0; t < T; ++t) {
    const DenseMatrix queries = project(state.centers, weights.wq, weights.bq);
    state = em_step(queries, keys, values, weights.num_heads, weights.logit_scale);
  }
  return state;
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff_grad: eps must be positive");
  std::vector<double> point(x.begin(), x.end());
  std::vector<double> grad(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + eps;
    const double up = f(point);
    point[i] = saved - eps;
    const double down = f(point);
    point[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::domain_error("finite_diff_grad: objective not finite at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

bool GradReport::pass() const { return max_rel_error() <= tolerance; }

double GradReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& p : params) worst = std::max(worst, p.max_rel_error);
  return worst;
}

double GradReport::mean_rel_error() const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& p : params) {
    total += p.mean_rel_error * static_cast<double>(p.checked);
    n += p.checked;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

std::string GradReport::to_text() const {
  std::ostringstream os;
  os << std::scientific << std::setprecision(3);
  os << (pass() ? "PASS " : "FAIL ") << op << "  max_rel=" << max_rel_error() << "  tol=" << tolerance << '\n';
  for (const auto& p : params) {
    os << "    " << p.name << ": max_rel=" << p.max_rel_error << " mean_rel=" << p.mean_rel_error
       << " worst_index=" << p.worst_index << " checked=" << p.checked << (p.pass ? "" : "  <-- FAIL") << '\n';
  }
  return os.str();
}

std::string GradReport::csv_header() { return "op,max_rel_error,mean_rel_error,worst_param,worst_index,tolerance,pass"; }

std::string GradReport::to_csv_row() const {
  const ParamGradStats* worst = nullptr;
  for (const auto& p : params) {
    if (!worst || p.max_rel_error > worst->max_rel_error) worst = &p;
  }
  std::ostringstream os;
  os << std::scientific << std::setprecision(6);
  os << op << ',' << max_rel_error() << ',' << mean_rel_error() << ',' << (worst ? worst->name : "") << ','
     << (worst ? worst->worst_index : 0) << ',' << tolerance << ',' << (pass() ? 1 : 0);
  return os.str();
}

GradReport grad_check_scalar(const std::string& name, const std::function<Tensor()>& loss,
                             std::vector<std::pair<std::string, Tensor>> leaves, double tolerance,
                             const GradCheckOptions& options) {
  PrecisionScope precision(Precision::kDouble);
  for (auto& [leaf_name, t] : leaves) {
    if (!t.requires_grad()) throw ConfigError("grad_check: input '" + leaf_name + "' does not require grad");
    t.zero_grad();
  }
  loss().backward();

  GradReport report;
  report.op = name;
  report.tolerance = tolerance;
  std::mt19937_64 rng(options.seed);
  auto objective = [&] {
    NoGradScope no_grad;
    return loss().item();
  };
  for (auto& [leaf_name, t] : leaves) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.fraction < 1.0) {
      std::shuffle(coords.begin(), coords.end(), rng);
      const auto keep = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::ceil(options.fraction * static_cast<double>(coords.size()))));
      coords.resize(std::min(keep, coords.size()));
      std::sort(coords.begin(), coords.end());
    }
    ParamGradStats stats;
    stats.name = leaf_name;
    double total = 0.0;
    auto values = t.mutable_data();
    for (std::size_t idx : coords) {
      const double saved = values[idx];
      values[idx] = saved + options.eps;
      const double up = objective();
      values[idx] = saved - options.eps;
      const double down = objective();
      values[idx] = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double err = relative_error(analytic[idx], numeric, options.rel_floor);
      total += err;
      if (stats.checked == 0 || err > stats.max_rel_error) {
        stats.max_rel_error = err;
        stats.worst_index = idx;
      }
      ++stats.checked;
    }
    stats.mean_rel_error = stats.checked ? total / static_cast<double>(stats.checked) : 0.0;
    stats.pass = stats.max_rel_error <= tolerance;
    report.params.push_back(stats);
  }
  return report;
}

GradReport grad_check(const std::string& op_name, const TensorFn& op, std::vector<Tensor> inputs,
                      std::vector<std::string> input_names, double tolerance, const GradCheckOptions& options) {
  PrecisionScope precision(Precision::kDouble);
  if (input_names.size() != inputs.size()) {
    input_names.clear();
    for (std::size_t i = 0; i < inputs.size(); ++i) input_names.push_back("input" + std::to_string(i));
  }
  Tensor probe;
  {
    NoGradScope no_grad;
    probe = op(inputs);
  }
  std::mt19937_64 rng(options.seed ^ 0x9e3779b97f4a7c15ull);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::vector<double> weights(probe.numel());
  for (auto& w : weights) w = uni(rng);
  const Tensor projection = Tensor::from_data(probe.shape(), std::move(weights));

  std::vector<std::pair<std::string, Tensor>> leaves;
  for (std::size_t i = 0; i < inputs.size(); ++i) leaves.emplace_back(input_names[i], inputs[i]);
  auto loss = [&] { return sum(mul(op(inputs), projection)); };
  return grad_check_scalar(op_name, loss, std::move(leaves), tolerance, options);
}

}  // namespace clusterformer
