#include "clusterformer/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <istream>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "clusterformer/cluster_ops.hpp"
#include "clusterformer/errors.hpp"

namespace clusterformer {

namespace {

using u64 = std::uint64_t;

Tensor uniform(std::mt19937_64& rng, Shape shape, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(v));
}

LinearParams random_linear(std::mt19937_64& rng, std::size_t d) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  return {uniform(rng, {d, d}, bound), uniform(rng, {d}, bound)};
}

// Builds inputs once and returns a closure running one forward pass.
std::function<void()> make_runner(Mechanism m, std::size_t HW, std::size_t K, std::size_t D, std::size_t T,
                                  std::uint64_t seed) {
  if (HW == 0 || K == 0 || D == 0 || T == 0) throw ConfigError("bench: HW, K, D and T must be positive");
  std::mt19937_64 rng(seed);
  const Tensor x = uniform(rng, {HW, D}, 1.0);
  if (m == Mechanism::kRca) {
    RcaParams p;
    p.query = random_linear(rng, D);
    p.key = random_linear(rng, D);
    p.value = random_linear(rng, D);
    p.num_heads = 1;
    p.head_dim = D;
    const Tensor init = uniform(rng, {K, D}, 1.0);
    return [=] { recurrent_cluster(x, init, T, p); };
  }
  const LinearParams q = random_linear(rng, D), k = random_linear(rng, D), v = random_linear(rng, D);
  const double s = 1.0 / std::sqrt(static_cast<double>(D));
  return [=] {
    const Tensor logits = scale(matmul(apply(q, x), transpose(apply(k, x))), s);
    matmul(softmax_axis(logits, 1), apply(v, x));
  };
}

double quantile(std::vector<double> sorted, double q) {
  std::sort(sorted.begin(), sorted.end());
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

std::size_t axis_value(const CostSample& s, Axis a) {
  switch (a) {
    case Axis::kHW: return s.HW;
    case Axis::kK: return s.K;
    case Axis::kT: return s.T;
  }
  return 0;
}

}  // namespace

std::string mechanism_name(Mechanism m) { return m == Mechanism::kRca ? "rca" : "self_attention"; }

Mechanism parse_mechanism(const std::string& name) {
  if (name == "rca") return Mechanism::kRca;
  if (name == "self_attention") return Mechanism::kSelfAttention;
  throw ConfigError("unknown mechanism '" + name + "' (expected rca or self_attention)");
}

std::string axis_name(Axis a) {
  switch (a) {
    case Axis::kHW: return "HW";
    case Axis::kK: return "K";
    case Axis::kT: return "T";
  }
  return "?";
}

Axis parse_axis(const std::string& name) {
  if (name == "HW") return Axis::kHW;
  if (name == "K") return Axis::kK;
  if (name == "T") return Axis::kT;
  throw ConfigError("unknown axis '" + name + "' (expected HW, K or T)");
}

FlopBreakdown analytic_flops(Mechanism m, std::size_t HW_, std::size_t K_, std::size_t D_, std::size_t T_) {
  const u64 HW = HW_, K = K_, D = D_, T = T_;
  FlopBreakdown f;
  if (m == Mechanism::kRca) {
    f.kv_projection = 2 * (2 * HW * D * D + HW * D);
    f.q_projection = T * (2 * K * D * D + K * D);
    // logits, scale, softmax over K, aggregation
    f.attention = T * (2 * K * HW * D + K * HW + 8 * K * HW + 2 * K * HW * D);
  } else {
    f.kv_projection = 3 * (2 * HW * D * D + HW * D);
    f.attention = 2 * HW * HW * D + HW * HW + 8 * HW * HW + 2 * HW * HW * D;
  }
  return f;
}

std::uint64_t core_flops(Mechanism m, std::size_t HW, std::size_t K, std::size_t D, std::size_t T) {
  const FlopBreakdown f = analytic_flops(m, HW, K, D, T);
  return m == Mechanism::kRca ? f.kv_projection + f.attention : f.attention;
}

std::uint64_t instrumented_flops(Mechanism m, std::size_t HW, std::size_t K, std::size_t D, std::size_t T,
                                 std::uint64_t seed) {
  const auto run = make_runner(m, HW, K, D, T, seed);
  NoGradScope no_grad;
  FlopScope scope;
  run();
  return scope.flops();
}

CostSample measure_cost(Mechanism m, std::size_t HW, std::size_t K, std::size_t D, std::size_t T,
                        const BenchOptions& options) {
  if (options.runs < 5) throw ConfigError("measure_cost: at least 5 timed runs required");
  const auto run = make_runner(m, HW, K, D, T, options.seed);
  NoGradScope no_grad;
  using clock = std::chrono::steady_clock;
  auto time_reps = [&](std::size_t reps) {
    const auto t0 = clock::now();
    for (std::size_t r = 0; r < reps; ++r) run();
    return std::chrono::duration<double, std::nano>(clock::now() - t0).count();
  };
  for (std::size_t w = 0; w < options.warmup; ++w) run();
  const double single = std::max(1.0, time_reps(1));
  const auto reps = static_cast<std::size_t>(std::max(1.0, std::ceil(options.min_run_ns / single)));
  std::vector<double> per_call;
  for (std::size_t r = 0; r < options.runs; ++r) per_call.push_back(time_reps(reps) / static_cast<double>(reps));

  CostSample s{m, HW, K, D, T, analytic_flops(m, HW, K, D, T).total(), 0.0, 0.0, false};
  s.time_ns_median = quantile(per_call, 0.5);
  s.time_ns_iqr = quantile(per_call, 0.75) - quantile(per_call, 0.25);
  s.unstable = s.time_ns_iqr > 0.2 * s.time_ns_median;
  return s;
}

ScalingFit fit_scaling(const std::vector<CostSample>& samples, Axis axis) {
  if (samples.empty()) throw ConfigError("fit_scaling: no samples");
  const CostSample& ref = samples.front();
  std::set<std::size_t> distinct;
  for (const auto& s : samples) {
    if (s.mechanism != ref.mechanism) throw ConfigError("fit_scaling: samples mix mechanisms");
    const bool same_rest = (axis == Axis::kHW || s.HW == ref.HW) && (axis == Axis::kK || s.K == ref.K) &&
                           (axis == Axis::kT || s.T == ref.T) && s.D == ref.D;
    if (!same_rest) throw ConfigError("fit_scaling: samples vary along more than the " + axis_name(axis) + " axis");
    distinct.insert(axis_value(s, axis));
  }
  if (distinct.size() < 4 || *distinct.rbegin() < 8 * *distinct.begin()) {
    throw ConfigError("fit_scaling: need at least 4 distinct " + axis_name(axis) +
                      " values spanning 8x, got " + std::to_string(distinct.size()));
  }
  ScalingFit fit;
  fit.mechanism = ref.mechanism;
  fit.axis = axis;
  fit.points = samples.size();
  std::vector<double> lx, lt, lf, lc;
  std::vector<std::pair<u64, u64>> core;
  for (const auto& s : samples) {
    const u64 c = core_flops(s.mechanism, s.HW, s.K, s.D, s.T);
    lx.push_back(std::log(static_cast<double>(axis_value(s, axis))));
    lt.push_back(std::log(s.time_ns_median));
    lf.push_back(std::log(static_cast<double>(s.flops)));
    lc.push_back(std::log(static_cast<double>(c)));
    core.emplace_back(axis_value(s, axis), c);
  }
  fit.time_slope = ls_slope(lx, lt);
  fit.flop_slope = ls_slope(lx, lf);
  fit.core_slope = ls_slope(lx, lc);
  // core_i * x_0^p == core_0 * x_i^p for every sample, in exact integer arithmetic
  for (int p = 0; p <= 3 && !fit.exact_core_exponent; ++p) {
    bool ok = true;
    for (const auto& [x, c] : core) {
      unsigned __int128 lhs = c, rhs = core.front().second;
      for (int e = 0; e < p; ++e) {
        lhs *= core.front().first;
        rhs *= x;
      }
      ok = ok && lhs == rhs;
    }
    if (ok) fit.exact_core_exponent = p;
  }
  return fit;
}

std::string bench_csv_header() { return "mechanism,HW,K,D,T,flops,time_ns_median,time_ns_iqr"; }

void write_bench_csv(std::ostream& out, const std::vector<CostSample>& samples) {
  out << bench_csv_header() << '\n';
  for (const auto& s : samples) {
    out << mechanism_name(s.mechanism) << ',' << s.HW << ',' << s.K << ',' << s.D << ',' << s.T << ',' << s.flops << ','
        << std::fixed << std::setprecision(1) << s.time_ns_median << ',' << s.time_ns_iqr << std::defaultfloat << '\n';
  }
}

std::vector<CostSample> read_bench_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != bench_csv_header()) {
    throw FormatError("bench CSV: expected header '" + bench_csv_header() + "'");
  }
  std::vector<CostSample> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw FormatError("bench CSV line " + std::to_string(lineno) + ": expected 8 fields");
    try {
      CostSample s;
      s.mechanism = parse_mechanism(f[0]);
      s.HW = std::stoull(f[1]);
      s.K = std::stoull(f[2]);
      s.D = std::stoull(f[3]);
      s.T = std::stoull(f[4]);
      s.flops = std::stoull(f[5]);
      s.time_ns_median = std::stod(f[6]);
      s.time_ns_iqr = std::stod(f[7]);
      s.unstable = s.time_ns_iqr > 0.2 * s.time_ns_median;
      out.push_back(s);
    } catch (const std::exception& e) {
      throw FormatError("bench CSV line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace clusterformer
