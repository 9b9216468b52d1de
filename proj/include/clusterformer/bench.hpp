#pragma once

// Cost measurement for recurrent clustering attention versus global
// self-attention over HW tokens of width D (single head).
//
// Flop convention: a multiply-add is 2 flops, softmax costs 8 per element,
// elementwise add/scale/bias cost 1 per element.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace clusterformer {

enum class Mechanism { kRca, kSelfAttention };

std::string mechanism_name(Mechanism m);
Mechanism parse_mechanism(const std::string& name);

struct FlopBreakdown {
  std::uint64_t kv_projection = 0;  // rca: keys + values; self-attention: queries + keys + values
  std::uint64_t q_projection = 0;   // rca only, once per iteration
  std::uint64_t attention = 0;      // logits, scaling, softmax, aggregation, head fusion

  std::uint64_t total() const { return kv_projection + q_projection + attention; }
};

FlopBreakdown analytic_flops(Mechanism m, std::size_t HW, std::size_t K, std::size_t D, std::size_t T);
// Terms that grow with HW: everything but the query projection for rca, the
// attention matrix terms for self-attention.
std::uint64_t core_flops(Mechanism m, std::size_t HW, std::size_t K, std::size_t D, std::size_t T);

// Runs the mechanism once on seeded random inputs and returns the flops the
// ops actually recorded.
std::uint64_t instrumented_flops(Mechanism m, std::size_t HW, std::size_t K, std::size_t D, std::size_t T,
                                 std::uint64_t seed = 42);

struct CostSample {
  Mechanism mechanism = Mechanism::kRca;
  std::size_t HW = 0, K = 0, D = 0, T = 0;
  std::uint64_t flops = 0;
  double time_ns_median = 0.0;  // per call
  double time_ns_iqr = 0.0;
  bool unstable = false;        // IQR above 20% of the median
};

struct BenchOptions {
  std::size_t runs = 7;           // timed runs; median and IQR taken over these
  std::size_t warmup = 2;
  double min_run_ns = 20e6;       // inner repetitions calibrated so one run lasts at least this long
  std::uint64_t seed = 42;
};

CostSample measure_cost(Mechanism m, std::size_t HW, std::size_t K, std::size_t D, std::size_t T,
                        const BenchOptions& options = {});

enum class Axis { kHW, kK, kT };

std::string axis_name(Axis a);
Axis parse_axis(const std::string& name);

struct ScalingFit {
  Mechanism mechanism = Mechanism::kRca;
  Axis axis = Axis::kHW;
  std::size_t points = 0;
  double time_slope = 0.0;   // least squares on log-log wall time
  double flop_slope = 0.0;   // least squares on log-log total flops
  double core_slope = 0.0;   // least squares on log-log core flops
  // Integer p with core proportional to axis^p exactly across all samples.
  std::optional<int> exact_core_exponent;
};

// Samples must share a mechanism and every parameter except the axis. Needs
// at least 4 distinct axis values spanning a factor of 8 or more.
ScalingFit fit_scaling(const std::vector<CostSample>& samples, Axis axis);

std::string bench_csv_header();
void write_bench_csv(std::ostream& out, const std::vector<CostSample>& samples);
std::vector<CostSample> read_bench_csv(std::istream& in);

}  // namespace clusterformer
