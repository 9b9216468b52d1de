#pragma once

// Command layer behind the command-line tool. Every command takes a RunConfig,
// validates it and its inputs before writing anything, and is deterministic
// in the seed.

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "clusterformer/bench.hpp"
#include "clusterformer/config.hpp"
#include "clusterformer/dataset.hpp"
#include "clusterformer/model.hpp"
#include "clusterformer/pnm.hpp"
#include "clusterformer/tensor.hpp"
#include "clusterformer/train.hpp"

namespace clusterformer {

struct RunConfig {
  std::string command;                 // train, eval, bench, visualize, gradcheck
  std::string config_path;             // flat key=value file, may be empty
  std::string model = "tiny";          // preset under the model keys: tiny or swin_tiny
  KeyValues model_keys;                // ModelConfig keys applied over the preset
  std::string data = "synthetic";      // directory or synthetic[:...]
  std::string val_data = "auto";       // auto, none, or a source
  std::string split = "train";         // eval: train or val
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  Precision precision = Precision::kSingle;
  std::string checkpoint;
  std::string image;
  std::size_t threads = 1;
  std::string scope = "all";           // gradcheck: ops, model or all
  std::string inject_fault;            // gradcheck: op whose backward rule is negated
  std::vector<Mechanism> bench_mechanisms{Mechanism::kRca, Mechanism::kSelfAttention};
  std::vector<std::size_t> bench_HW{256, 512, 1024, 2048, 4096};
  std::vector<std::size_t> bench_K{8};
  std::vector<std::size_t> bench_D{64};
  std::vector<std::size_t> bench_T{3};
  std::size_t bench_runs = 7;
  double bench_min_run_ms = 20.0;     // each timed run repeats the call for at least this long

  // Run keys are read here; every ModelConfig key goes to model_keys. Any
  // other key is an error.
  static RunConfig from_key_values(const KeyValues& kv);
  // File keys first, then `overrides` on top.
  static RunConfig load(const std::string& path, const KeyValues& overrides);

  ModelConfig model_config() const;
  // Throws ConfigError on anything invalid, including the model config.
  void validate() const;
};

// Seeds derived from the run seed: weights and batch order use the seed
// itself, the synthetic train and held-out sets use seed + 1 and seed + 2.
std::uint64_t train_data_seed(std::uint64_t seed);
std::uint64_t val_data_seed(std::uint64_t seed);

// Held-out set for a run: `none` gives nothing, `auto` gives a synthetic set
// with half as many samples per class when the training data is synthetic.
std::optional<Dataset> load_val_dataset(const RunConfig& run);

struct TrainOutcome {
  TrainResult result;
  std::string metrics_path, best_path, final_path;
};

// Writes metrics.csv, best.ckpt and final.ckpt under out_dir.
TrainOutcome cmd_train(const RunConfig& run, std::ostream& log);

// Prints the report and appends a row to out_dir/eval.csv.
EvalResult cmd_eval(const RunConfig& run, std::ostream& log);

struct AssignmentMap {
  std::size_t rows = 0, cols = 0, K = 0;
  std::vector<std::size_t> labels;  // row-major cluster id per final-stage token
};

// Argmax over centers of the last block's assignment, ties to the lower id.
AssignmentMap assignment_map(const Model& model, const Tensor& image);
// Fixed palette, distinct for the first 256 ids.
std::array<std::uint8_t, 3> palette_color(std::size_t id);
// Nearest-neighbour upscale so each token becomes a cell_px square.
RgbImage render_assignment(const AssignmentMap& map, std::size_t cell_px);

struct VisualizeOutcome {
  AssignmentMap map;
  std::string image_path;
};

// Model from `checkpoint`, or freshly initialized from the config and seed.
// Writes out_dir/assignment.ppm.
VisualizeOutcome cmd_visualize(const RunConfig& run, std::ostream& log);

struct BenchOutcome {
  std::vector<CostSample> samples;
  std::vector<ScalingFit> fits;  // recomputed from the written CSV
  std::string csv_path;
};

std::string fit_summary(const ScalingFit& fit);

// One row per mechanism and grid point, then a fit per mechanism when exactly
// one axis varies over enough points.
BenchOutcome cmd_bench(const RunConfig& run, std::ostream& log);

// Returns true when every check passes. Writes out_dir/gradcheck.csv.
bool cmd_gradcheck(const RunConfig& run, std::ostream& log);

// Dispatches on run.command and maps failures to exit codes: 0 success,
// 1 failed check, 2 invalid configuration, 3 I/O or format error,
// 4 non-finite loss.
int run_command(const RunConfig& run, std::ostream& log, std::ostream& err);

}  // namespace clusterformer
