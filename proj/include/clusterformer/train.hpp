#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "clusterformer/dataset.hpp"
#include "clusterformer/model.hpp"

namespace clusterformer {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam. Updated values are rounded to float so parameters
// always survive a checkpoint roundtrip unchanged.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options = {});
  void step();
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct EvalResult {
  double loss = 0.0;
  double top1 = 0.0;
  std::optional<double> top5;  // only with at least 5 classes
  std::size_t count = 0;
};

EvalResult evaluate(const Model& model, const Dataset& data, std::size_t threads = 1);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;  // "train" or "val"
  EvalResult result;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

struct TrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  AdamOptions adam;
  std::uint64_t seed = 0;  // batch order
  std::size_t eval_threads = 1;
};

struct TrainResult {
  Model final_model;
  Model best_model;  // highest val top-1 (train top-1 without val); earliest epoch wins ties
  std::size_t best_epoch = 0;
  std::vector<EpochMetrics> metrics;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mean cross-entropy per batch, one Adam step per batch, then a full
// evaluation of each split after every epoch.
TrainResult train_model(const Model& init, const Dataset& train, const Dataset* val, const TrainOptions& options,
                        const std::function<void(const EpochMetrics&)>& on_epoch = {});

}  // namespace clusterformer
