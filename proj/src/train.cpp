#include "clusterformer/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "clusterformer/errors.hpp"
#include "clusterformer/ops.hpp"

namespace clusterformer {

Adam::Adam(std::vector<Tensor> params, AdamOptions options) : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const auto g = params_[i].grad();
    auto w = params_[i].mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g[j];
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g[j] * g[j];
      const double update = options_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + options_.eps);
      w[j] = static_cast<float>(w[j] - update);
    }
  }
}

EvalResult evaluate(const Model& model, const Dataset& data, std::size_t threads) {
  if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
  const std::size_t C = model.config.num_classes;
  for (std::size_t label : data.labels) {
    if (label >= C) {
      throw ConfigError("evaluate: label " + std::to_string(label) + " outside the model's " + std::to_string(C) +
                        " classes");
    }
  }
  const auto logits = predict_logits(model, data.images, threads);
  EvalResult r;
  r.count = data.size();
  std::size_t hit1 = 0, hit5 = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto z = logits[i].data();
    const std::size_t y = data.labels[i];
    const double mx = *std::max_element(z.begin(), z.end());
    double lse = 0.0;
    for (double v : z) lse += std::exp(v - mx);
    loss += mx + std::log(lse) - z[y];
    // rank of the true class: classes scoring higher, ties broken by index
    std::size_t rank = 0;
    for (std::size_t c = 0; c < C; ++c) rank += (z[c] > z[y] || (z[c] == z[y] && c < y)) ? 1 : 0;
    hit1 += rank == 0;
    hit5 += rank < 5;
  }
  const double n = static_cast<double>(r.count);
  r.loss = loss / n;
  r.top1 = static_cast<double>(hit1) / n;
  if (C >= 5) r.top5 = static_cast<double>(hit5) / n;
  return r;
}

std::string metrics_csv_header() { return "epoch,split,loss,top1,top5"; }

std::string metrics_csv_row(const EpochMetrics& m) {
  std::ostringstream os;
  os << m.epoch << ',' << m.split << ',' << std::fixed << std::setprecision(6) << m.result.loss << ','
     << m.result.top1 << ',';
  if (m.result.top5) os << *m.result.top5;
  return os.str();
}

TrainResult train_model(const Model& init, const Dataset& train, const Dataset* val, const TrainOptions& options,
                        const std::function<void(const EpochMetrics&)>& on_epoch) {
  if (train.size() == 0) throw ConfigError("train: empty training set");
  if (options.batch_size == 0) throw ConfigError("train: batch_size must be positive");
  const std::size_t C = init.config.num_classes;
  TrainResult result;
  result.final_model = clone_model(init);
  result.best_model = clone_model(init);
  Model& model = result.final_model;
  Adam adam(model.parameters(), options.adam);
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double best_top1 = -1.0;

  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0, batch = 0; start < order.size(); start += options.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      adam.zero_grad();
      Tensor total;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        const std::vector<std::size_t> label{train.labels[i]};
        Tensor ce = cross_entropy(reshape(model_forward(train.images[i], model).logits, {1, C}), label);
        total = total.defined() ? add(total, ce) : ce;
      }
      Tensor loss = scale(total, 1.0 / static_cast<double>(end - start));
      if (!std::isfinite(loss.item())) {
        throw NonFiniteLoss("non-finite training loss " + std::to_string(loss.item()) + " at epoch " +
                            std::to_string(epoch) + ", batch " + std::to_string(batch));
      }
      loss.backward();
      adam.step();
    }
    EpochMetrics tm{epoch, "train", evaluate(model, train, options.eval_threads)};
    result.metrics.push_back(tm);
    if (on_epoch) on_epoch(tm);
    double score = tm.result.top1;
    if (val) {
      EpochMetrics vm{epoch, "val", evaluate(model, *val, options.eval_threads)};
      result.metrics.push_back(vm);
      if (on_epoch) on_epoch(vm);
      score = vm.result.top1;
    }
    if (score > best_top1) {
      best_top1 = score;
      result.best_epoch = epoch;
      result.best_model = clone_model(model);
    }
  }
  return result;
}

}  // namespace clusterformer
