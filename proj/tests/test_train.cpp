#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "clusterformer/errors.hpp"
#include "clusterformer/ops.hpp"
#include "clusterformer/train.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace clusterformer;
using cftest::random_tensor;
using cftest::to_vec;

namespace {

Dataset random_dataset(std::mt19937_64& rng, const ModelConfig& c, std::size_t n, std::size_t classes) {
  Dataset d;
  for (std::size_t k = 0; k < classes; ++k) d.class_names.push_back("c" + std::to_string(k));
  for (std::size_t i = 0; i < n; ++i) {
    d.images.push_back(random_tensor(rng, {c.image_size, c.image_size, c.in_channels}, 0, 1));
    d.labels.push_back(i % classes);
  }
  return d;
}

bool float_exact(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](double v) { return static_cast<double>(static_cast<float>(v)) == v; });
}

}  // namespace

TEST_CASE("adam: first step moves each coordinate by lr against the gradient sign") {
  std::mt19937_64 rng(1);
  Tensor w = Tensor::parameter({2, 3}, {0.5, -0.25, 1.0, 2.0, -1.5, 0.125});
  const Tensor target = random_tensor(rng, {2, 3});
  const auto before = to_vec(w);
  Adam adam({w}, AdamOptions{.lr = 1e-2});
  sum(mul(sub(w, target), sub(w, target))).backward();
  const auto g = cftest::grad_or_zero(w);
  adam.step();
  CHECK(adam.steps() == 1);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const double expected = before[i] - 1e-2 * (g[i] > 0 ? 1.0 : -1.0);
    CHECK(w.data()[i] == doctest::Approx(expected).epsilon(1e-5));
  }
  CHECK(float_exact(w));
}

TEST_CASE("adam: converges on a quadratic and skips parameters without gradients") {
  std::mt19937_64 rng(2);
  Tensor w = Tensor::parameter({4}, {0, 0, 0, 0});
  Tensor idle = Tensor::parameter({2}, {0.75, -0.5});
  const Tensor target = random_tensor(rng, {4});
  Adam adam({w, idle}, AdamOptions{.lr = 0.05});
  for (int i = 0; i < 500; ++i) {
    adam.zero_grad();
    sum(mul(sub(w, target), sub(w, target))).backward();
    adam.step();
  }
  CHECK(cftest::max_abs_diff(w.data(), target.data()) < 1e-3);
  CHECK(to_vec(idle) == std::vector<double>{0.75, -0.5});
}

TEST_CASE("metrics csv: fixed header and six-decimal rows") {
  CHECK(metrics_csv_header() == "epoch,split,loss,top1,top5");
  EpochMetrics m{3, "val", EvalResult{1.0 / 3.0, 0.5, std::nullopt, 10}};
  CHECK(metrics_csv_row(m) == "3,val,0.333333,0.500000,");
  m.result.top5 = 0.9;
  CHECK(metrics_csv_row(m) == "3,val,0.333333,0.500000,0.900000");
}

TEST_CASE("evaluate: matches a sort-based top-k oracle, top-5 contains top-1") {
  std::mt19937_64 rng(3);
  auto c = ModelConfig::tiny();
  c.num_classes = 7;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Model m = init_params(c, seed);
    const Dataset d = random_dataset(rng, c, 21, 7);
    const EvalResult r = evaluate(m, d, 2);
    REQUIRE(r.top5.has_value());
    CHECK(*r.top5 >= r.top1);
    const auto logits = predict_logits(m, d.images);
    double hit1 = 0, hit5 = 0, loss = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      std::vector<std::size_t> order(7);
      std::iota(order.begin(), order.end(), std::size_t{0});
      const auto z = logits[i].data();
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
      const auto pos = std::find(order.begin(), order.end(), d.labels[i]) - order.begin();
      hit1 += pos == 0;
      hit5 += pos < 5;
      double lse = 0;
      for (double v : z) lse += std::exp(v);
      loss += std::log(lse) - z[d.labels[i]];
    }
    CHECK(r.top1 == doctest::Approx(hit1 / 21.0));
    CHECK(*r.top5 == doctest::Approx(hit5 / 21.0));
    CHECK(r.loss == doctest::Approx(loss / 21.0).epsilon(1e-9));
  }
  const Model small = init_params(ModelConfig::tiny(), 0);
  CHECK_FALSE(evaluate(small, random_dataset(rng, ModelConfig::tiny(), 6, 3)).top5.has_value());
}

TEST_CASE("evaluate: random weights on balanced data score within 3 sigma of chance") {
  const Dataset d = make_synthetic(SyntheticSpec{}, 9);
  const double p = 1.0 / 3.0, n = static_cast<double>(d.size());
  const double sigma = std::sqrt(p * (1 - p) / n);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const EvalResult r = evaluate(init_params(ModelConfig::tiny(), seed), d);
    CHECK(std::abs(r.top1 - p) <= 3 * sigma);
  }
}

TEST_CASE("evaluate: labels outside the model are rejected") {
  std::mt19937_64 rng(4);
  const Model m = init_params(ModelConfig::tiny(), 0);
  CHECK_THROWS_AS(evaluate(m, random_dataset(rng, ModelConfig::tiny(), 4, 4)), ConfigError);
  CHECK_THROWS_AS(evaluate(m, Dataset{}), ConfigError);
}

TEST_CASE("train_model: zero epochs return the initialization untouched") {
  const Model init = init_params(ModelConfig::tiny(), 1);
  const Dataset d = make_synthetic(SyntheticSpec{.per_class = 2}, 1);
  TrainOptions o;
  o.epochs = 0;
  const TrainResult r = train_model(init, d, nullptr, o);
  CHECK(r.metrics.empty());
  for (std::size_t i = 0; i < init.named.size(); ++i) {
    CHECK(to_vec(r.final_model.named[i].second) == to_vec(init.named[i].second));
    CHECK(to_vec(r.best_model.named[i].second) == to_vec(init.named[i].second));
  }
}

TEST_CASE("train_model: deterministic, float-exact, best epoch is the earliest maximum") {
  const Model init = init_params(ModelConfig::tiny(), 2);
  const Dataset train = make_synthetic(SyntheticSpec{.per_class = 6}, 1);
  const Dataset val = make_synthetic(SyntheticSpec{.per_class = 3}, 2);
  TrainOptions o;
  o.epochs = 3;
  o.batch_size = 4;
  const TrainResult a = train_model(init, train, &val, o);
  const TrainResult b = train_model(init, train, &val, o);
  REQUIRE(a.metrics.size() == 6);
  for (std::size_t i = 0; i < a.metrics.size(); ++i) CHECK(metrics_csv_row(a.metrics[i]) == metrics_csv_row(b.metrics[i]));
  for (std::size_t i = 0; i < init.named.size(); ++i) {
    CHECK(to_vec(a.final_model.named[i].second) == to_vec(b.final_model.named[i].second));
    CHECK(float_exact(a.final_model.named[i].second));
  }
  CHECK(a.metrics[0].split == "train");
  CHECK(a.metrics[1].split == "val");
  std::size_t best = 0;
  double top = -1;
  for (const auto& m : a.metrics) {
    if (m.split == "val" && m.result.top1 > top) {
      top = m.result.top1;
      best = m.epoch;
    }
  }
  CHECK(a.best_epoch == best);
  // the trained final model differs from the initialization
  CHECK(to_vec(a.final_model.named[0].second) != to_vec(init.named[0].second));
}

TEST_CASE("train_model: non-finite loss aborts with a diagnostic") {
  Model init = init_params(ModelConfig::tiny(), 3);
  init.head.bias.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  const Dataset d = make_synthetic(SyntheticSpec{.per_class = 2}, 1);
  TrainOptions o;
  o.epochs = 1;
  CHECK_THROWS_WITH_AS(train_model(init, d, nullptr, o), doctest::Contains("epoch 1"), NonFiniteLoss);
  o.batch_size = 0;
  CHECK_THROWS_AS(train_model(init, d, nullptr, o), ConfigError);
}
