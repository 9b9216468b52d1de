#include <cmath>
#include <numbers>
#include <random>

#include "clusterformer/ops.hpp"
#include "clusterformer/oracle.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace clusterformer;
using cftest::param;
using cftest::random_tensor;
using cftest::to_vec;

namespace {

// Naive triple loop, independent of the blocked kernels in ops.cpp.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                 std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

Tensor eye(std::size_t n) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return Tensor::from_data({n, n}, d);
}

}  // namespace

TEST_SUITE("matmul") {
  TEST_CASE("identity and zero cases") {
    std::mt19937_64 rng(1);
    Tensor a = random_tensor(rng, {3, 4});
    CHECK(to_vec(matmul(a, eye(4))) == to_vec(a));
    Tensor z = matmul(Tensor::zeros({2, 3}), random_tensor(rng, {3, 4}));
    CHECK(z.shape() == Shape{2, 4});
    for (double v : z.data()) CHECK(v == 0.0);
  }

  TEST_CASE("small product matches naive loop") {
    const std::vector<double> a{1, 2, 3, 4}, b{5, 6};
    const auto expected = naive_matmul(a, b, 2, 2, 1);
    REQUIRE(expected == std::vector<double>{17, 39});
    CHECK(to_vec(matmul(Tensor::from_data({2, 2}, a), Tensor::from_data({2, 1}, b))) == expected);

    std::mt19937_64 rng(2);
    Tensor x = random_tensor(rng, {5, 7}), y = random_tensor(rng, {7, 3});
    auto ref = naive_matmul(to_vec(x), to_vec(y), 5, 7, 3);
    CHECK(cftest::max_abs_diff(matmul(x, y).data(), ref) < 1e-14);
  }

  TEST_CASE("shape mismatch names both shapes") {
    try {
      (void)matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
      CHECK(msg.find("[4x5]") != std::string::npos);
    }
  }
}

TEST_SUITE("softmax_axis") {
  TEST_CASE("closed forms") {
    auto s = softmax_axis(Tensor::from_data({2}, {0.0, 0.0}), 0);
    CHECK(s.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.data()[1] == doctest::Approx(0.5).epsilon(1e-15));
    // exp(ln 3) / (1 + 3) = 0.75
    auto t = softmax_axis(Tensor::from_data({2}, {0.0, std::log(3.0)}), 0);
    CHECK(std::abs(t.data()[0] - 0.25) < 1e-12);
    CHECK(std::abs(t.data()[1] - 0.75) < 1e-12);
  }

  TEST_CASE("shift by 1000 leaves output unchanged") {
    std::mt19937_64 rng(3);
    Tensor x = random_tensor(rng, {4, 6}, -5, 5);
    std::vector<double> shifted = to_vec(x);
    for (auto& v : shifted) v += 1000.0;
    auto a = softmax_axis(x, 1), b = softmax_axis(Tensor::from_data({4, 6}, shifted), 1);
    CHECK(cftest::max_abs_diff(a.data(), b.data()) < 1e-12);
  }

  TEST_CASE("property: slices sum to one for inputs in [-50, 50]") {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::size_t> ext(1, 9);
    for (int trial = 0; trial < 1000; ++trial) {
      Shape shape{ext(rng), ext(rng), ext(rng)};
      const std::size_t axis = trial % 3;
      auto y = softmax_axis(random_tensor(rng, shape, -50, 50), axis);
      std::size_t outer = 1, inner = 1;
      for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
      for (std::size_t i = axis + 1; i < 3; ++i) inner *= shape[i];
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t q = 0; q < inner; ++q) {
          double total = 0.0;
          for (std::size_t l = 0; l < shape[axis]; ++l) {
            const double v = y.data()[(o * shape[axis] + l) * inner + q];
            REQUIRE(v > 0.0);
            REQUIRE(v <= 1.0);
            total += v;
          }
          REQUIRE(std::abs(total - 1.0) < 1e-6);
        }
      }
    }
  }

  TEST_CASE("property: exact constant shifts give bitwise-equal output") {
    // Inputs on a 1/256 lattice keep x + c exactly representable, so the
    // max-subtracted logits are identical bit for bit.
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> lattice(-50 * 256, 50 * 256);
    std::uniform_int_distribution<int> shift(-10000, 10000);
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<double> x(8), y(8);
      const double c = shift(rng);
      for (std::size_t i = 0; i < 8; ++i) {
        x[i] = lattice(rng) / 256.0;
        y[i] = x[i] + c;
      }
      auto a = softmax_axis(Tensor::from_data({2, 4}, x), 1);
      auto b = softmax_axis(Tensor::from_data({2, 4}, y), 1);
      REQUIRE(to_vec(a) == to_vec(b));
    }
  }

  TEST_CASE("axis out of range") { CHECK_THROWS_AS(softmax_axis(Tensor::zeros({2, 2}), 2), ShapeError); }
}

TEST_SUITE("linear") {
  TEST_CASE("identity weight and zero input") {
    std::mt19937_64 rng(6);
    Tensor x = random_tensor(rng, {3, 2});
    CHECK(to_vec(linear(x, eye(2), Tensor::zeros({2}))) == to_vec(x));
    Tensor b = Tensor::from_data({2}, {0.5, -1.5});
    auto y = linear(Tensor::zeros({3, 2}), random_tensor(rng, {2, 2}), b);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(y.at(i, 0) == 0.5);
      CHECK(y.at(i, 1) == -1.5);
    }
  }

  TEST_CASE("hand-evaluated case") {
    // [1,2] * [[1,0],[0,2]] + [1,1] = [1 + 1, 4 + 1]
    auto y = linear(Tensor::from_data({1, 2}, {1, 2}), Tensor::from_data({2, 2}, {1, 0, 0, 2}),
                    Tensor::from_data({2}, {1, 1}));
    CHECK(to_vec(y) == std::vector<double>{2, 5});
  }

  TEST_CASE("bias width mismatch") {
    CHECK_THROWS_AS(linear(Tensor::zeros({1, 2}), Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  }
}

TEST_SUITE("gelu") {
  TEST_CASE("anchors") {
    CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
    CHECK(std::abs(gelu(Tensor::scalar(10.0)).item() - 10.0) < 1e-4);
    const double c = std::sqrt(2.0 / std::numbers::pi);
    const double expected = 0.5 * (1.0 + std::tanh(c * (1.0 + 0.044715)));
    CHECK(std::abs(gelu(Tensor::scalar(1.0)).item() - expected) < 1e-15);
    // the tanh form tracks the exact erf GELU closely
    const double exact = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
    CHECK(std::abs(expected - exact) < 1e-3);
  }
}

TEST_SUITE("layer_norm") {
  TEST_CASE("constant row normalises to zero") {
    auto y = layer_norm(Tensor::full({2, 4}, 3.0), Tensor::full({4}, 1.0), Tensor::zeros({4}), 1e-5);
    for (double v : y.data()) CHECK(v == 0.0);
  }

  TEST_CASE("zero gain gives beta") {
    std::mt19937_64 rng(7);
    auto y = layer_norm(random_tensor(rng, {3, 5}), Tensor::zeros({5}), Tensor::full({5}, 0.25), 1e-5);
    for (double v : y.data()) CHECK(v == 0.25);
  }

  TEST_CASE("row [1, 3] with vanishing eps") {
    // mean 2, population variance 1
    auto y = layer_norm(Tensor::from_data({1, 2}, {1, 3}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-12);
    CHECK(std::abs(y.data()[0] + 1.0) < 1e-9);
    CHECK(std::abs(y.data()[1] - 1.0) < 1e-9);
  }

  TEST_CASE("non-positive eps rejected") {
    CHECK_THROWS_AS(layer_norm(Tensor::zeros({1, 2}), Tensor::zeros({2}), Tensor::zeros({2}), 0.0), ConfigError);
  }
}

TEST_SUITE("adaptive_avg_pool") {
  TEST_CASE("identity and global mean") {
    std::mt19937_64 rng(8);
    Tensor g = random_tensor(rng, {3, 5, 2});
    CHECK(to_vec(adaptive_avg_pool(g, 3, 5)) == to_vec(g));
    auto m = adaptive_avg_pool(g, 1, 1);
    for (std::size_t c = 0; c < 2; ++c) {
      double total = 0.0;
      for (std::size_t i = 0; i < 15; ++i) total += g.data()[i * 2 + c];
      CHECK(std::abs(m.data()[c] - total / 15.0) < 1e-15);
    }
  }

  TEST_CASE("2x2 grid to 1x2 gives column means") {
    auto p = adaptive_avg_pool(Tensor::from_data({2, 2, 1}, {1, 2, 3, 4}), 1, 2);
    CHECK(to_vec(p) == std::vector<double>{2.0, 3.0});
  }

  TEST_CASE("overlapping windows match explicit window means") {
    std::mt19937_64 rng(9);
    Tensor g = random_tensor(rng, {5, 7, 3});
    auto p = adaptive_avg_pool(g, 3, 4);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto r0 = static_cast<std::size_t>(std::floor(i * 5.0 / 3.0));
      const auto r1 = static_cast<std::size_t>(std::ceil((i + 1) * 5.0 / 3.0));
      for (std::size_t j = 0; j < 4; ++j) {
        const auto c0 = static_cast<std::size_t>(std::floor(j * 7.0 / 4.0));
        const auto c1 = static_cast<std::size_t>(std::ceil((j + 1) * 7.0 / 4.0));
        for (std::size_t c = 0; c < 3; ++c) {
          double total = 0.0;
          for (std::size_t r = r0; r < r1; ++r)
            for (std::size_t q = c0; q < c1; ++q) total += g.data()[(r * 7 + q) * 3 + c];
          CHECK(std::abs(p.data()[(i * 4 + j) * 3 + c] - total / double((r1 - r0) * (c1 - c0))) < 1e-14);
        }
      }
    }
  }

  TEST_CASE("output larger than input") {
    CHECK_THROWS_AS(adaptive_avg_pool(Tensor::zeros({2, 2, 1}), 3, 1), ShapeError);
  }
}

TEST_SUITE("cross_entropy") {
  TEST_CASE("closed forms") {
    const std::vector<std::size_t> label0{0};
    CHECK(std::abs(cross_entropy(Tensor::zeros({1, 4}), label0).item() - std::log(4.0)) < 1e-15);
    CHECK(cross_entropy(Tensor::from_data({1, 3}, {100, 0, 0}), label0).item() < 1e-40);
    const std::vector<std::size_t> label1{1};
    const double loss = cross_entropy(Tensor::from_data({1, 2}, {0.0, std::log(3.0)}), label1).item();
    CHECK(std::abs(loss + std::log(0.75)) < 1e-12);
  }

  TEST_CASE("out-of-range label") {
    const std::vector<std::size_t> bad{3};
    CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 3}), bad), ConfigError);
  }
}

TEST_SUITE("backward") {
  TEST_CASE("sum gives ones, unrelated leaf gets nothing") {
    std::mt19937_64 rng(10);
    Tensor x = param(rng, {3, 2});
    Tensor y = param(rng, {2});
    sum(x).backward();
    for (double g : x.grad()) CHECK(g == 1.0);
    for (double g : cftest::grad_or_zero(y)) CHECK(g == 0.0);
  }

  TEST_CASE("sum of squared projection matches finite differences") {
    std::mt19937_64 rng(11);
    Tensor x = param(rng, {3, 4});
    Tensor w = param(rng, {4, 2});
    auto loss = [&] {
      Tensor y = matmul(x, w);
      return sum(mul(y, y));
    };
    loss().backward();
    auto objective_in_x = [&](std::span<const double> v) {
      Tensor xx = Tensor::from_data(x.shape(), {v.begin(), v.end()});
      Tensor y = matmul(xx, w.detach());
      return sum(mul(y, y)).item();
    };
    auto numeric = finite_diff_grad(objective_in_x, x.data());
    for (std::size_t i = 0; i < numeric.size(); ++i) CHECK(relative_error(x.grad()[i], numeric[i], 1e-6) < 1e-4);
  }

  TEST_CASE("repeated calls accumulate into leaves") {
    std::mt19937_64 rng(12);
    Tensor x = param(rng, {2, 2});
    Tensor loss = sum(gelu(x));
    loss.backward();
    auto first = to_vec(Tensor::from_data({4}, {x.grad().begin(), x.grad().end()}));
    loss.backward();
    for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == 2.0 * first[i]);
    x.zero_grad();
    for (double g : x.grad()) CHECK(g == 0.0);
  }

  TEST_CASE("deterministic across runs") {
    auto run = [] {
      std::mt19937_64 rng(13);
      Tensor x = param(rng, {4, 6});
      Tensor w = param(rng, {6, 6});
      Tensor h = softmax_axis(matmul(gelu(matmul(x, w)), transpose(w)), 0);
      sum(mul(h, layer_norm(h, Tensor::full({6}, 1.0), Tensor::zeros({6}), 1e-5))).backward();
      return std::pair{cftest::grad_or_zero(x), cftest::grad_or_zero(w)};
    };
    CHECK(run() == run());
  }

  TEST_CASE("non-scalar loss rejected") {
    Tensor x = Tensor::zeros({2}, true);
    CHECK_THROWS_AS(x.backward(), ShapeError);
  }

  TEST_CASE("no graph under NoGradScope") {
    Tensor x = Tensor::zeros({2, 2}, true);
    NoGradScope guard;
    CHECK_FALSE(gelu(x).requires_grad());
  }
}

TEST_SUITE("precision") {
  TEST_CASE("single mode rounds outputs to float") {
    Tensor a = Tensor::from_data({1, 1}, {1.0 / 3.0});
    PrecisionScope single(Precision::kSingle);
    const double v = scale(a, 1.0).item();
    CHECK(v == static_cast<double>(static_cast<float>(1.0 / 3.0)));
    {
      PrecisionScope dbl(Precision::kDouble);
      CHECK(scale(a, 1.0).item() == 1.0 / 3.0);
    }
    CHECK(current_precision() == Precision::kSingle);
  }
}

TEST_SUITE("instrumentation") {
  TEST_CASE("flop tally at op granularity") {
    FlopScope outer;
    {
      FlopScope inner;
      (void)matmul(Tensor::zeros({2, 3}), Tensor::zeros({3, 4}));
      CHECK(inner.flops() == 2 * 2 * 3 * 4);
    }
    (void)softmax_axis(Tensor::zeros({5}), 0);
    CHECK(outer.flops() == 48 + 8 * 5);
  }

  TEST_CASE("injected backward fault flips the gradient") {
    Tensor x = Tensor::from_data({2}, {0.3, -0.7}, true);
    inject_backward_fault("gelu");
    sum(gelu(x)).backward();
    inject_backward_fault("");
    auto flipped = cftest::grad_or_zero(x);
    x.zero_grad();
    sum(gelu(x)).backward();
    for (std::size_t i = 0; i < 2; ++i) CHECK(flipped[i] == -x.grad()[i]);
  }
}

TEST_SUITE("gradients of every op") {
  constexpr double kTol = 1e-4;

  void expect_pass(const GradReport& r) {
    INFO(r.to_text());
    CHECK(r.pass());
  }

  TEST_CASE("binary and linear-algebra ops") {
    std::mt19937_64 rng(20);
    expect_pass(grad_check("matmul", [](const auto& in) { return matmul(in[0], in[1]); },
                           {param(rng, {3, 4}), param(rng, {4, 5})}, {"a", "b"}, kTol));
    expect_pass(grad_check("transpose", [](const auto& in) { return transpose(in[0]); }, {param(rng, {3, 2})}, {},
                           kTol));
    expect_pass(grad_check("add", [](const auto& in) { return add(in[0], in[1]); },
                           {param(rng, {2, 3}), param(rng, {2, 3})}, {}, kTol));
    expect_pass(grad_check("sub", [](const auto& in) { return sub(in[0], in[1]); },
                           {param(rng, {2, 3}), param(rng, {2, 3})}, {}, kTol));
    expect_pass(grad_check("mul", [](const auto& in) { return mul(in[0], in[1]); },
                           {param(rng, {2, 3}), param(rng, {2, 3})}, {}, kTol));
    expect_pass(grad_check("scale", [](const auto& in) { return scale(in[0], -1.7); }, {param(rng, {4})}, {}, kTol));
    expect_pass(grad_check("linear", [](const auto& in) { return linear(in[0], in[1], in[2]); },
                           {param(rng, {3, 4}), param(rng, {4, 2}), param(rng, {2})}, {"x", "W", "b"}, kTol));
    expect_pass(grad_check("sum", [](const auto& in) { return sum(in[0]); }, {param(rng, {2, 2})}, {}, kTol));
    expect_pass(grad_check("mean", [](const auto& in) { return mean(in[0]); }, {param(rng, {2, 5})}, {}, kTol));
  }

  TEST_CASE("nonlinear ops") {
    std::mt19937_64 rng(21);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      expect_pass(grad_check("softmax_axis", [axis](const auto& in) { return softmax_axis(in[0], axis); },
                             {param(rng, {2, 3, 4}, -3, 3)}, {}, kTol));
    }
    expect_pass(grad_check("gelu", [](const auto& in) { return gelu(in[0]); }, {param(rng, {3, 4}, -3, 3)}, {}, kTol));
    expect_pass(grad_check("layer_norm", [](const auto& in) { return layer_norm(in[0], in[1], in[2], 1e-5); },
                           {param(rng, {3, 5}), param(rng, {5}), param(rng, {5})}, {"x", "gamma", "beta"}, kTol));
    const std::vector<std::size_t> labels{2, 0, 1};
    expect_pass(grad_check("cross_entropy", [&](const auto& in) { return cross_entropy(in[0], labels); },
                           {param(rng, {3, 4}, -2, 2)}, {}, kTol));
    expect_pass(grad_check("row_normalize", [](const auto& in) { return row_normalize(in[0], 1e-12); },
                           {param(rng, {3, 4})}, {}, kTol));
  }

  TEST_CASE("layout ops") {
    std::mt19937_64 rng(22);
    expect_pass(grad_check("adaptive_avg_pool", [](const auto& in) { return adaptive_avg_pool(in[0], 2, 3); },
                           {param(rng, {3, 5, 2})}, {}, kTol));
    expect_pass(grad_check("reshape", [](const auto& in) { return reshape(in[0], {6, 2}); }, {param(rng, {3, 4})}, {},
                           kTol));
    expect_pass(grad_check("slice_rows", [](const auto& in) { return slice_rows(in[0], 1, 3); },
                           {param(rng, {4, 3})}, {}, kTol));
    expect_pass(grad_check("slice_cols", [](const auto& in) { return slice_cols(in[0], 1, 3); },
                           {param(rng, {2, 4})}, {}, kTol));
    expect_pass(grad_check("concat_rows", [](const auto& in) { return concat_rows({in[0], in[1]}); },
                           {param(rng, {2, 3}), param(rng, {1, 3})}, {}, kTol));
    expect_pass(grad_check("concat_cols", [](const auto& in) { return concat_cols({in[0], in[1]}); },
                           {param(rng, {2, 3}), param(rng, {2, 1})}, {}, kTol));
    expect_pass(grad_check("mean_rows", [](const auto& in) { return mean_rows(in[0]); }, {param(rng, {4, 3})}, {},
                           kTol));
    expect_pass(grad_check("patchify", [](const auto& in) { return patchify(in[0], 2); }, {param(rng, {4, 4, 2})}, {},
                           kTol));
  }
}

TEST_SUITE("patchify") {
  TEST_CASE("raster order, (dy, dx, c) inside a patch") {
    std::vector<double> img(4 * 4);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = double(i);
    auto p = patchify(Tensor::from_data({4, 4, 1}, img), 2);
    CHECK(p.shape() == Shape{4, 4});
    CHECK(to_vec(slice_rows(p, 0, 1)) == std::vector<double>{0, 1, 4, 5});
    CHECK(to_vec(slice_rows(p, 3, 4)) == std::vector<double>{10, 11, 14, 15});
    CHECK_THROWS_AS(patchify(Tensor::zeros({5, 4, 1}), 2), ShapeError);
  }
}
