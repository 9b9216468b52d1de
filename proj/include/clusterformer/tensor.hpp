#pragma once

// Dense row-major tensor with a reverse-mode differentiation tape.
//
// A Tensor is a cheap handle (shared ownership) onto storage plus an optional
// graph node. Operations in ops.hpp record their inputs and a backward rule
// whenever gradient recording is enabled and at least one input requires a
// gradient. backward() walks the recorded graph in a fixed topological order,
// so gradients are bit-reproducible run to run.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "clusterformer/errors.hpp"

namespace clusterformer {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

enum class Precision { kSingle, kDouble };

// Arithmetic always runs in double. In single mode every op output is rounded
// to the nearest float, which emulates float32 storage between ops.
Precision current_precision();

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision precision);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

bool grad_enabled();

// Disables graph recording on the current thread (inference, benchmarks).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool saved_;
};

// Counts floating-point operations executed by ops on the current thread while
// alive. Multiply-adds count 2, exp-normalisation counts 8 per element,
// elementwise add/scale count 1 per element. Nested scopes both accumulate.
class FlopScope {
 public:
  FlopScope();
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

  std::uint64_t flops() const { return flops_; }

 private:
  friend void record_flops(std::uint64_t);
  std::uint64_t flops_ = 0;
  FlopScope* parent_;
};

void record_flops(std::uint64_t n);

// Test hook: negates the backward rule of the named op ("matmul", "gelu", ...)
// for every graph node recorded afterwards. Empty string clears it.
void inject_backward_fault(const std::string& op_name);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = nullptr;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);
  // Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writes bypass the graph. Used by optimisers, loaders and finite differences.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  // Name of the producing op, or "leaf".
  std::string op_name() const;

  // Accumulates d(this)/d(leaf) into every reachable leaf that requires a
  // gradient. Intermediate gradients are recomputed from scratch per call.
  void backward() const;

  // Same values, no graph history.
  Tensor detach() const;

  // Identity of the underlying storage, for tests.
  const void* id() const { return impl_.get(); }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

}  // namespace clusterformer
