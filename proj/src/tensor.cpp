#include "clusterformer/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "tensor_internal.hpp"

namespace clusterformer {

namespace {

thread_local Precision t_precision = Precision::kDouble;
thread_local bool t_grad_enabled = true;
thread_local FlopScope* t_flop_scope = nullptr;

std::string& fault_op() {
  static std::string name;
  return name;
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Precision current_precision() { return t_precision; }

PrecisionScope::PrecisionScope(Precision precision) : saved_(t_precision) { t_precision = precision; }
PrecisionScope::~PrecisionScope() { t_precision = saved_; }

bool grad_enabled() { return t_grad_enabled; }

NoGradScope::NoGradScope() : saved_(t_grad_enabled) { t_grad_enabled = false; }
NoGradScope::~NoGradScope() { t_grad_enabled = saved_; }

FlopScope::FlopScope() : parent_(t_flop_scope) { t_flop_scope = this; }
FlopScope::~FlopScope() { t_flop_scope = parent_; }

void record_flops(std::uint64_t n) {
  for (FlopScope* s = t_flop_scope; s != nullptr; s = s->parent_) s->flops_ += n;
}

void inject_backward_fault(const std::string& op_name) { fault_op() = op_name; }

namespace detail {

std::vector<double>& TensorImpl::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

double fault_sign(const char* op) {
  const auto& f = fault_op();
  return (!f.empty() && f == op) ? -1.0 : 1.0;
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   const std::vector<Tensor>& inputs, BackwardFn backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (t_precision == Precision::kSingle) {
    for (auto& v : impl->data) v = static_cast<double>(static_cast<float>(v));
  }
  impl->op = op;
  bool needs_grad = false;
  if (t_grad_enabled) {
    for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
  }
  if (needs_grad) {
    impl->requires_grad = true;
    for (const Tensor& t : inputs) impl->parents.push_back(t.impl());
    if (fault_sign(op) < 0) {
      impl->backward = [inner = std::move(backward)](TensorImpl& self) {
        for (auto& g : self.grad) g = -g;
        inner(self);
        for (auto& g : self.grad) g = -g;
      };
    } else {
      impl->backward = std::move(backward);
    }
  }
  return Tensor(std::move(impl));
}

}  // namespace detail

namespace {

std::shared_ptr<detail::TensorImpl> new_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor: rank must be at least 1");
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor: zero extent in " + shape_to_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_to_string(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return Tensor(new_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(new_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  return from_data(std::move(shape), std::move(data), true);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return impl_->data[row * impl_->shape.back() + col];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
bool Tensor::has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

std::string Tensor::op_name() const { return impl_->op ? impl_->op : "leaf"; }

void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_to_string(shape()));
  }
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS, parents visited in recorded order.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::TensorImpl* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (node->backward) node->grad.assign(node->data.size(), 0.0);
    else node->ensure_grad();
  }
  impl_->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

Tensor Tensor::detach() const { return Tensor(new_leaf(impl_->shape, impl_->data, false)); }

}  // namespace clusterformer
