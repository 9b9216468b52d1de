#pragma once

#include <functional>
#include <vector>

#include "clusterformer/tensor.hpp"

namespace clusterformer::detail {

using BackwardFn = std::function<void(TensorImpl&)>;

// Wraps freshly computed output values into a Tensor, applying the precision
// mode and recording the graph edge when any input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   const std::vector<Tensor>& inputs, BackwardFn backward);

double fault_sign(const char* op);

}  // namespace clusterformer::detail
