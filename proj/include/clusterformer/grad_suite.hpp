#pragma once

#include <cstdint>
#include <vector>

#include "clusterformer/config.hpp"
#include "clusterformer/oracle.hpp"

namespace clusterformer {

// One report per differentiable op plus the clustering ops, all in double
// precision against central differences.
std::vector<GradReport> op_grad_suite(double tolerance = 1e-4, std::uint64_t seed = 7);

// Cross-entropy of a freshly initialized model on one random image, checked
// on a sampled `fraction` of every parameter array.
GradReport model_grad_check(const ModelConfig& config, double tolerance = 1e-3, double fraction = 0.01,
                            std::uint64_t seed = 7);

}  // namespace clusterformer
