#pragma once

#include <stdexcept>
#include <string>

namespace clusterformer {

// Incompatible tensor extents. The message names every offending shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid model, run, or operation configuration (bad K, T = 0, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed or unreadable files: checkpoints, images, config text.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace clusterformer
