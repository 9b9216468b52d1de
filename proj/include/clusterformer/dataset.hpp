#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "clusterformer/tensor.hpp"

namespace clusterformer {

struct Dataset {
  std::vector<Tensor> images;  // H x W x C, values in [0, 1]
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return images.size(); }
  std::size_t num_classes() const { return class_names.size(); }
};

// White disk, square and cross shapes of fixed size at a random position on
// black, blended with uniform noise.
struct SyntheticSpec {
  std::size_t image_size = 32;
  std::size_t classes = 3;  // 1..3, taken in the order disk, square, cross
  std::size_t per_class = 100;
  double noise = 0.01;      // blend weight of uniform noise, in [0, 1)
  std::size_t channels = 1;

  // Parses "synthetic" or "synthetic:per_class=100,size=32,noise=0.01,classes=3,channels=1".
  static SyntheticSpec parse(const std::string& text);
};

bool is_synthetic_source(const std::string& source);

// Sample i has label i % classes. Pixels depend only on spec and seed.
Dataset make_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// One subdirectory per class (sorted by name), each holding .pgm/.ppm/.pnm
// files (sorted by name). All images must share one shape.
Dataset load_image_directory(const std::string& root);

// "synthetic[:...]" or a directory path.
Dataset load_dataset(const std::string& source, std::uint64_t seed);

}  // namespace clusterformer
