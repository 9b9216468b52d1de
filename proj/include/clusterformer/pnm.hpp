#pragma once

// Binary portable graymap (P5) and pixmap (P6) images.

#include <cstdint>
#include <string>
#include <vector>

#include "clusterformer/tensor.hpp"

namespace clusterformer {

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB triples
};

// Returns H x W x C (C = 1 for P5, 3 for P6) with values scaled to [0, 1].
// Accepts maxval up to 65535. Errors name the file.
Tensor read_pnm(const std::string& path);

// H x W x 1 writes P5, H x W x 3 writes P6; values clamped to [0, 1].
void write_pnm(const std::string& path, const Tensor& image);
void write_ppm(const std::string& path, const RgbImage& image);

}  // namespace clusterformer
