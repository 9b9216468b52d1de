#pragma once

// Binary checkpoint:
//   "CFK1" | u32 version | u32 array count
//   per array: u32 name length | name | u32 rank | u32 extents... | f32 values (row-major)
//   u32 config length | config text
// All integers and floats little-endian.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clusterformer/model.hpp"

namespace clusterformer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Model& model);
Model deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

void save_checkpoint(const Model& model, const std::string& path);
// Throws FormatError on I/O, magic, version, missing/extra array or shape
// mismatch; ConfigError when `expected` is given and the stored config differs.
Model load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace clusterformer
