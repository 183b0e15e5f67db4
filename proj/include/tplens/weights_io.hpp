#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>

#include "tplens/model.hpp"

namespace tplens {

// Weight file layout (all integers little-endian):
//   8 bytes  magic "TPLNSWGT"
//   u32      format version
//   u64      header length in bytes
//   header   JSON text: {"config": {...}, "tensors": [{"name", "shape"}, ...]}
//   blobs    raw f32 data for each tensor, in header order
inline constexpr std::string_view kWeightsMagic = "TPLNSWGT";
inline constexpr std::uint32_t kWeightsVersion = 1;

void save_weights(const std::filesystem::path& path, const Model& model);
// Validates the whole file before returning; never yields a partial model.
Model load_weights(const std::filesystem::path& path);

}  // namespace tplens
