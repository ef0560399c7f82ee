#pragma once

// Model archive: self-describing container of named float32 arrays.
//
//   "BGAMODEL" | u32 version
//   | u32 image_size | u32 encoder_width | u32 feature_width | u32 head_hidden
//   | u32 steps | u32 class_count[steps]
//   | u64 config_hash | u32 step_index
//   | u32 n_params | n_params × (string name, u32 ndim, u32 dims[ndim], f32 values[])
//
// Strings are u32 length + bytes; everything is little-endian.

#include <cstdint>
#include <filesystem>
#include <optional>

#include "bgadapt/segnet.hpp"

namespace bgadapt {

struct Checkpoint {
  SegmentationModel model;
  std::uint64_t config_hash = 0;
  int step_index = 0;
};

void save_checkpoint(const SegmentationModel& model, std::uint64_t config_hash, int step_index,
                     const std::filesystem::path& path);

// Throws IoError on corruption, and ConfigError when `expected_hash` is set
// and differs from the stored hash. Loaded parameters track gradients.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash = std::nullopt);

}  // namespace bgadapt
