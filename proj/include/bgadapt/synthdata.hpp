#pragma once

// Deterministic synthetic scenes: coloured parametric shapes on a noisy
// background, one shape family per class. Scenes follow the overlapped
// protocol: any class may appear in any step, but a step's labels only keep
// the classes that step owns.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bgadapt/protocol.hpp"
#include "bgadapt/tensor.hpp"

namespace bgadapt {

enum class ShapeFamily { kDisk, kSquare, kTriangle, kRing, kCross, kBar, kDiamond, kLShape };

inline constexpr int kMaxPaletteClasses = 16;
inline constexpr int kMinCanvas = 16;
inline constexpr double kMinVisibleFraction = 0.25;

ShapeFamily shape_family_of(int class_id);
bool is_textured(int class_id);

struct SceneRequest {
  int canvas = 32;
  std::vector<int> palette;           // classes eligible for the extra objects
  std::optional<int> required_class;  // always placed first when set
  int min_objects = 2;
  int max_objects = 4;
};

struct SyntheticScene {
  Tensor image;  // 3×H×W in [0,1]
  LabelMap full_label;
  std::vector<int> objects;  // class of each placed object, in paint order

  // Classes outside C^t read background.
  LabelMap step_label(const TaskProtocol& protocol, int step) const;
  // Classes learned after `step` read background.
  LabelMap label_up_to(const TaskProtocol& protocol, int step) const;
};

SyntheticScene generate_scene(std::uint64_t seed, const SceneRequest& request);

struct Sample {
  Tensor image;
  LabelMap label;
};

/// Training data D^t (labels hidden to C^t) or a validation split (step 0,
/// full labels over all protocol classes).
struct Dataset {
  int step = 0;
  int canvas = 32;
  bool full_labels = false;
  std::vector<Sample> samples;
};

Dataset build_split(const TaskProtocol& protocol, int step, int count, std::uint64_t seed, int canvas = 32);
Dataset build_validation(const TaskProtocol& protocol, int count, std::uint64_t seed, int canvas = 32);

/// Hides classes learned after `step` in a full-label dataset.
Dataset restrict_to_step(const Dataset& validation, const TaskProtocol& protocol, int step);

// Little-endian container:
//   "BGADATA1" | u32 version | u32 step | u32 full_labels | u32 count
//   | u32 channels | u32 height | u32 width
//   | count × (f32[channels*height*width] image, u8[height*width] labels)
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// 8-bit binary PGM of a label grid, ids scaled by 255/max_id.
void write_label_pgm(const LabelMap& label, int max_id, const std::filesystem::path& path);

/// Mixes (seed, stream, index) into an independent 64-bit seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

}  // namespace bgadapt
