#pragma once

#include <cstdint>
#include <vector>

#include "bgadapt/protocol.hpp"
#include "bgadapt/tensor.hpp"

namespace bgadapt {

enum class LabelSource : std::uint8_t { kGroundTruth, kTeacher, kBackground };

struct PseudoLabel {
  LabelMap labels;
  std::vector<LabelSource> source;
  int known_classes = 0;  // ids 0..known_classes are valid

  std::size_t count(LabelSource s) const;
};

/// Backfills confident teacher predictions into the background of a step
/// label. `teacher_probs` holds one sigmoid channel per old class
/// (ids 1..current.first-1, in order). A background pixel takes the
/// teacher's argmax class when its max probability is >= tau; ties go to
/// the lowest id.
PseudoLabel generate_pseudo_label(const LabelMap& step_label, const Tensor& teacher_probs, float tau,
                                  ClassRange current);

/// Pseudo label that is just the ground truth (initial step: no teacher).
PseudoLabel ground_truth_label(const LabelMap& step_label, ClassRange current);

/// 1×h×w indicator of `class_id` in the pseudo label.
Tensor binary_class_map(const PseudoLabel& pl, int class_id);

}  // namespace bgadapt
