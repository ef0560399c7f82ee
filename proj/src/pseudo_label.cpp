#include "bgadapt/pseudo_label.hpp"

#include <algorithm>

#include "bgadapt/errors.hpp"

namespace bgadapt {

namespace {

void check_step_label(const LabelMap& step_label, ClassRange current) {
  for (std::size_t k = 0; k < step_label.size(); ++k) {
    const int id = step_label.ids[k];
    if (id != kBackgroundId && !current.contains(id)) {
      throw ContractError("step label pixel " + std::to_string(k) + " has class " + std::to_string(id) +
                          " outside background and current classes [" + std::to_string(current.first) + ", " +
                          std::to_string(current.last) + "]");
    }
  }
}

}  // namespace

std::size_t PseudoLabel::count(LabelSource s) const { return static_cast<std::size_t>(std::count(source.begin(), source.end(), s)); }

PseudoLabel ground_truth_label(const LabelMap& step_label, ClassRange current) {
  check_step_label(step_label, current);
  PseudoLabel pl;
  pl.labels = step_label;
  pl.known_classes = current.last;
  pl.source.resize(step_label.size());
  for (std::size_t k = 0; k < step_label.size(); ++k) {
    pl.source[k] = step_label.ids[k] == kBackgroundId ? LabelSource::kBackground : LabelSource::kGroundTruth;
  }
  return pl;
}

PseudoLabel generate_pseudo_label(const LabelMap& step_label, const Tensor& teacher_probs, float tau,
                                  ClassRange current) {
  if (!(tau > 0.0f && tau <= 1.0f)) throw ConfigError("pseudo label threshold must lie in (0, 1]");
  const int old_classes = current.first - 1;
  if (teacher_probs.rank() != 3 || teacher_probs.dim(0) != old_classes || teacher_probs.dim(1) != step_label.height ||
      teacher_probs.dim(2) != step_label.width) {
    throw ShapeError("teacher probabilities " + shape_to_string(teacher_probs.shape()) + " do not match " +
                     std::to_string(old_classes) + " old classes over " + std::to_string(step_label.height) + "x" +
                     std::to_string(step_label.width));
  }
  PseudoLabel pl = ground_truth_label(step_label, current);
  if (old_classes == 0) return pl;
  const auto probs = teacher_probs.values();
  const std::size_t plane = step_label.size();
  for (std::size_t k = 0; k < plane; ++k) {
    if (step_label.ids[k] != kBackgroundId) continue;
    int best = 0;
    float best_p = probs[k];
    for (int c = 1; c < old_classes; ++c) {
      const float p = probs[static_cast<std::size_t>(c) * plane + k];
      if (p > best_p) {
        best = c;
        best_p = p;
      }
    }
    if (best_p >= tau) {
      pl.labels.ids[k] = best + 1;
      pl.source[k] = LabelSource::kTeacher;
    }
  }
  return pl;
}

Tensor binary_class_map(const PseudoLabel& pl, int class_id) {
  if (class_id < 0 || class_id > pl.known_classes) {
    throw ConfigError("binary_class_map: class " + std::to_string(class_id) + " unknown (known 0.." +
                      std::to_string(pl.known_classes) + ")");
  }
  std::vector<float> v(pl.labels.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = pl.labels.ids[k] == class_id ? 1.0f : 0.0f;
  return Tensor::from({1, pl.labels.height, pl.labels.width}, std::move(v));
}

}  // namespace bgadapt
