#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "bgadapt/background_adaptation.hpp"
#include "bgadapt/protocol.hpp"
#include "bgadapt/segnet.hpp"

namespace bgadapt {

/// Per-class pixel counts; index 0 is background.
struct ConfusionCounts {
  std::vector<std::uint64_t> tp, fp, fn;

  explicit ConfusionCounts(int num_ids = 0) : tp(num_ids, 0), fp(num_ids, 0), fn(num_ids, 0) {}

  int num_ids() const { return static_cast<int>(tp.size()); }
  void accumulate(const LabelMap& prediction, const LabelMap& truth);
  void merge(const ConfusionCounts& other);

  // False when the class never occurs in truth or prediction.
  bool present(int id) const { return tp[id] + fp[id] + fn[id] > 0; }
  std::optional<double> iou(int id) const;
};

struct GroupedMiou {
  std::optional<double> initial;      // background + step-1 classes
  std::optional<double> incremental;  // classes of steps 2..t
  std::optional<double> all;
  std::vector<std::optional<double>> per_class;  // indexed by id
};

GroupedMiou grouped_miou(const ConfusionCounts& counts, const TaskProtocol& protocol, int step);

/// Per-pixel argmax over [sigmoid(mu_b), sigmoid(class logits of all heads)],
/// ties to the lowest id. mu_b is the inference-mode aggregate.
LabelMap predict_from_bundle(const LogitBundle& bundle, BackgroundScheme scheme = BackgroundScheme::kFiltered);
LabelMap predict(const SegmentationModel& model, const Tensor& image,
                 BackgroundScheme scheme = BackgroundScheme::kFiltered);

}  // namespace bgadapt
