#include "bgadapt/metrics.hpp"

#include "bgadapt/background_adaptation.hpp"
#include "bgadapt/errors.hpp"

namespace bgadapt {

void ConfusionCounts::accumulate(const LabelMap& prediction, const LabelMap& truth) {
  if (prediction.height != truth.height || prediction.width != truth.width) {
    throw ShapeError("confusion: prediction and truth sizes differ");
  }
  const int n = num_ids();
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const int p = prediction.ids[k];
    const int t = truth.ids[k];
    if (p < 0 || p >= n || t < 0 || t >= n) {
      throw ConfigError("confusion: id out of range at pixel " + std::to_string(k) + " (pred " + std::to_string(p) +
                        ", truth " + std::to_string(t) + ", ids 0.." + std::to_string(n - 1) + ")");
    }
    if (p == t) {
      ++tp[t];
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
}

void ConfusionCounts::merge(const ConfusionCounts& other) {
  if (other.num_ids() != num_ids()) throw ShapeError("confusion: cannot merge counts of different sizes");
  for (int i = 0; i < num_ids(); ++i) {
    tp[i] += other.tp[i];
    fp[i] += other.fp[i];
    fn[i] += other.fn[i];
  }
}

std::optional<double> ConfusionCounts::iou(int id) const {
  if (!present(id)) return std::nullopt;
  return static_cast<double>(tp[id]) / static_cast<double>(tp[id] + fp[id] + fn[id]);
}

GroupedMiou grouped_miou(const ConfusionCounts& counts, const TaskProtocol& protocol, int step) {
  const int last = protocol.classes_up_to(step);
  if (counts.num_ids() < last + 1) throw ConfigError("confusion counts do not cover the classes of this step");
  GroupedMiou out;
  out.per_class.resize(static_cast<std::size_t>(last) + 1);
  for (int id = 0; id <= last; ++id) out.per_class[static_cast<std::size_t>(id)] = counts.iou(id);

  auto average = [&](int first, int end) -> std::optional<double> {
    double s = 0.0;
    int n = 0;
    for (int id = first; id <= end; ++id) {
      if (const auto& v = out.per_class[static_cast<std::size_t>(id)]) {
        s += *v;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return s / n;
  };
  out.initial = average(0, protocol.n_initial());
  if (step >= 2) out.incremental = average(protocol.n_initial() + 1, last);
  out.all = average(0, last);
  return out;
}

LabelMap predict_from_bundle(const LogitBundle& bundle, BackgroundScheme scheme) {
  NoGradGuard no_grad;
  const Tensor bg = sigmoid(aggregate_background(bundle, AggregationMode::kInference, scheme));
  const Tensor cls = sigmoid(bundle.stacked_class_logits());
  const int h = bg.dim(1), w = bg.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const int classes = cls.dim(0);
  LabelMap out(h, w);
  const auto b = bg.values();
  const auto c = cls.values();
  for (std::size_t k = 0; k < plane; ++k) {
    int best = kBackgroundId;
    float best_p = b[k];
    for (int i = 0; i < classes; ++i) {
      const float p = c[static_cast<std::size_t>(i) * plane + k];
      if (p > best_p) {
        best = i + 1;
        best_p = p;
      }
    }
    out.ids[k] = best;
  }
  return out;
}

LabelMap predict(const SegmentationModel& model, const Tensor& image, BackgroundScheme scheme) {
  NoGradGuard no_grad;
  return predict_from_bundle(model.forward(image), scheme);
}

}  // namespace bgadapt
