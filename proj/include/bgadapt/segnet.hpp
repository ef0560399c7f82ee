#pragma once

// Toy encoder/decoder segmentation network with one classifier head per
// learning step. Every head emits |C^i| class logits plus one extra channel:
// the background logit for the initial head, an adaptation residual for
// later heads.

#include <cstdint>
#include <string>
#include <vector>

#include "bgadapt/tensor.hpp"

namespace bgadapt {

struct ModelConfig {
  int image_size = 32;
  int encoder_width = 16;
  int feature_width = 16;
  int head_hidden = 32;

  bool operator==(const ModelConfig&) const = default;
};

struct Conv {
  Tensor weight;  // O×C×K×K
  Tensor bias;    // O

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, 1, weight.dim(2) / 2); }
};

struct StepHead {
  int step_index = 1;
  int num_classes = 0;
  bool is_initial = false;
  Conv hidden;          // 1×1, feature_width -> head_hidden, followed by relu
  Conv out_classes;     // 1×1, head_hidden -> num_classes
  Conv out_background;  // 1×1, head_hidden -> 1 (b^i)
};

struct StepLogits {
  Tensor class_logits;   // |C^i|×h×w
  Tensor adapt_channel;  // 1×h×w, b^i
  Tensor features;       // head_hidden×h×w, post-relu hidden output
};

struct LogitBundle {
  std::vector<StepLogits> steps;
  Tensor mu_b;  // filled in by the background aggregation, never by the heads

  // Class logits of all heads stacked in head order.
  Tensor stacked_class_logits() const;
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

class SegmentationModel {
 public:
  SegmentationModel() = default;
  SegmentationModel(const ModelConfig& config, int initial_classes, std::uint64_t seed);

  Tensor forward_features(const Tensor& image) const;
  LogitBundle forward_heads(const Tensor& features) const;
  LogitBundle forward(const Tensor& image) const { return forward_heads(forward_features(image)); }

  // Appends the head for the next step. Hidden layer gets He init from
  // `seed`; both output layers start at exactly zero.
  void add_step_head(int num_new_classes, std::uint64_t seed);

  // Deep copy with gradient tracking disabled on every parameter.
  SegmentationModel snapshot() const;

  // Stable order: encoder, decoder, then heads in step order.
  std::vector<NamedParameter> parameters() const;
  std::vector<NamedParameter> backbone_parameters() const;
  std::vector<NamedParameter> head_parameters(int step) const;
  std::size_t parameter_count() const;

  void set_requires_grad(bool on);

  const ModelConfig& config() const { return config_; }
  int num_steps() const { return static_cast<int>(heads_.size()); }
  const StepHead& head(int step) const { return heads_.at(static_cast<std::size_t>(step - 1)); }
  StepHead& head(int step) { return heads_.at(static_cast<std::size_t>(step - 1)); }
  std::vector<int> class_counts() const;
  int total_classes() const;

  // Rebuilds the layer layout for the given per-step class counts with all
  // parameters zero; used when loading archives.
  static SegmentationModel with_layout(const ModelConfig& config, const std::vector<int>& class_counts);

 private:
  ModelConfig config_;
  Conv enc1_, enc2_, enc3_, dec_;
  std::vector<StepHead> heads_;
};

}  // namespace bgadapt
