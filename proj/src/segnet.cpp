#include "bgadapt/segnet.hpp"

#include <cmath>
#include <random>

#include "bgadapt/errors.hpp"

namespace bgadapt {

namespace {

Conv he_conv(int out_ch, int in_ch, int k, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(in_ch * k * k)));
  std::vector<float> w(static_cast<std::size_t>(out_ch) * in_ch * k * k);
  for (auto& v : w) v = dist(rng);
  return {Tensor::from({out_ch, in_ch, k, k}, std::move(w), true), Tensor::zeros({out_ch}, true)};
}

Conv zero_conv(int out_ch, int in_ch, int k) {
  return {Tensor::zeros({out_ch, in_ch, k, k}, true), Tensor::zeros({out_ch}, true)};
}

Conv copy_frozen(const Conv& c) { return {c.weight.clone(), c.bias.clone()}; }

void push(std::vector<NamedParameter>& out, const std::string& prefix, const Conv& c) {
  out.push_back({prefix + ".weight", c.weight});
  out.push_back({prefix + ".bias", c.bias});
}

StepHead make_head(const ModelConfig& config, int step, int num_classes, std::mt19937_64* rng) {
  StepHead h;
  h.step_index = step;
  h.num_classes = num_classes;
  h.is_initial = step == 1;
  h.hidden = rng ? he_conv(config.head_hidden, config.feature_width, 1, *rng)
                 : zero_conv(config.head_hidden, config.feature_width, 1);
  h.out_classes = zero_conv(num_classes, config.head_hidden, 1);
  h.out_background = zero_conv(1, config.head_hidden, 1);
  return h;
}

}  // namespace

Tensor LogitBundle::stacked_class_logits() const {
  std::vector<Tensor> parts;
  parts.reserve(steps.size());
  for (const auto& s : steps) parts.push_back(s.class_logits);
  return concat_channels(parts);
}

SegmentationModel::SegmentationModel(const ModelConfig& config, int initial_classes, std::uint64_t seed)
    : config_(config) {
  if (initial_classes < 1) throw ConfigError("initial step needs at least one class");
  if (config.image_size < 2 || config.image_size % 2) {
    throw ConfigError("image size must be a positive multiple of the encoder downsample factor 2");
  }
  std::mt19937_64 rng(seed);
  enc1_ = he_conv(config.encoder_width, 3, 3, rng);
  enc2_ = he_conv(config.encoder_width, config.encoder_width, 3, rng);
  enc3_ = he_conv(config.encoder_width, config.encoder_width, 3, rng);
  dec_ = he_conv(config.feature_width, config.encoder_width, 3, rng);
  StepHead first = make_head(config, 1, initial_classes, &rng);
  // The initial head is trained from scratch with no residual to preserve,
  // so its output layers start random rather than zero.
  first.out_classes = he_conv(initial_classes, config.head_hidden, 1, rng);
  first.out_background = he_conv(1, config.head_hidden, 1, rng);
  heads_.push_back(std::move(first));
}

SegmentationModel SegmentationModel::with_layout(const ModelConfig& config, const std::vector<int>& class_counts) {
  if (class_counts.empty()) throw ConfigError("model layout needs at least one step");
  SegmentationModel m;
  m.config_ = config;
  m.enc1_ = zero_conv(config.encoder_width, 3, 3);
  m.enc2_ = zero_conv(config.encoder_width, config.encoder_width, 3);
  m.enc3_ = zero_conv(config.encoder_width, config.encoder_width, 3);
  m.dec_ = zero_conv(config.feature_width, config.encoder_width, 3);
  for (std::size_t i = 0; i < class_counts.size(); ++i) {
    if (class_counts[i] < 1) throw ConfigError("step class count must be positive");
    m.heads_.push_back(make_head(config, static_cast<int>(i) + 1, class_counts[i], nullptr));
  }
  return m;
}

Tensor SegmentationModel::forward_features(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("forward_features: expected 3×H×W image, got " + shape_to_string(image.shape()));
  }
  if (image.dim(1) % 2 || image.dim(2) % 2) {
    throw ConfigError("forward_features: image size " + shape_to_string(image.shape()) +
                      " not divisible by the encoder downsample factor 2");
  }
  Tensor x = relu(enc1_(image));
  x = relu(enc2_(x));
  x = maxpool2x2(x);
  x = relu(enc3_(x));
  x = nearest_upsample2x(x);
  return relu(dec_(x));
}

LogitBundle SegmentationModel::forward_heads(const Tensor& features) const {
  if (features.rank() != 3 || features.dim(0) != config_.feature_width) {
    throw ShapeError("forward_heads: expected " + std::to_string(config_.feature_width) + " feature channels, got " +
                     shape_to_string(features.shape()));
  }
  LogitBundle bundle;
  bundle.steps.reserve(heads_.size());
  for (const auto& h : heads_) {
    StepLogits s;
    s.features = relu(h.hidden(features));
    s.class_logits = h.out_classes(s.features);
    s.adapt_channel = h.out_background(s.features);
    bundle.steps.push_back(std::move(s));
  }
  return bundle;
}

void SegmentationModel::add_step_head(int num_new_classes, std::uint64_t seed) {
  if (num_new_classes < 1) throw ConfigError("add_step_head: need at least one new class");
  std::mt19937_64 rng(seed);
  heads_.push_back(make_head(config_, num_steps() + 1, num_new_classes, &rng));
}

SegmentationModel SegmentationModel::snapshot() const {
  SegmentationModel m;
  m.config_ = config_;
  m.enc1_ = copy_frozen(enc1_);
  m.enc2_ = copy_frozen(enc2_);
  m.enc3_ = copy_frozen(enc3_);
  m.dec_ = copy_frozen(dec_);
  for (const auto& h : heads_) {
    StepHead c = h;
    c.hidden = copy_frozen(h.hidden);
    c.out_classes = copy_frozen(h.out_classes);
    c.out_background = copy_frozen(h.out_background);
    m.heads_.push_back(std::move(c));
  }
  return m;
}

std::vector<NamedParameter> SegmentationModel::backbone_parameters() const {
  std::vector<NamedParameter> out;
  push(out, "encoder.conv1", enc1_);
  push(out, "encoder.conv2", enc2_);
  push(out, "encoder.conv3", enc3_);
  push(out, "decoder.conv", dec_);
  return out;
}

std::vector<NamedParameter> SegmentationModel::head_parameters(int step) const {
  const StepHead& h = head(step);
  const std::string prefix = "head" + std::to_string(step);
  std::vector<NamedParameter> out;
  push(out, prefix + ".hidden", h.hidden);
  push(out, prefix + ".out_cls", h.out_classes);
  push(out, prefix + ".out_bg", h.out_background);
  return out;
}

std::vector<NamedParameter> SegmentationModel::parameters() const {
  auto out = backbone_parameters();
  for (int s = 1; s <= num_steps(); ++s) {
    auto h = head_parameters(s);
    out.insert(out.end(), h.begin(), h.end());
  }
  return out;
}

std::size_t SegmentationModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

void SegmentationModel::set_requires_grad(bool on) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(on);
}

std::vector<int> SegmentationModel::class_counts() const {
  std::vector<int> out;
  for (const auto& h : heads_) out.push_back(h.num_classes);
  return out;
}

int SegmentationModel::total_classes() const {
  int n = 0;
  for (const auto& h : heads_) n += h.num_classes;
  return n;
}

}  // namespace bgadapt
