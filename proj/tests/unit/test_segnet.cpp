#include <gtest/gtest.h>

#include <random>

#include "bgadapt/errors.hpp"
#include "bgadapt/segnet.hpp"
#include "oracles.hpp"

using namespace bgadapt;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 16;
  c.encoder_width = 8;
  c.feature_width = 8;
  c.head_hidden = 12;
  return c;
}

Tensor random_image(std::uint64_t seed, int size) {
  std::mt19937_64 rng(seed);
  return oracle::random_tensor(rng, {3, size, size}, 0, 1);
}

std::size_t conv_size(const Conv& c) { return c.weight.numel() + c.bias.numel(); }

}  // namespace

TEST(Segnet, FeatureShapeMatchesInputResolution) {
  ModelConfig cfg;
  const SegmentationModel m(cfg, 4, 1);
  const Tensor f = m.forward_features(random_image(2, 32));
  EXPECT_EQ(f.shape(), (Shape{cfg.feature_width, 32, 32}));
}

TEST(Segnet, ZeroImagePropagatesZeros) {
  const SegmentationModel m(small_config(), 4, 3);
  const Tensor f = m.forward_features(Tensor::zeros({3, 16, 16}));
  for (float v : f.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Segnet, ForwardIsDeterministic) {
  const SegmentationModel m(small_config(), 4, 5);
  const Tensor x = random_image(6, 16);
  const LogitBundle a = m.forward(x), b = m.forward(x);
  EXPECT_TRUE(oracle::bit_equal(a.stacked_class_logits(), b.stacked_class_logits()));
  EXPECT_TRUE(oracle::bit_equal(a.steps[0].adapt_channel, b.steps[0].adapt_channel));
  const SegmentationModel m2(small_config(), 4, 5);
  EXPECT_TRUE(oracle::bit_equal(m2.forward(x).stacked_class_logits(), a.stacked_class_logits()));
}

TEST(Segnet, InputValidation) {
  const SegmentationModel m(small_config(), 4, 1);
  EXPECT_THROW(m.forward_features(Tensor::zeros({1, 16, 16})), ShapeError);
  EXPECT_THROW(m.forward_features(Tensor::zeros({3, 15, 16})), ConfigError);
  EXPECT_THROW(m.forward_heads(Tensor::zeros({3, 16, 16})), ShapeError);
}

TEST(Segnet, HeadShapes) {
  SegmentationModel m(small_config(), 4, 1);
  LogitBundle b = m.forward(random_image(1, 16));
  ASSERT_EQ(b.steps.size(), 1u);
  EXPECT_EQ(b.steps[0].class_logits.shape(), (Shape{4, 16, 16}));
  EXPECT_EQ(b.steps[0].adapt_channel.shape(), (Shape{1, 16, 16}));
  EXPECT_EQ(b.steps[0].features.shape(), (Shape{12, 16, 16}));
  EXPECT_FALSE(b.mu_b.defined());
  EXPECT_TRUE(m.head(1).is_initial);

  m.add_step_head(1, 9);
  b = m.forward(random_image(1, 16));
  ASSERT_EQ(b.steps.size(), 2u);
  EXPECT_EQ(b.stacked_class_logits().dim(0), 5);
  EXPECT_FALSE(m.head(2).is_initial);
  EXPECT_EQ(m.class_counts(), (std::vector<int>{4, 1}));
  EXPECT_EQ(m.total_classes(), 5);
}

TEST(Segnet, AddHeadInheritsAndStartsAtZero) {
  SegmentationModel m(small_config(), 4, 1);
  const auto before = m.parameters();
  const std::size_t count_before = m.parameter_count();
  std::vector<Tensor> copies;
  for (const auto& p : before) copies.push_back(p.tensor.clone());

  m.add_step_head(2, 42);
  EXPECT_EQ(m.num_steps(), 2);
  const auto after = m.parameters();
  ASSERT_GT(after.size(), before.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_EQ(after[i].name, before[i].name);
    EXPECT_TRUE(oracle::bit_equal(after[i].tensor, copies[i])) << after[i].name;
  }
  const StepHead& h = m.head(2);
  EXPECT_EQ(m.parameter_count() - count_before, conv_size(h.hidden) + conv_size(h.out_classes) + conv_size(h.out_background));

  const LogitBundle b = m.forward(random_image(8, 16));
  for (float v : b.steps[1].class_logits.values()) EXPECT_EQ(v, 0.0f);
  for (float v : b.steps[1].adapt_channel.values()) EXPECT_EQ(v, 0.0f);
  bool hidden_nonzero = false;
  for (float v : h.hidden.weight.values()) hidden_nonzero = hidden_nonzero || v != 0.0f;
  EXPECT_TRUE(hidden_nonzero);

  EXPECT_THROW(m.add_step_head(0, 1), ConfigError);
}

TEST(Segnet, SnapshotIsFrozenValueCopy) {
  SegmentationModel m(small_config(), 4, 1);
  m.add_step_head(1, 2);
  const SegmentationModel teacher = m.snapshot();
  const Tensor x = random_image(3, 16);
  const Tensor s0 = m.forward(x).stacked_class_logits();
  EXPECT_TRUE(oracle::bit_equal(teacher.forward(x).stacked_class_logits(), s0));
  EXPECT_TRUE(oracle::bit_equal(teacher.snapshot().forward(x).stacked_class_logits(), s0));
  for (const auto& p : teacher.parameters()) EXPECT_FALSE(p.tensor.requires_grad()) << p.name;

  for (auto& p : m.parameters()) {
    for (float& v : p.tensor.mutable_values()) v += 0.25f;
  }
  EXPECT_FALSE(oracle::bit_equal(m.forward(x).stacked_class_logits(), s0));
  EXPECT_TRUE(oracle::bit_equal(teacher.forward(x).stacked_class_logits(), s0));
}

TEST(Segnet, ParameterGroupsPartitionTheModel) {
  SegmentationModel m(small_config(), 3, 1);
  m.add_step_head(1, 2);
  m.add_step_head(1, 3);
  std::size_t n = m.backbone_parameters().size();
  for (int s = 1; s <= 3; ++s) n += m.head_parameters(s).size();
  EXPECT_EQ(n, m.parameters().size());
  const auto all = m.parameters();
  EXPECT_EQ(all.front().name, m.backbone_parameters().front().name);
  EXPECT_EQ(all.back().name, m.head_parameters(3).back().name);
}

TEST(Segnet, HeadOutputMatchesPointwiseOracle) {
  const SegmentationModel m(small_config(), 2, 11);
  const Tensor f = m.forward_features(random_image(12, 16));
  const LogitBundle b = m.forward_heads(f);
  const StepHead& h = m.head(1);
  int oh = 0, ow = 0;
  oracle::Vec hidden = oracle::conv2d(oracle::to_vec(f), 8, 16, 16, oracle::to_vec(h.hidden.weight), 12, 1,
                                      oracle::to_vec(h.hidden.bias), 1, 0, &oh, &ow);
  for (double& v : hidden) v = std::max(v, 0.0);
  const auto cls = oracle::conv2d(hidden, 12, 16, 16, oracle::to_vec(h.out_classes.weight), 2, 1,
                                  oracle::to_vec(h.out_classes.bias), 1, 0);
  const auto bg = oracle::conv2d(hidden, 12, 16, 16, oracle::to_vec(h.out_background.weight), 1, 1,
                                 oracle::to_vec(h.out_background.bias), 1, 0);
  for (std::size_t i = 0; i < cls.size(); ++i) EXPECT_NEAR(b.steps[0].class_logits.at(i), cls[i], 1e-4);
  for (std::size_t i = 0; i < bg.size(); ++i) EXPECT_NEAR(b.steps[0].adapt_channel.at(i), bg[i], 1e-4);
}
