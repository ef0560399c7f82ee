#include <gtest/gtest.h>

#include <random>

#include "bgadapt/errors.hpp"
#include "bgadapt/pseudo_label.hpp"
#include "oracles.hpp"

using namespace bgadapt;

namespace {

// 4×4 scene with 2 old classes and one current class (id 3). Rows:
//   0: current-class pixels, teacher very confident in old class 1
//   1: background, teacher max exactly tau-ish cases filled per test
//   2: background, teacher below every tau
//   3: background, teacher above every tau, argmax class 2
struct Scene {
  LabelMap gt{4, 4};
  Tensor probs;
};

Scene case_table_scene(float row1_max) {
  Scene s;
  std::vector<float> p(2 * 16, 0.0f);
  auto set = [&](int c, int y, int x, float v) { p[static_cast<std::size_t>(c) * 16 + y * 4 + x] = v; };
  for (int x = 0; x < 4; ++x) {
    s.gt.at(0, x) = 3;
    set(0, 0, x, 0.999f);
    set(1, 0, x, 0.1f);
    set(0, 1, x, row1_max);
    set(1, 1, x, 0.05f);
    set(0, 2, x, 0.2f);
    set(1, 2, x, 0.25f);
    set(0, 3, x, 0.3f);
    set(1, 3, x, 0.995f);
  }
  s.probs = Tensor::from({2, 4, 4}, p);
  return s;
}

constexpr ClassRange kCurrent{3, 3};

}  // namespace

TEST(PseudoLabel, SpecExamples) {
  LabelMap gt(1, 2);
  gt.at(0, 0) = 5;
  const PseudoLabel a = generate_pseudo_label(gt, Tensor::from({4, 1, 2}, {0.99f, 0.9f, 0, 0.1f, 0, 0, 0, 0}), 0.7f,
                                              ClassRange{5, 5});
  EXPECT_EQ(a.labels.at(0, 0), 5);
  EXPECT_EQ(a.source[0], LabelSource::kGroundTruth);
  EXPECT_EQ(a.labels.at(0, 1), 1);
  EXPECT_EQ(a.source[1], LabelSource::kTeacher);

  LabelMap bg(1, 1);
  const PseudoLabel b = generate_pseudo_label(bg, Tensor::from({2, 1, 1}, {0.6f, 0.3f}), 0.7f, ClassRange{3, 3});
  EXPECT_EQ(b.labels.at(0, 0), 0);
  EXPECT_EQ(b.source[0], LabelSource::kBackground);
}

// Every branch of the case split on one scene, for three thresholds.
TEST(PseudoLabel, CaseTableForThresholds) {
  for (float tau : {0.3f, 0.7f, 0.99f}) {
    SCOPED_TRACE(tau);
    const Scene at = case_table_scene(tau);
    const PseudoLabel pl = generate_pseudo_label(at.gt, at.probs, tau, kCurrent);
    for (int x = 0; x < 4; ++x) {
      EXPECT_EQ(pl.labels.at(0, x), 3);
      EXPECT_EQ(pl.source[static_cast<std::size_t>(x)], LabelSource::kGroundTruth);
      // max == tau takes the teacher branch
      EXPECT_EQ(pl.labels.at(1, x), 1);
      EXPECT_EQ(pl.source[4u + x], LabelSource::kTeacher);
      const bool row2_passes = 0.25f >= tau;
      EXPECT_EQ(pl.labels.at(2, x), row2_passes ? 2 : 0);
      EXPECT_EQ(pl.source[8u + x], row2_passes ? LabelSource::kTeacher : LabelSource::kBackground);
      EXPECT_EQ(pl.labels.at(3, x), 2);
      EXPECT_EQ(pl.source[12u + x], LabelSource::kTeacher);
    }
    const Scene below = case_table_scene(std::nextafter(tau, 0.0f));
    const PseudoLabel pb = generate_pseudo_label(below.gt, below.probs, tau, kCurrent);
    for (int x = 0; x < 4; ++x) {
      const bool second_passes = 0.05f >= tau;
      EXPECT_EQ(pb.labels.at(1, x), second_passes ? 2 : 0);
    }
    EXPECT_EQ(pl.count(LabelSource::kGroundTruth) + pl.count(LabelSource::kTeacher) + pl.count(LabelSource::kBackground),
              16u);
  }
}

TEST(PseudoLabel, TiesGoToLowestClass) {
  LabelMap gt(1, 1);
  const PseudoLabel pl = generate_pseudo_label(gt, Tensor::from({3, 1, 1}, {0.8f, 0.9f, 0.9f}), 0.7f, ClassRange{4, 4});
  EXPECT_EQ(pl.labels.at(0, 0), 2);
}

TEST(PseudoLabel, ThresholdMonotonicityAndGroundTruth) {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> label(0, 2);
  for (int scene = 0; scene < 100; ++scene) {
    LabelMap gt(8, 8);
    for (int& id : gt.ids) id = label(rng) == 0 ? 3 + label(rng) % 2 : 0;
    const Tensor probs = oracle::random_tensor(rng, {2, 8, 8}, 1e-4, 1.0 - 1e-4);
    std::size_t previous = gt.size() + 1;
    for (float tau = 0.05f; tau <= 1.0f; tau += 0.05f) {
      const PseudoLabel pl = generate_pseudo_label(gt, probs, std::min(tau, 1.0f), ClassRange{3, 4});
      const std::size_t teacher = pl.count(LabelSource::kTeacher);
      ASSERT_LE(teacher, previous);
      previous = teacher;
      for (std::size_t k = 0; k < gt.size(); ++k) {
        if (gt.ids[k] != 0) {
          ASSERT_EQ(pl.labels.ids[k], gt.ids[k]);
          ASSERT_EQ(pl.source[k], LabelSource::kGroundTruth);
        }
        if (pl.source[k] == LabelSource::kTeacher) {
          const float m = std::max(probs.at(k), probs.at(64 + k));
          ASSERT_GE(m, std::min(tau, 1.0f));
        }
        ASSERT_GE(pl.labels.ids[k], 0);
        ASSERT_LE(pl.labels.ids[k], 4);
      }
    }
    EXPECT_EQ(generate_pseudo_label(gt, probs, 1.0f, ClassRange{3, 4}).count(LabelSource::kTeacher), 0u);
  }
}

TEST(PseudoLabel, Errors) {
  LabelMap gt(2, 2);
  gt.at(1, 1) = 7;
  EXPECT_THROW(generate_pseudo_label(gt, Tensor::zeros({2, 2, 2}), 0.7f, kCurrent), ContractError);
  gt.at(1, 1) = 0;
  EXPECT_THROW(generate_pseudo_label(gt, Tensor::zeros({3, 2, 2}), 0.7f, kCurrent), ShapeError);
  EXPECT_THROW(generate_pseudo_label(gt, Tensor::zeros({2, 2, 2}), 0.0f, kCurrent), ConfigError);
  EXPECT_THROW(generate_pseudo_label(gt, Tensor::zeros({2, 2, 2}), 1.5f, kCurrent), ConfigError);
}

TEST(BinaryClassMap, ExamplesAndPartition) {
  const PseudoLabel all_bg = ground_truth_label(LabelMap(3, 3), ClassRange{1, 4});
  const Tensor bg = binary_class_map(all_bg, 0), novel = binary_class_map(all_bg, 3);
  for (float v : bg.values()) EXPECT_EQ(v, 1.0f);
  for (float v : novel.values()) EXPECT_EQ(v, 0.0f);

  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> label(0, 4);
  LabelMap gt(6, 7);
  for (int& id : gt.ids) id = label(rng);
  const PseudoLabel pl = ground_truth_label(gt, ClassRange{1, 4});
  std::vector<float> total(gt.size(), 0.0f);
  for (int c = 0; c <= 4; ++c) {
    const Tensor m = binary_class_map(pl, c);
    ASSERT_EQ(m.shape(), (Shape{1, 6, 7}));
    for (std::size_t k = 0; k < total.size(); ++k) total[k] += m.at(k);
  }
  for (float t : total) EXPECT_EQ(t, 1.0f);
  EXPECT_THROW(binary_class_map(pl, 5), ConfigError);
  EXPECT_THROW(binary_class_map(pl, -1), ConfigError);
}
