#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "bgadapt/background_adaptation.hpp"
#include "bgadapt/errors.hpp"
#include "oracles.hpp"

using namespace bgadapt;

namespace {

Tensor grid(int h, int w, std::vector<float> v, bool grad = false) { return Tensor::from({1, h, w}, std::move(v), grad); }

Tensor random_map(std::mt19937_64& rng, int h, int w) {
  Tensor t = oracle::random_tensor(rng, {1, h, w}, -4, 4);
  // Exact zeros and negative zeros exercise the filter boundary.
  auto v = t.mutable_values();
  v[0] = 0.0f;
  if (v.size() > 1) v[1] = -0.0f;
  return t;
}

}  // namespace

TEST(Filter, Example) {
  const Tensor y = filter_residual(grid(2, 2, {-1.5f, 0.2f, 0.0f, -0.3f}));
  EXPECT_EQ(std::vector<float>(y.values().begin(), y.values().end()), (std::vector<float>{-1.5f, 0.0f, 0.0f, -0.3f}));
  const Tensor z = filter_residual(Tensor::zeros({1, 3, 3}));
  for (float v : z.values()) EXPECT_EQ(v, 0.0f);
}

TEST(AggregateInference, Examples) {
  const Tensor b1 = grid(1, 1, {2.0f});
  EXPECT_TRUE(oracle::bit_equal(aggregate_inference(b1, {}), b1));
  EXPECT_EQ(aggregate_inference(b1, {grid(1, 1, {-3.0f}), grid(1, 1, {1.0f})}).item(), -1.0f);
  EXPECT_THROW(aggregate_inference(b1, {grid(1, 2, {0, 0})}), ShapeError);
}

TEST(AggregateTraining, Examples) {
  EXPECT_FLOAT_EQ(aggregate_training(grid(1, 1, {0.5f}), {}, grid(1, 1, {0.7f})).item(), 1.2f);

  Tensor b1 = grid(2, 2, {1, 2, 3, 4});
  Tensor cur = grid(2, 2, {0.5f, -1, 2, 0}, true);
  backward(sum(aggregate_training(b1, {grid(2, 2, {-1, 1, 0, -2})}, cur)));
  for (float g : cur.grad()) EXPECT_EQ(g, 1.0f);
  EXPECT_FALSE(b1.has_grad());
}

TEST(AggregateTraining, TrackedOldInputsViolateContract) {
  const Tensor cur = grid(1, 1, {0.0f}, true);
  EXPECT_THROW(aggregate_training(grid(1, 1, {1.0f}, true), {}, cur), ContractError);
  EXPECT_THROW(aggregate_training(grid(1, 1, {1.0f}), {grid(1, 1, {-1.0f}, true)}, cur), ContractError);
  EXPECT_NO_THROW(aggregate_training(detach(grid(1, 1, {1.0f}, true)), {}, cur));
}

// Algebraic properties of the filter and both aggregation forms on random
// maps, compared bit for bit.
TEST(AggregationProperties, HoldExactlyOnRandomMaps) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> size(1, 8), count(0, 4);
  for (int trial = 0; trial < 1000; ++trial) {
    const int h = size(rng), w = size(rng);
    const Tensor b1 = random_map(rng, h, w);
    std::vector<Tensor> adapts;
    for (int i = count(rng); i > 0; --i) adapts.push_back(random_map(rng, h, w));

    const Tensor f = filter_residual(adapts.empty() ? b1 : adapts[0]);
    ASSERT_TRUE(oracle::bit_equal(filter_residual(f), f));
    for (float v : f.values()) ASSERT_LE(v, 0.0f);

    const Tensor mu = aggregate_inference(b1, adapts);
    for (std::size_t k = 0; k < mu.numel(); ++k) ASSERT_LE(mu.at(k), b1.at(k));

    auto extended = adapts;
    extended.push_back(random_map(rng, h, w));
    const Tensor mu_more = aggregate_inference(b1, extended);
    for (std::size_t k = 0; k < mu.numel(); ++k) ASSERT_LE(mu_more.at(k), mu.at(k));

    if (adapts.size() >= 2) {
      auto reordered = adapts;
      std::shuffle(reordered.begin(), reordered.end(), rng);
      ASSERT_TRUE(oracle::bit_equal(aggregate_inference(b1, reordered), mu));
    }

    Tensor current = filter_residual(random_map(rng, h, w));
    auto with_current = adapts;
    with_current.push_back(current);
    ASSERT_TRUE(oracle::bit_equal(aggregate_training(b1, adapts, current), aggregate_inference(b1, with_current)));
  }
}

TEST(AggregateBackground, TrainingDetachesOldContributions) {
  std::mt19937_64 rng(3);
  LogitBundle bundle;
  for (int i = 0; i < 3; ++i) {
    StepLogits s;
    s.adapt_channel = oracle::random_tensor(rng, {1, 3, 3}, -2, 2, true);
    bundle.steps.push_back(s);
  }
  const Tensor mu = aggregate_background(bundle, AggregationMode::kTraining);
  backward(sum(mu));
  EXPECT_FALSE(bundle.steps[0].adapt_channel.has_grad());
  EXPECT_FALSE(bundle.steps[1].adapt_channel.has_grad());
  for (float g : bundle.steps[2].adapt_channel.grad()) EXPECT_EQ(g, 1.0f);

  const Tensor inf = aggregate_background(bundle, AggregationMode::kInference);
  const Tensor ref = aggregate_inference(bundle.steps[0].adapt_channel,
                                         {bundle.steps[1].adapt_channel, bundle.steps[2].adapt_channel});
  EXPECT_TRUE(oracle::bit_equal(inf, ref));
}

TEST(AggregateBackground, AblationSchemes) {
  LogitBundle bundle;
  for (float v : {1.0f, 2.0f, -3.0f}) {
    StepLogits s;
    s.adapt_channel = grid(1, 1, {v});
    bundle.steps.push_back(s);
  }
  EXPECT_EQ(aggregate_background(bundle, AggregationMode::kInference, BackgroundScheme::kFiltered).item(), -2.0f);
  EXPECT_EQ(aggregate_background(bundle, AggregationMode::kInference, BackgroundScheme::kUnfiltered).item(), 0.0f);
  EXPECT_EQ(aggregate_background(bundle, AggregationMode::kInference, BackgroundScheme::kInitialOnly).item(), 1.0f);
  EXPECT_EQ(aggregate_background(bundle, AggregationMode::kTraining, BackgroundScheme::kUnfiltered).item(), 0.0f);
  EXPECT_THROW(aggregate_background(LogitBundle{}, AggregationMode::kInference), ContractError);
}
