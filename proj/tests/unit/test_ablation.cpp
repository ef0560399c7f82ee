#include <gtest/gtest.h>

#include <set>

#include "bgadapt/ablation.hpp"
#include "bgadapt/errors.hpp"

using namespace bgadapt;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.protocol = TaskProtocol::parse("2-2");
  c.model.image_size = 16;
  c.model.encoder_width = 8;
  c.model.feature_width = 8;
  c.model.head_hidden = 8;
  c.train_count = 8;
  c.val_count = 6;
  c.probe_count = 2;
  c.batch_size = 4;
  c.epochs_initial = 2;
  c.epochs_incremental = 1;
  return c;
}

}  // namespace

TEST(Registry, ExactlyTheDocumentedVariants) {
  std::vector<std::string> ids;
  for (const auto& v : ablation_registry()) ids.push_back(v.id);
  const std::vector<std::string> expected{
      "baseline",     "bga",          "bga+bfd",       "bga+bfd+gkd", "bga+bfd+gkd+bga_minus", "bga+bfd+gkd+bga_plus",
      "full",         "mse0",         "mse0+filter",   "bce1+filter", "ours-nofilter",         "fd-none",
      "fd-kd",        "fd-mse",       "full-nodistill"};
  EXPECT_EQ(ids, expected);
  EXPECT_THROW(find_variant("everything"), ConfigError);
}

TEST(Registry, VariantSettings) {
  const TrainConfig base;
  EXPECT_EQ(find_variant("full").method, MethodSettings{});

  const TrainConfig baseline = apply_variant(base, find_variant("baseline"));
  EXPECT_EQ(baseline.method.background, BackgroundScheme::kInitialOnly);
  EXPECT_FALSE(baseline.distillation_active());
  EXPECT_EQ(baseline.effective_freeze(), FreezePolicy::kBackboneAndOldHeads);

  const TrainConfig bga = apply_variant(base, find_variant("bga"));
  EXPECT_EQ(bga.method.background, BackgroundScheme::kFiltered);
  EXPECT_EQ(bga.method.bga, BgaScheme::kNone);
  EXPECT_EQ(bga.effective_freeze(), FreezePolicy::kBackboneAndOldHeads);

  EXPECT_EQ(apply_variant(base, find_variant("mse0")).method.background, BackgroundScheme::kUnfiltered);
  EXPECT_EQ(apply_variant(base, find_variant("mse0+filter")).method.bga, BgaScheme::kMseZero);
  EXPECT_EQ(apply_variant(base, find_variant("bce1+filter")).method.bga, BgaScheme::kBceOne);
  EXPECT_EQ(apply_variant(base, find_variant("fd-mse")).method.feature_distill, FeatureDistill::kMse);
  EXPECT_EQ(apply_variant(base, find_variant("fd-none")).method.feature_distill, FeatureDistill::kNone);
  EXPECT_EQ(apply_variant(base, find_variant("fd-kd")).method.feature_distill, FeatureDistill::kKd);

  const TrainConfig nodistill = apply_variant(base, find_variant("full-nodistill"));
  EXPECT_FALSE(nodistill.distillation_active());
  EXPECT_EQ(nodistill.effective_freeze(), FreezePolicy::kNone);

  const auto minus = find_variant("bga+bfd+gkd+bga_minus").method;
  EXPECT_TRUE(minus.bga_minus);
  EXPECT_FALSE(minus.bga_plus);
}

TEST(Runner, SharedInitialStepAndAudits) {
  const AblationReport r = run_ablation(tiny_config(), {"baseline", "bga", "full"});
  ASSERT_EQ(r.variants.size(), 3u);
  EXPECT_EQ(r.initial.step, 1);
  for (const auto& v : r.variants) {
    EXPECT_EQ(v.steps.size(), 2u) << v.id;
    ASSERT_TRUE(v.final_miou.all.has_value());
  }
  // A residual background keeps old heads untouched by the supervised terms;
  // the shared-classifier baseline retrains b^1 by design.
  EXPECT_EQ(r.at("bga").isolation_grad_norm, 0.0);
  EXPECT_EQ(r.at("full").isolation_grad_norm, 0.0);
  EXPECT_GT(r.at("baseline").isolation_grad_norm, 0.0);
  EXPECT_EQ(r.at("bga").old_class_drift, 0.0);
  EXPECT_THROW(r.at("fd-kd"), ConfigError);
  const std::string table = r.table();
  for (const char* id : {"baseline", "bga", "full"}) EXPECT_NE(table.find(id), std::string::npos);
  EXPECT_THROW(run_ablation(tiny_config(), {"nope"}), ConfigError);
}

TEST(Runner, Deterministic) {
  const AblationReport a = run_ablation(tiny_config(), {"full"});
  const AblationReport b = run_ablation(tiny_config(), {"full"});
  EXPECT_EQ(a.table(), b.table());
  EXPECT_EQ(*a.at("full").final_miou.all, *b.at("full").final_miou.all);
}

// Directional toy reruns on the default configuration, seed 1.
TEST(Directional, FullBeatsBaselineAndFinalBeatsMseZero) {
  TrainConfig c;
  c.seed = 1;
  const AblationReport r = run_ablation(c, {"baseline", "full", "mse0"});
  EXPECT_GT(*r.at("full").final_miou.incremental, *r.at("baseline").final_miou.incremental);
  EXPECT_GE(*r.at("full").final_miou.all, *r.at("mse0").final_miou.all);
}
