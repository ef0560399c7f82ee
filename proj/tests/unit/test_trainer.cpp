#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

#include "bgadapt/archive.hpp"
#include "bgadapt/errors.hpp"
#include "bgadapt/optim.hpp"
#include "bgadapt/trainer.hpp"
#include "oracles.hpp"

using namespace bgadapt;
using json = nlohmann::json;

namespace {

TrainConfig tiny_config(const std::string& protocol = "2-2") {
  TrainConfig c;
  c.protocol = TaskProtocol::parse(protocol);
  c.model.image_size = 16;
  c.model.encoder_width = 8;
  c.model.feature_width = 8;
  c.model.head_hidden = 8;
  c.train_count = 12;
  c.val_count = 6;
  c.probe_count = 3;
  c.batch_size = 4;
  c.epochs_initial = 2;
  c.epochs_incremental = 1;
  c.seed = 5;
  return c;
}

std::vector<json> records(const std::string& text) {
  std::vector<json> out;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) out.push_back(json::parse(line));
  return out;
}

std::vector<Tensor> head_copies(const SegmentationModel& m, int step) {
  std::vector<Tensor> out;
  for (const auto& p : m.head_parameters(step)) out.push_back(p.tensor.clone());
  return out;
}

}  // namespace

TEST(Sgd, PlainStep) {
  std::vector<float> p{1.0f, -2.0f}, g{0.5f, 0.25f}, v(2, 0.0f);
  sgd_update(p, g, v, 1.0, 0.0, 0.0);
  EXPECT_EQ(p, (std::vector<float>{0.5f, -2.25f}));
}

TEST(Sgd, MomentumRecurrence) {
  std::vector<float> p{0.0f}, g{1.0f}, v{0.0f};
  sgd_update(p, g, v, 0.1, 0.9, 0.0);
  sgd_update(p, g, v, 0.1, 0.9, 0.0);
  EXPECT_FLOAT_EQ(v[0], 1.9f);
  EXPECT_FLOAT_EQ(p[0], -0.1f - 0.19f);
}

TEST(Sgd, DecayOnly) {
  std::vector<float> p{2.0f}, g{0.0f}, v{0.0f};
  sgd_update(p, g, v, 0.5, 0.9, 1e-4);
  EXPECT_FLOAT_EQ(p[0], 2.0f - 0.5f * 1e-4f * 2.0f);
}

TEST(Sgd, OptimizerSkipsFrozenParameters) {
  NamedParameter a{"a", Tensor::from({1}, {1.0f}, true)};
  NamedParameter b{"b", Tensor::from({1}, {1.0f}, false)};
  backward(sum(square(a.tensor)));
  SgdOptimizer opt(0.9, 1e-4);
  opt.step({a, b}, 0.1);
  EXPECT_NE(a.tensor.at(0), 1.0f);
  EXPECT_EQ(b.tensor.at(0), 1.0f);
  SgdOptimizer::zero_grad({a, b});
  for (float g : a.tensor.grad()) EXPECT_EQ(g, 0.0f);
}

TEST(Poly, Examples) {
  EXPECT_EQ(poly_lr(0.01, 0, 100), 0.01);
  EXPECT_EQ(poly_lr(0.01, 100, 100), 0.0);
  EXPECT_DOUBLE_EQ(poly_lr(0.01, 50, 100, 1.0), 0.005);
  EXPECT_NEAR(poly_lr(1.0, 25, 100), std::pow(0.75, 0.9), 1e-15);
  EXPECT_THROW(poly_lr(0.01, 0, 0), ConfigError);
}

TEST(Config, FreezeResolution) {
  TrainConfig c;
  EXPECT_TRUE(c.distillation_active());
  EXPECT_EQ(c.effective_freeze(), FreezePolicy::kNone);
  c.method.gkd = false;
  c.method.feature_distill = FeatureDistill::kNone;
  EXPECT_EQ(c.effective_freeze(), FreezePolicy::kBackboneAndOldHeads);
  c.freeze_policy = FreezePolicy::kNone;
  EXPECT_EQ(c.effective_freeze(), FreezePolicy::kNone);
  EXPECT_EQ(TrainConfig{}.tau, 0.7);
  EXPECT_EQ(TrainConfig{}.momentum, 0.9);
  EXPECT_EQ(TrainConfig{}.weight_decay, 1e-4);
}

TEST(InitialStep, FitsTrainingData) {
  TrainConfig c = tiny_config("4-1");
  c.model = ModelConfig{};
  c.train_count = 64;
  c.epochs_initial = 30;
  c.val_count = 8;
  const ProtocolData data = ProtocolData::build(c);
  SegmentationModel m = make_initial_model(c);
  std::ostringstream metrics;
  const StepReport r = run_initial_step(c, m, data, &metrics);
  const GroupedMiou train_miou = evaluate(c, m, data.train_split(1), 1);
  EXPECT_GT(*train_miou.all, 0.8);
  ASSERT_EQ(static_cast<int>(r.epochs.size()), c.epochs_initial);
  for (const auto& rec : records(metrics.str())) {
    if (rec.contains("event")) {
      EXPECT_EQ(rec["event"], "eval");
      EXPECT_TRUE(rec["miou_incremental"].is_null());
      continue;
    }
    EXPECT_TRUE(rec.contains("loss_pbbce"));
    EXPECT_TRUE(rec.contains("loss_total"));
    EXPECT_FALSE(rec.contains("loss_gkd"));
    EXPECT_FALSE(rec.contains("loss_bfd"));
  }
}

TEST(Protocol, RecordsCheckpointsAndKeys) {
  const TrainConfig c = tiny_config();
  oracle::TempDir dir("proto");
  const auto reports = run_protocol(c, dir.path());
  ASSERT_EQ(reports.size(), 3u);
  for (int t = 1; t <= 3; ++t) EXPECT_TRUE(std::filesystem::exists(dir / checkpoint_name(t)));
  int incremental_records = 0;
  for (const auto& rec : records(oracle::read_file(dir / "metrics.jsonl"))) {
    if (rec.contains("event")) {
      for (const char* k : {"miou_initial", "miou_incremental", "miou_all", "per_class_iou"}) EXPECT_TRUE(rec.contains(k));
      continue;
    }
    if (rec["step"] == 1) continue;
    ++incremental_records;
    for (const char* k : {"loss_pbbce", "loss_bga_plus", "loss_bga_minus", "loss_gkd", "loss_bfd", "loss_total"}) {
      EXPECT_TRUE(rec.contains(k)) << k;
    }
  }
  EXPECT_GT(incremental_records, 0);
  for (const auto& r : reports) {
    for (const auto& v : {r.miou.initial, r.miou.all}) {
      ASSERT_TRUE(v.has_value());
      EXPECT_GE(*v, 0.0);
      EXPECT_LE(*v, 1.0);
    }
  }
  EXPECT_TRUE(reports[1].old_class_drift.has_value());
}

TEST(Checkpoint, RoundTripForwardIsBitIdentical) {
  const TrainConfig c = tiny_config();
  const ProtocolData data = ProtocolData::build(c);
  SegmentationModel m = make_initial_model(c);
  run_initial_step(c, m, data);
  m.add_step_head(2, 3);
  oracle::TempDir dir("ckpt");
  save_checkpoint(m, c.hash(), 2, dir / "m.bgam");
  const Checkpoint back = load_checkpoint(dir / "m.bgam", c.hash());
  EXPECT_EQ(back.step_index, 2);
  EXPECT_EQ(back.model.class_counts(), m.class_counts());
  const Tensor& x = data.validation.samples[0].image;
  const LogitBundle a = m.forward(x), b = back.model.forward(x);
  EXPECT_TRUE(oracle::bit_equal(a.stacked_class_logits(), b.stacked_class_logits()));
  for (std::size_t i = 0; i < a.steps.size(); ++i)
    EXPECT_TRUE(oracle::bit_equal(a.steps[i].adapt_channel, b.steps[i].adapt_channel));
  const auto pa = m.parameters(), pb = back.model.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].name, pb[i].name);
}

TEST(IncrementalStep, FreezingKeepsOldHeadsExact) {
  TrainConfig c = tiny_config();
  c.method.gkd = false;
  c.method.feature_distill = FeatureDistill::kNone;
  c.freeze_policy = FreezePolicy::kBackboneAndOldHeads;
  const ProtocolData data = ProtocolData::build(c);
  SegmentationModel m = make_initial_model(c);
  run_initial_step(c, m, data);
  const auto before = head_copies(m, 1);
  std::vector<Tensor> backbone;
  for (const auto& p : m.backbone_parameters()) backbone.push_back(p.tensor.clone());
  const Tensor probe = data.validation.samples[0].image;
  const Tensor old_logits = m.forward(probe).steps[0].class_logits.clone();

  run_incremental_step(c, 2, m, data);
  const auto after = head_copies(m, 1);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(oracle::bit_equal(before[i], after[i]));
  const auto bb = m.backbone_parameters();
  for (std::size_t i = 0; i < bb.size(); ++i) EXPECT_TRUE(oracle::bit_equal(bb[i].tensor, backbone[i]));
  EXPECT_TRUE(oracle::bit_equal(m.forward(probe).steps[0].class_logits, old_logits));
}

TEST(IncrementalStep, TeacherIsNotModified) {
  const TrainConfig c = tiny_config();
  const ProtocolData data = ProtocolData::build(c);
  SegmentationModel m = make_initial_model(c);
  run_initial_step(c, m, data);
  const SegmentationModel teacher = m.snapshot();
  const Tensor probe = data.validation.samples[1].image;
  const Tensor before = teacher.forward(probe).stacked_class_logits().clone();
  const ClassRange current = c.protocol.classes_of_step(2);
  m.add_step_head(current.count(), 7);
  apply_freeze(c, m, 2);
  const SampleLosses l = incremental_sample_losses(c, current, m, teacher, data.train_split(2).samples[0]);
  backward(l.total);
  for (const auto& p : teacher.parameters()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
  EXPECT_TRUE(oracle::bit_equal(teacher.forward(probe).stacked_class_logits(), before));
  EXPECT_TRUE(l.terms.gkd.defined());
  EXPECT_TRUE(l.terms.bfd.defined());
  EXPECT_GE(l.total.item(), 0.0f);
}

// Only GKD and BFD may reach old heads: with them removed from the sample
// objective, every old-head gradient on a three-head model is exactly zero.
TEST(IncrementalStep, IsolationAuditOnThreeHeads) {
  TrainConfig c = tiny_config();
  c.method.gkd = false;
  c.method.feature_distill = FeatureDistill::kNone;
  c.freeze_policy = FreezePolicy::kNone;
  const ProtocolData data = ProtocolData::build(c);
  SegmentationModel m = make_initial_model(c);
  run_initial_step(c, m, data);
  run_incremental_step(c, 2, m, data);
  const SegmentationModel teacher = m.snapshot();
  const ClassRange current = c.protocol.classes_of_step(3);
  m.add_step_head(current.count(), 8);
  apply_freeze(c, m, 3);
  SgdOptimizer::zero_grad(m.parameters());
  for (const auto& sample : data.train_split(3).samples) {
    const SampleLosses l = incremental_sample_losses(c, current, m, teacher, sample);
    backward(l.total);
  }
  for (int h = 1; h <= 2; ++h) {
    for (const auto& p : m.head_parameters(h)) {
      if (!p.tensor.has_grad()) continue;
      for (float g : p.tensor.grad()) ASSERT_EQ(g, 0.0f) << p.name;
    }
  }
}

TEST(IncrementalStep, AuditReportedDuringTraining) {
  TrainConfig c = tiny_config();
  c.audit_isolation = true;
  oracle::TempDir dir("audit");
  const auto reports = run_protocol(c, dir.path());
  for (std::size_t i = 1; i < reports.size(); ++i) {
    ASSERT_TRUE(reports[i].isolation_grad_norm.has_value());
    EXPECT_EQ(*reports[i].isolation_grad_norm, 0.0);
  }
}

TEST(IncrementalStep, ContractErrors) {
  const TrainConfig c = tiny_config();
  const ProtocolData data = ProtocolData::build(c);
  SegmentationModel m = make_initial_model(c);
  EXPECT_THROW(run_incremental_step(c, 3, m, data), ContractError);
  EXPECT_THROW(run_incremental_step(c, 4, m, data), ConfigError);
  m.add_step_head(2, 1);
  EXPECT_THROW(run_initial_step(c, m, data), ContractError);
}

TEST(Training, NonFiniteLossAborts) {
  const TrainConfig c = tiny_config();
  const ProtocolData data = ProtocolData::build(c);
  SegmentationModel m = make_initial_model(c);
  m.head(1).out_classes.bias.mutable_values()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    run_initial_step(c, m, data);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("loss_"), std::string::npos) << e.what();
  }
}

TEST(Training, DataMustFitProtocol) {
  const TrainConfig c = tiny_config();
  ProtocolData data = ProtocolData::build(c);
  data.train.pop_back();
  EXPECT_THROW(data.check(c), ConfigError);
  ProtocolData other = ProtocolData::build(c);
  other.train[1].samples[0].label.ids[0] = 1;
  EXPECT_THROW(other.check(c), ConfigError);
}

TEST(Training, DeterministicStreamsAndCheckpoints) {
  const TrainConfig c = tiny_config();
  oracle::TempDir a("det-a"), b("det-b");
  run_protocol(c, a.path());
  run_protocol(c, b.path());
  EXPECT_EQ(oracle::read_file(a / "metrics.jsonl"), oracle::read_file(b / "metrics.jsonl"));
  for (int t = 1; t <= 3; ++t) EXPECT_EQ(oracle::read_file(a / checkpoint_name(t)), oracle::read_file(b / checkpoint_name(t)));
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  const TrainConfig c = tiny_config();
  oracle::TempDir full("resume-full"), part("resume-part");
  run_protocol(c, full.path());
  run_protocol(c, part.path());
  std::filesystem::remove(part / checkpoint_name(3));
  const auto resumed = run_protocol(c, part.path(), part / checkpoint_name(2));
  ASSERT_EQ(resumed.size(), 1u);
  EXPECT_EQ(resumed[0].step, 3);
  EXPECT_EQ(oracle::read_file(full / checkpoint_name(3)), oracle::read_file(part / checkpoint_name(3)));

  TrainConfig other = c;
  other.tau = 0.5;
  EXPECT_THROW(run_protocol(other, part.path(), part / checkpoint_name(2)), ConfigError);
  EXPECT_THROW(run_protocol(c, part.path(), part / checkpoint_name(3)), ConfigError);
}
