#include <gtest/gtest.h>

#include <fstream>

#include "bgadapt/archive.hpp"
#include "bgadapt/config.hpp"
#include "bgadapt/errors.hpp"
#include "oracles.hpp"

using namespace bgadapt;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.image_size = 16;
  c.encoder_width = 4;
  c.feature_width = 4;
  c.head_hidden = 6;
  return c;
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
}

}  // namespace

TEST(ConfigText, RoundTripPreservesEveryField) {
  TrainConfig c;
  c.protocol = TaskProtocol::parse("2-2");
  c.tau = 0.55;
  c.weights.bfd = 2.5;
  c.lr_incremental = 3e-4;
  c.epochs_initial = 7;
  c.model.head_hidden = 20;
  c.method.bga = BgaScheme::kMseZero;
  c.method.background = BackgroundScheme::kUnfiltered;
  c.method.feature_distill = FeatureDistill::kKd;
  c.freeze_policy = FreezePolicy::kBackboneAndOldHeads;
  c.seed = 1234567890123ULL;
  const TrainConfig back = TrainConfig::from_text(c.to_text());
  EXPECT_EQ(back.to_text(), c.to_text());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(back.method, c.method);
  EXPECT_EQ(back.weights, c.weights);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.protocol, c.protocol);
}

TEST(ConfigText, HashTracksContent) {
  TrainConfig a, b;
  EXPECT_EQ(a.hash(), b.hash());
  b.tau = 0.71;
  EXPECT_NE(a.hash(), b.hash());
  b = a;
  b.set("lambda2", "5");
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(ConfigText, ParsingRulesAndErrors) {
  const TrainConfig c = TrainConfig::from_text("# comment\n\n  tau = 0.6  # trailing\nprotocol=6-1\n");
  EXPECT_EQ(c.tau, 0.6);
  EXPECT_EQ(c.protocol, TaskProtocol::parse("6-1"));
  EXPECT_THROW(TrainConfig::from_text("tau 0.6\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("colour = red\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("tau = abc\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("tau = 1.0\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("lambda3 = -1\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("epochs_initial = 2.5\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("gkd = maybe\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("freeze_policy = sometimes\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("probe_count = 100\nval_count = 10\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("lr_initial = 0\n"), ConfigError);
  oracle::TempDir dir("cfg");
  std::ofstream(dir / "c.cfg") << "seed = 9\n";
  EXPECT_EQ(TrainConfig::from_file(dir / "c.cfg").seed, 9u);
  EXPECT_THROW(TrainConfig::from_file(dir / "absent.cfg"), IoError);
}

TEST(Archive, RoundTripIsExact) {
  SegmentationModel m(small(), 3, 17);
  m.add_step_head(2, 18);
  for (auto& p : m.head_parameters(2))
    for (float& v : p.tensor.mutable_values()) v = 0.125f;
  oracle::TempDir dir("arch");
  save_checkpoint(m, 0xABCDEFULL, 2, dir / "m.bgam");
  const Checkpoint ck = load_checkpoint(dir / "m.bgam");
  EXPECT_EQ(ck.config_hash, 0xABCDEFULL);
  EXPECT_EQ(ck.step_index, 2);
  EXPECT_EQ(ck.model.config(), m.config());
  const auto a = m.parameters(), b = ck.model.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_TRUE(oracle::bit_equal(a[i].tensor, b[i].tensor)) << a[i].name;
    EXPECT_TRUE(b[i].tensor.requires_grad());
  }
  save_checkpoint(ck.model, ck.config_hash, ck.step_index, dir / "again.bgam");
  EXPECT_EQ(oracle::read_file(dir / "m.bgam"), oracle::read_file(dir / "again.bgam"));
  EXPECT_EQ(oracle::read_file(dir / "m.bgam").substr(0, 8), "BGAMODEL");
}

TEST(Archive, HashMismatchIsConfigError) {
  const SegmentationModel m(small(), 2, 1);
  oracle::TempDir dir("hash");
  save_checkpoint(m, 42, 1, dir / "m.bgam");
  EXPECT_NO_THROW(load_checkpoint(dir / "m.bgam", 42));
  EXPECT_THROW(load_checkpoint(dir / "m.bgam", 43), ConfigError);
}

TEST(Archive, CorruptionIsIoError) {
  const SegmentationModel m(small(), 2, 1);
  oracle::TempDir dir("corrupt");
  save_checkpoint(m, 1, 1, dir / "m.bgam");
  const std::string bytes = oracle::read_file(dir / "m.bgam");

  write_bytes(dir / "trunc.bgam", bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_checkpoint(dir / "trunc.bgam"), IoError);
  write_bytes(dir / "magic.bgam", "NOTMODEL" + bytes.substr(8));
  EXPECT_THROW(load_checkpoint(dir / "magic.bgam"), IoError);
  write_bytes(dir / "tail.bgam", bytes + "x");
  EXPECT_THROW(load_checkpoint(dir / "tail.bgam"), IoError);
  write_bytes(dir / "empty.bgam", "");
  EXPECT_THROW(load_checkpoint(dir / "empty.bgam"), IoError);
  EXPECT_THROW(load_checkpoint(dir / "missing.bgam"), IoError);
  // Flip the class count of step 1 so the layout no longer matches.
  std::string wrong = bytes;
  wrong[8 + 4 + 16 + 4] = 9;
  write_bytes(dir / "layout.bgam", wrong);
  EXPECT_THROW(load_checkpoint(dir / "layout.bgam"), IoError);
}

TEST(Archive, UnwritablePathIsIoError) {
  const SegmentationModel m(small(), 2, 1);
  EXPECT_THROW(save_checkpoint(m, 1, 1, "/nonexistent-dir/for/sure/m.bgam"), IoError);
}
