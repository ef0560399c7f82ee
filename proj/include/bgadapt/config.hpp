#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "bgadapt/background_adaptation.hpp"
#include "bgadapt/losses.hpp"
#include "bgadapt/protocol.hpp"
#include "bgadapt/segnet.hpp"

namespace bgadapt {

enum class FreezePolicy { kAuto, kNone, kBackboneAndOldHeads };

// How the current adaptation channel is supervised besides PB-BCE.
enum class BgaScheme {
  kFinal,     // BgA+ inside R, triplet BgA- outside
  kNone,
  kMseZero,   // MSE towards 0 outside R (weighted by lambda2)
  kBceOne,    // BgA+ inside R, BCE towards 1 outside R (lambda2)
};

enum class FeatureDistill { kBfd, kNone, kMse, kKd };

/// Which parts of the method are active. Ablation variants are patches of
/// these fields.
struct MethodSettings {
  BackgroundScheme background = BackgroundScheme::kFiltered;
  BgaScheme bga = BgaScheme::kFinal;
  bool bga_plus = true;
  bool bga_minus = true;
  bool gkd = true;
  FeatureDistill feature_distill = FeatureDistill::kBfd;

  bool operator==(const MethodSettings&) const = default;
};

struct TrainConfig {
  TaskProtocol protocol = TaskProtocol::parse("4-1");
  ModelConfig model;
  LossWeights weights;
  MethodSettings method;
  double tau = 0.7;
  double lr_initial = 1e-2;
  double lr_incremental = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double poly_power = 0.9;
  int epochs_initial = 30;
  int epochs_incremental = 15;
  int batch_size = 8;
  int train_count = 64;  // scenes per step
  int val_count = 64;
  int probe_count = 8;   // validation scenes used for drift probes
  FreezePolicy freeze_policy = FreezePolicy::kAuto;
  bool audit_isolation = false;
  std::uint64_t seed = 1;

  void validate() const;
  // kAuto resolves to kNone when any distillation term is active.
  FreezePolicy effective_freeze() const;
  bool distillation_active() const;

  // Canonical key=value text (sorted keys); its hash identifies the config.
  std::string to_text() const;
  std::uint64_t hash() const;

  void set(const std::string& key, const std::string& value);
  static TrainConfig from_text(const std::string& text);
  static TrainConfig from_file(const std::filesystem::path& path);
};

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string to_string(FreezePolicy p);
std::string to_string(BackgroundScheme s);
std::string to_string(BgaScheme s);
std::string to_string(FeatureDistill f);

}  // namespace bgadapt
