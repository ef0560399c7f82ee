#pragma once

// Fixed registry of method variants and a runner that trains them on
// identical data from one shared initial step.

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "bgadapt/config.hpp"
#include "bgadapt/trainer.hpp"

namespace bgadapt {

struct AblationVariant {
  std::string id;
  std::string description;
  MethodSettings method;
  FreezePolicy freeze = FreezePolicy::kAuto;
};

const std::vector<AblationVariant>& ablation_registry();
// Throws ConfigError for ids not in the registry.
const AblationVariant& find_variant(const std::string& id);
TrainConfig apply_variant(TrainConfig base, const AblationVariant& variant);

struct VariantResult {
  std::string id;
  std::vector<StepReport> steps;  // incremental steps 2..T
  GroupedMiou final_miou;
  // Largest isolation audit value and probe drift over the incremental steps.
  double isolation_grad_norm = 0.0;
  double old_class_drift = 0.0;
};

struct AblationReport {
  std::uint64_t seed = 0;
  StepReport initial;
  std::vector<VariantResult> variants;

  const VariantResult& at(const std::string& id) const;
  // Fixed-width table of final mIoU values with deltas against the first
  // variant.
  std::string table() const;
};

// Trains step 1 once under `base`, then every listed variant through steps
// 2..T from a copy of that model. Isolation audits are always enabled.
AblationReport run_ablation(const TrainConfig& base, const std::vector<std::string>& variant_ids,
                            std::ostream* log = nullptr);

}  // namespace bgadapt
