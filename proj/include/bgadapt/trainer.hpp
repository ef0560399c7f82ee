#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <vector>

#include "bgadapt/config.hpp"
#include "bgadapt/losses.hpp"
#include "bgadapt/metrics.hpp"
#include "bgadapt/segnet.hpp"
#include "bgadapt/synthdata.hpp"

namespace bgadapt {

struct LossValues {
  std::optional<double> pbbce, bga_plus, bga_minus, gkd, bfd;
  double total = 0.0;
};

struct EpochSummary {
  int epoch = 0;
  LossValues mean;
};

struct StepReport {
  int step = 0;
  std::vector<EpochSummary> epochs;
  GroupedMiou miou;
  double wall_seconds = 0.0;
  std::filesystem::path checkpoint;
  // Sum of |grad| reaching old-head parameters from PB-BCE + BgA terms alone,
  // measured on the first batch before any update.
  std::optional<double> isolation_grad_norm;
  // L∞ distance between student and teacher old-class probabilities on the
  // probe images at step end.
  std::optional<double> old_class_drift;
  std::size_t empty_region_warnings = 0;
};

/// All splits of one protocol run, derived from the config seed.
struct ProtocolData {
  std::vector<Dataset> train;  // index t-1 holds D^t
  Dataset validation;          // full labels

  static ProtocolData build(const TrainConfig& config);
  // Throws ConfigError when the splits do not fit the config's protocol and
  // canvas.
  void check(const TrainConfig& config) const;
  const Dataset& train_split(int step) const { return train.at(static_cast<std::size_t>(step - 1)); }
};

/// Fresh model for step 1, seeded from the config.
SegmentationModel make_initial_model(const TrainConfig& config);

/// Trains head 1 (classes + true background b^1) with BCE on the ground
/// truth. Every iteration appends a JSON line to `metrics` when given.
StepReport run_initial_step(const TrainConfig& config, SegmentationModel& model, const ProtocolData& data,
                            std::ostream* metrics = nullptr);

/// Step t >= 2: snapshots the teacher, appends head t and trains with the
/// configured objective. `model` must hold exactly t-1 heads.
StepReport run_incremental_step(const TrainConfig& config, int step, SegmentationModel& model,
                                const ProtocolData& data, std::ostream* metrics = nullptr);

GroupedMiou evaluate(const TrainConfig& config, const SegmentationModel& model, const Dataset& validation, int step);

/// Loss terms for one incremental-step sample. Exposed for audits and tests.
struct SampleLosses {
  LossTerms terms;
  Tensor total;
  PseudoLabel pseudo;
  std::size_t empty_regions = 0;
};
SampleLosses incremental_sample_losses(const TrainConfig& config, ClassRange current, const SegmentationModel& student,
                                       const SegmentationModel& teacher, const Sample& sample);

/// Applies the freeze policy for training step `step`.
void apply_freeze(const TrainConfig& config, SegmentationModel& model, int step);

/// Runs steps first..T, writing step-<t>.bgam checkpoints and a metrics
/// stream into `out_dir`. With `resume_from`, the model is loaded from that
/// checkpoint (whose config hash must match) and training continues at the
/// following step.
std::vector<StepReport> run_protocol(const TrainConfig& config, const std::filesystem::path& out_dir,
                                     const std::optional<std::filesystem::path>& resume_from = std::nullopt);

std::vector<StepReport> run_protocol(const TrainConfig& config, const ProtocolData& data,
                                     const std::filesystem::path& out_dir,
                                     const std::optional<std::filesystem::path>& resume_from = std::nullopt);

std::string checkpoint_name(int step);

}  // namespace bgadapt
