#pragma once

// Finite-difference verification of reverse-mode gradients.
//
// Each case draws small random instances, differentiates a float32 scalar
// objective with backward(), and compares against central differences of
// an independent double-precision reimplementation of the same objective.
// Instances whose inputs sit within 10h of a kink (relu, hinge, pooling
// ties) are redrawn.

#include <cstdint>
#include <string>
#include <vector>

namespace bgadapt {

struct GradCheckOptions {
  std::uint64_t seed = 0;
  int instances = 20;
  std::vector<std::string> cases;  // empty: all cases
  std::string inject;              // fault injection for negative controls
  double step = 1e-3;
  double rel_tol = 1e-3;
  double abs_tol = 1e-5;
};

struct GradCheckCaseResult {
  std::string name;
  int instances = 0;
  double worst_rel = 0.0;      // over entries with magnitude >= 1e-3
  double worst_abs = 0.0;
  double worst_forward = 0.0;  // |float forward - double forward|
  bool passed = true;
  std::string failure;         // JSON replay record of the first failing entry
};

struct GradCheckReport {
  std::vector<GradCheckCaseResult> cases;
  bool passed() const;
};

const std::vector<std::string>& gradcheck_case_names();
// Recognized values for GradCheckOptions::inject besides "".
const std::vector<std::string>& gradcheck_fault_names();

// Throws ConfigError for unknown case or fault names.
GradCheckReport run_grad_check(const GradCheckOptions& options);

}  // namespace bgadapt
