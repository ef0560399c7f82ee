#pragma once

// Training losses for incremental steps and the weighted total objective.
//
// All probability inputs are sigmoid activations. Log terms use the
// epsilon guard so saturated probabilities stay finite.

#include <vector>

#include "bgadapt/protocol.hpp"
#include "bgadapt/pseudo_label.hpp"
#include "bgadapt/tensor.hpp"

namespace bgadapt {

struct LossWeights {
  double bga_plus = 1.0;   // lambda1
  double bga_minus = 5.0;  // lambda2
  double gkd = 1.0;        // lambda3
  double bfd = 4.0;        // lambda4

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// Novel-class region R (pixels whose step label is a current class) and
/// its complement, both 1×h×w.
struct RegionMasks {
  Tensor novel;
  Tensor complement;
  std::size_t novel_pixels = 0;

  static RegionMasks from_step_label(const LabelMap& step_label, ClassRange current);
};

/// Pseudo-background BCE over the adapted background and the current
/// classes only. `phi_background` is 1×h×w, `phi_novel` is |C^t|×h×w.
Tensor pb_bce(const Tensor& phi_background, const Tensor& phi_novel, const PseudoLabel& pseudo, ClassRange current);

/// Pushes the current residual logit negative inside R:
/// -(1/|R|) sum_R log sigmoid(-mu).
Tensor bga_plus(const Tensor& mu_bt, const RegionMasks& masks, bool* empty_region = nullptr);

/// Triplet loss outside R with anchors 0 and 1:
/// (1/(hw-|R|)) sum max(0, (1-phi)^2 - phi^2).
Tensor bga_minus(const Tensor& phi_bt, const RegionMasks& masks, bool* empty_region = nullptr);

/// Per-pixel triplet term in its literal and simplified forms.
double bga_minus_term_literal(double phi);
double bga_minus_term_simplified(double phi);

/// Soft-target binary cross-entropy between student and teacher
/// probabilities for every old head (class channels plus b^i), averaged
/// over pixels and summed over channels.
Tensor gkd(const std::vector<Tensor>& student_phis, const std::vector<Tensor>& teacher_phis);

/// Mean squared difference of old heads' intermediate features with both
/// sides multiplied by the 1×h×w mask `psi_b` (masked-out entries count as
/// zeros), summed over heads.
Tensor bfd(const std::vector<Tensor>& student_feats, const std::vector<Tensor>& teacher_feats, const Tensor& psi_b);

// Alternatives used by the ablation harness.
/// Mean squared residual logit outside R (drives b^t to 0).
Tensor bga_mse_zero(const Tensor& mu_bt, const RegionMasks& masks, bool* empty_region = nullptr);
/// BCE towards 1 on the residual outside R.
Tensor bga_bce_one(const Tensor& mu_bt, const RegionMasks& masks, bool* empty_region = nullptr);
/// Soft-target BCE between sigmoid-activated student and teacher features,
/// unmasked and averaged over pixels.
Tensor feature_kd(const std::vector<Tensor>& student_feats, const std::vector<Tensor>& teacher_feats);

/// Loss components of one iteration; undefined tensors are absent terms.
struct LossTerms {
  Tensor pbbce;
  Tensor bga_plus;
  Tensor bga_minus;
  Tensor gkd;
  Tensor bfd;
};

Tensor total_objective(const LossTerms& terms, const LossWeights& weights);

}  // namespace bgadapt
