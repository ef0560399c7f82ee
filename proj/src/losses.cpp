#include "bgadapt/losses.hpp"

#include <algorithm>
#include <cmath>

#include "bgadapt/errors.hpp"

namespace bgadapt {

namespace {

Tensor one_minus(const Tensor& t) { return add_scalar(neg(t), 1.0f); }

// target*log(p) + (1-target)*log(1-p), elementwise.
Tensor bce_terms(const Tensor& p, const Tensor& target) {
  return add(mul(target, log(p, LogGuard::kEpsilon)), mul(one_minus(target), log(one_minus(p), LogGuard::kEpsilon)));
}

float pixels_of(const Tensor& t) { return static_cast<float>(t.dim(1)) * static_cast<float>(t.dim(2)); }

// Repeats a 1×h×w mask across `channels`.
Tensor expand_mask(const Tensor& mask, int channels) {
  std::vector<float> v;
  v.reserve(mask.numel() * static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c) v.insert(v.end(), mask.values().begin(), mask.values().end());
  return Tensor::from({channels, mask.dim(1), mask.dim(2)}, std::move(v));
}

void check_pairs(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher, const char* op) {
  if (student.size() != teacher.size()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(student.size()) + " student groups vs " +
                     std::to_string(teacher.size()) + " teacher groups");
  }
  for (std::size_t i = 0; i < student.size(); ++i) {
    if (student[i].shape() != teacher[i].shape()) {
      throw ShapeError(std::string(op) + ": group " + std::to_string(i + 1) + " student " +
                       shape_to_string(student[i].shape()) + " vs teacher " + shape_to_string(teacher[i].shape()));
    }
  }
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {bga_plus, bga_minus, gkd, bfd}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
  }
}

RegionMasks RegionMasks::from_step_label(const LabelMap& step_label, ClassRange current) {
  std::vector<float> novel(step_label.size()), rest(step_label.size());
  RegionMasks m;
  for (std::size_t k = 0; k < step_label.size(); ++k) {
    const bool in = current.contains(step_label.ids[k]);
    novel[k] = in ? 1.0f : 0.0f;
    rest[k] = in ? 0.0f : 1.0f;
    m.novel_pixels += in;
  }
  m.novel = Tensor::from({1, step_label.height, step_label.width}, std::move(novel));
  m.complement = Tensor::from({1, step_label.height, step_label.width}, std::move(rest));
  return m;
}

Tensor pb_bce(const Tensor& phi_background, const Tensor& phi_novel, const PseudoLabel& pseudo, ClassRange current) {
  if (phi_novel.rank() != 3 || phi_novel.dim(0) != current.count()) {
    throw ShapeError("pb_bce: expected " + std::to_string(current.count()) + " novel channels, got " +
                     shape_to_string(phi_novel.shape()));
  }
  if (phi_background.shape() != Shape{1, phi_novel.dim(1), phi_novel.dim(2)} ||
      phi_novel.dim(1) != pseudo.labels.height || phi_novel.dim(2) != pseudo.labels.width) {
    throw ShapeError("pb_bce: background " + shape_to_string(phi_background.shape()) + " / novel " +
                     shape_to_string(phi_novel.shape()) + " do not match the pseudo label");
  }
  std::vector<Tensor> targets{binary_class_map(pseudo, kBackgroundId)};
  for (int c = current.first; c <= current.last; ++c) targets.push_back(binary_class_map(pseudo, c));
  const Tensor phi = concat_channels({phi_background, phi_novel});
  const Tensor terms = bce_terms(phi, concat_channels(targets));
  return mul_scalar(sum(terms), -1.0f / pixels_of(phi));
}

Tensor bga_plus(const Tensor& mu_bt, const RegionMasks& masks, bool* empty_region) {
  const Tensor per_pixel = neg(log(sigmoid(neg(mu_bt)), LogGuard::kEpsilon));
  return masked_mean(per_pixel, masks.novel, empty_region);
}

double bga_minus_term_literal(double phi) {
  const double pos = (1.0 - phi) * (1.0 - phi);
  const double neg = (phi - 0.0) * (phi - 0.0);
  return std::max(0.0, pos - neg);
}

double bga_minus_term_simplified(double phi) { return std::max(0.0, 1.0 - 2.0 * phi); }

Tensor bga_minus(const Tensor& phi_bt, const RegionMasks& masks, bool* empty_region) {
  const Tensor per_pixel = hinge(sub(square(one_minus(phi_bt)), square(phi_bt)));
  return masked_mean(per_pixel, masks.complement, empty_region);
}

Tensor gkd(const std::vector<Tensor>& student_phis, const std::vector<Tensor>& teacher_phis) {
  check_pairs(student_phis, teacher_phis, "gkd");
  if (student_phis.empty()) throw ContractError("gkd: no old groups");
  Tensor total;
  for (std::size_t i = 0; i < student_phis.size(); ++i) {
    if (teacher_phis[i].requires_grad()) throw ContractError("gkd: teacher probabilities must be detached");
    const Tensor s = sum(bce_terms(student_phis[i], teacher_phis[i]));
    total = total.defined() ? add(total, s) : s;
  }
  return mul_scalar(total, -1.0f / pixels_of(student_phis[0]));
}

Tensor bfd(const std::vector<Tensor>& student_feats, const std::vector<Tensor>& teacher_feats, const Tensor& psi_b) {
  check_pairs(student_feats, teacher_feats, "bfd");
  if (student_feats.empty()) throw ContractError("bfd: no old groups");
  Tensor total;
  for (std::size_t i = 0; i < student_feats.size(); ++i) {
    if (teacher_feats[i].requires_grad()) throw ContractError("bfd: teacher features must be detached");
    const Tensor& s = student_feats[i];
    if (psi_b.shape() != Shape{1, s.dim(1), s.dim(2)}) {
      throw ShapeError("bfd: mask " + shape_to_string(psi_b.shape()) + " does not match features " +
                       shape_to_string(s.shape()));
    }
    const Tensor mask = expand_mask(psi_b, s.dim(0));
    const Tensor d = sub(mul(mask, s), mul(mask, teacher_feats[i]));
    const Tensor term = mul_scalar(sum(square(d)), 1.0f / static_cast<float>(s.numel()));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor bga_mse_zero(const Tensor& mu_bt, const RegionMasks& masks, bool* empty_region) {
  return masked_mean(square(mu_bt), masks.complement, empty_region);
}

Tensor bga_bce_one(const Tensor& mu_bt, const RegionMasks& masks, bool* empty_region) {
  return masked_mean(neg(log(sigmoid(mu_bt), LogGuard::kEpsilon)), masks.complement, empty_region);
}

Tensor feature_kd(const std::vector<Tensor>& student_feats, const std::vector<Tensor>& teacher_feats) {
  check_pairs(student_feats, teacher_feats, "feature_kd");
  std::vector<Tensor> s, t;
  for (std::size_t i = 0; i < student_feats.size(); ++i) {
    s.push_back(sigmoid(student_feats[i]));
    t.push_back(sigmoid(teacher_feats[i]));
  }
  return gkd(s, t);
}

Tensor total_objective(const LossTerms& terms, const LossWeights& weights) {
  weights.validate();
  Tensor total;
  auto accumulate = [&total](const Tensor& term, double w) {
    if (!term.defined()) return;
    const Tensor scaled = w == 1.0 ? term : mul_scalar(term, static_cast<float>(w));
    total = total.defined() ? add(total, scaled) : scaled;
  };
  accumulate(terms.pbbce, 1.0);
  accumulate(terms.bga_plus, weights.bga_plus);
  accumulate(terms.bga_minus, weights.bga_minus);
  accumulate(terms.gkd, weights.gkd);
  accumulate(terms.bfd, weights.bfd);
  if (!total.defined()) return Tensor::scalar(0.0f);
  return total;
}

}  // namespace bgadapt
