#include "bgadapt/ablation.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "bgadapt/errors.hpp"

namespace bgadapt {

namespace {

MethodSettings full() { return MethodSettings{}; }

MethodSettings bga_only() {
  MethodSettings m;
  m.bga = BgaScheme::kNone;
  m.gkd = false;
  m.feature_distill = FeatureDistill::kNone;
  return m;
}

std::vector<AblationVariant> make_registry() {
  std::vector<AblationVariant> r;
  auto add = [&](std::string id, std::string desc, MethodSettings m, FreezePolicy f = FreezePolicy::kAuto) {
    r.push_back({std::move(id), std::move(desc), m, f});
  };

  MethodSettings m = bga_only();
  m.background = BackgroundScheme::kInitialOnly;
  add("baseline", "pseudo labels + PB-BCE, shared background classifier, frozen backbone", m);

  add("bga", "background adaptation, no extra losses, frozen backbone", bga_only());

  m = bga_only();
  m.feature_distill = FeatureDistill::kBfd;
  add("bga+bfd", "adaptation + BFD", m);

  m.gkd = true;
  add("bga+bfd+gkd", "adaptation + BFD + GKD", m);

  m.bga = BgaScheme::kFinal;
  m.bga_plus = false;
  add("bga+bfd+gkd+bga_minus", "adaptation + BFD + GKD + BgA-", m);

  m.bga_plus = true;
  m.bga_minus = false;
  add("bga+bfd+gkd+bga_plus", "adaptation + BFD + GKD + BgA+", m);

  add("full", "all components", full());

  m = full();
  m.bga = BgaScheme::kMseZero;
  m.background = BackgroundScheme::kUnfiltered;
  add("mse0", "MSE towards 0 outside R, no filter", m);
  m.background = BackgroundScheme::kFiltered;
  add("mse0+filter", "MSE towards 0 outside R, filtered", m);

  m = full();
  m.bga = BgaScheme::kBceOne;
  add("bce1+filter", "BgA+ inside R, BCE towards 1 outside R, filtered", m);

  m = full();
  m.background = BackgroundScheme::kUnfiltered;
  add("ours-nofilter", "all components, residuals summed without the filter", m);

  m = full();
  m.feature_distill = FeatureDistill::kNone;
  add("fd-none", "all components except feature distillation", m);
  m.feature_distill = FeatureDistill::kKd;
  add("fd-kd", "feature distillation by soft-target BCE on sigmoid features", m);
  m.feature_distill = FeatureDistill::kMse;
  add("fd-mse", "feature distillation by unmasked squared distance", m);

  m = full();
  m.gkd = false;
  m.feature_distill = FeatureDistill::kNone;
  add("full-nodistill", "all components without GKD and feature distillation, nothing frozen", m, FreezePolicy::kNone);
  return r;
}

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "     -";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%6.3f", *v);
  return buf;
}

std::string fmt_delta(const std::optional<double>& a, const std::optional<double>& b) {
  if (!a || !b) return "      -";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+7.3f", *a - *b);
  return buf;
}

}  // namespace

const std::vector<AblationVariant>& ablation_registry() {
  static const std::vector<AblationVariant> registry = make_registry();
  return registry;
}

const AblationVariant& find_variant(const std::string& id) {
  for (const auto& v : ablation_registry()) {
    if (v.id == id) return v;
  }
  throw ConfigError("unknown ablation variant '" + id + "'");
}

TrainConfig apply_variant(TrainConfig base, const AblationVariant& variant) {
  base.method = variant.method;
  base.freeze_policy = variant.freeze;
  return base;
}

const VariantResult& AblationReport::at(const std::string& id) const {
  for (const auto& v : variants) {
    if (v.id == id) return v;
  }
  throw ConfigError("variant '" + id + "' was not part of this ablation run");
}

std::string AblationReport::table() const {
  std::ostringstream os;
  std::size_t w = 8;
  for (const auto& v : variants) w = std::max(w, v.id.size());
  os << "seed " << seed << '\n';
  os << std::string(w, ' ') << "   ini    inc    all    d_ini   d_inc   d_all  isolation  drift\n";
  for (const auto& v : variants) {
    const auto& ref = variants.front().final_miou;
    const auto& m = v.final_miou;
    char tail[64];
    std::snprintf(tail, sizeof tail, "  %9.3g  %5.3f", v.isolation_grad_norm, v.old_class_drift);
    os << v.id << std::string(w - v.id.size(), ' ') << ' ' << fmt_opt(m.initial) << ' ' << fmt_opt(m.incremental)
       << ' ' << fmt_opt(m.all) << ' ' << fmt_delta(m.initial, ref.initial) << ' '
       << fmt_delta(m.incremental, ref.incremental) << ' ' << fmt_delta(m.all, ref.all) << tail << '\n';
  }
  return os.str();
}

AblationReport run_ablation(const TrainConfig& base, const std::vector<std::string>& variant_ids, std::ostream* log) {
  base.validate();
  if (variant_ids.empty()) throw ConfigError("no ablation variants requested");
  std::vector<const AblationVariant*> variants;
  for (const auto& id : variant_ids) variants.push_back(&find_variant(id));

  const ProtocolData data = ProtocolData::build(base);
  AblationReport report;
  report.seed = base.seed;
  SegmentationModel initial = make_initial_model(base);
  report.initial = run_initial_step(base, initial, data);
  if (log) *log << "seed " << base.seed << " initial step done in " << report.initial.wall_seconds << " s\n";

  for (const AblationVariant* v : variants) {
    TrainConfig cfg = apply_variant(base, *v);
    cfg.audit_isolation = true;
    SegmentationModel model = initial.snapshot();
    model.set_requires_grad(true);
    VariantResult result;
    result.id = v->id;
    for (int t = 2; t <= cfg.protocol.num_steps(); ++t) {
      StepReport r = run_incremental_step(cfg, t, model, data);
      result.isolation_grad_norm = std::max(result.isolation_grad_norm, r.isolation_grad_norm.value_or(0.0));
      result.old_class_drift = std::max(result.old_class_drift, r.old_class_drift.value_or(0.0));
      result.steps.push_back(std::move(r));
    }
    result.final_miou = result.steps.empty() ? report.initial.miou : result.steps.back().miou;
    if (log) {
      double secs = 0.0;
      for (const auto& s : result.steps) secs += s.wall_seconds;
      *log << "seed " << base.seed << " variant " << v->id << " done in " << secs << " s\n";
    }
    report.variants.push_back(std::move(result));
  }
  return report;
}

}  // namespace bgadapt
