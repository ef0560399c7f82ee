#include "bgadapt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "bgadapt/archive.hpp"
#include "bgadapt/background_adaptation.hpp"
#include "bgadapt/errors.hpp"
#include "bgadapt/optim.hpp"
#include "bgadapt/pseudo_label.hpp"

namespace bgadapt {

namespace {

using json = nlohmann::json;

constexpr std::uint64_t kModelStream = 0x30DE1;
constexpr std::uint64_t kHeadStream = 0x4EAD;
constexpr std::uint64_t kShuffleStream = 0x5EED00;

Tensor with_adapt(const StepLogits& s) { return concat_channels({s.class_logits, s.adapt_channel}); }

void check_finite(const Tensor& t, const char* name, int step, long iter) {
  if (t.defined() && !std::isfinite(t.item())) {
    throw TrainingError(std::string("non-finite ") + name + " at step " + std::to_string(step) + ", iteration " +
                        std::to_string(iter));
  }
}

// Running sums of the loss components over a batch or epoch.
struct LossAccumulator {
  double pbbce = 0, bga_plus = 0, bga_minus = 0, gkd = 0, bfd = 0, total = 0;
  int n = 0;

  void add(const LossTerms& t, const Tensor& total_loss) {
    auto v = [](const Tensor& x) { return x.defined() ? static_cast<double>(x.item()) : 0.0; };
    pbbce += v(t.pbbce);
    bga_plus += v(t.bga_plus);
    bga_minus += v(t.bga_minus);
    gkd += v(t.gkd);
    bfd += v(t.bfd);
    total += v(total_loss);
    ++n;
  }
  void merge(const LossAccumulator& o) {
    pbbce += o.pbbce;
    bga_plus += o.bga_plus;
    bga_minus += o.bga_minus;
    gkd += o.gkd;
    bfd += o.bfd;
    total += o.total;
    n += o.n;
  }
  LossValues mean(bool incremental) const {
    const double d = n > 0 ? static_cast<double>(n) : 1.0;
    LossValues out;
    out.pbbce = pbbce / d;
    if (incremental) {
      out.bga_plus = bga_plus / d;
      out.bga_minus = bga_minus / d;
      out.gkd = gkd / d;
      out.bfd = bfd / d;
    }
    out.total = total / d;
    return out;
  }
};

json loss_record(int step, int epoch, long iter, double lr, const LossValues& v) {
  json r;
  r["step"] = step;
  r["epoch"] = epoch;
  r["iter"] = iter;
  r["lr"] = lr;
  r["loss_pbbce"] = *v.pbbce;
  if (v.bga_plus) r["loss_bga_plus"] = *v.bga_plus;
  if (v.bga_minus) r["loss_bga_minus"] = *v.bga_minus;
  if (v.gkd) r["loss_gkd"] = *v.gkd;
  if (v.bfd) r["loss_bfd"] = *v.bfd;
  r["loss_total"] = v.total;
  return r;
}

json miou_record(int step, const GroupedMiou& m) {
  json r;
  r["step"] = step;
  r["event"] = "eval";
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  r["miou_initial"] = opt(m.initial);
  r["miou_incremental"] = opt(m.incremental);
  r["miou_all"] = opt(m.all);
  json per = json::array();
  for (const auto& v : m.per_class) per.push_back(opt(v));
  r["per_class_iou"] = per;
  return r;
}

void emit(std::ostream* metrics, const json& record) {
  if (metrics) *metrics << record.dump() << '\n';
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the order is library-independent.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Tensor old_class_probs(const SegmentationModel& model, const Tensor& image, int old_heads) {
  NoGradGuard no_grad;
  const LogitBundle b = model.forward(image);
  std::vector<Tensor> parts;
  for (int i = 0; i < old_heads; ++i) parts.push_back(b.steps[static_cast<std::size_t>(i)].class_logits);
  return sigmoid(concat_channels(parts));
}

double old_heads_grad_l1(const SegmentationModel& model, int old_heads) {
  double s = 0.0;
  for (int h = 1; h <= old_heads; ++h) {
    for (const auto& p : model.head_parameters(h)) {
      if (!p.tensor.has_grad()) continue;
      for (float g : p.tensor.grad()) s += std::abs(static_cast<double>(g));
    }
  }
  return s;
}

// Generic epoch/batch loop. `sample_loss` returns the per-sample objective
// and records its components.
template <typename SampleFn>
std::vector<EpochSummary> train_loop(const TrainConfig& config, int step, SegmentationModel& model,
                                     const Dataset& train, double base_lr, int epochs, bool incremental,
                                     std::ostream* metrics, SampleFn&& sample_loss) {
  const auto params = model.parameters();
  SgdOptimizer opt(config.momentum, config.weight_decay);
  const std::size_t n = train.samples.size();
  if (n == 0) throw ConfigError("training split for step " + std::to_string(step) + " is empty");
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  const long iters_per_epoch = static_cast<long>((n + batch - 1) / batch);
  const long max_iter = iters_per_epoch * epochs;
  long iter = 0;
  std::vector<EpochSummary> summaries;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    const auto order = shuffled(n, derive_seed(config.seed, kShuffleStream + static_cast<std::uint64_t>(step),
                                               static_cast<std::uint64_t>(epoch)));
    LossAccumulator epoch_acc;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      SgdOptimizer::zero_grad(params);
      LossAccumulator batch_acc;
      for (std::size_t i = start; i < end; ++i) {
        auto [terms, total] = sample_loss(train.samples[order[i]]);
        check_finite(terms.pbbce, "loss_pbbce", step, iter);
        check_finite(terms.bga_plus, "loss_bga_plus", step, iter);
        check_finite(terms.bga_minus, "loss_bga_minus", step, iter);
        check_finite(terms.gkd, "loss_gkd", step, iter);
        check_finite(terms.bfd, "loss_bfd", step, iter);
        check_finite(total, "loss_total", step, iter);
        batch_acc.add(terms, total);
        backward(mul_scalar(total, 1.0f / static_cast<float>(end - start)));
      }
      const double lr = poly_lr(base_lr, iter, max_iter, config.poly_power);
      opt.step(params, lr);
      emit(metrics, loss_record(step, epoch, iter, lr, batch_acc.mean(incremental)));
      epoch_acc.merge(batch_acc);
      ++iter;
    }
    summaries.push_back({epoch, epoch_acc.mean(incremental)});
  }
  return summaries;
}

}  // namespace

std::string checkpoint_name(int step) { return "step-" + std::to_string(step) + ".bgam"; }

ProtocolData ProtocolData::build(const TrainConfig& config) {
  ProtocolData d;
  for (int t = 1; t <= config.protocol.num_steps(); ++t) {
    d.train.push_back(build_split(config.protocol, t, config.train_count, config.seed, config.model.image_size));
  }
  d.validation = build_validation(config.protocol, config.val_count, config.seed, config.model.image_size);
  return d;
}

void ProtocolData::check(const TrainConfig& config) const {
  const int steps = config.protocol.num_steps();
  if (static_cast<int>(train.size()) != steps) {
    throw ConfigError("protocol " + config.protocol.name() + " needs " + std::to_string(steps) + " training splits, got " +
                      std::to_string(train.size()));
  }
  auto check_split = [&](const Dataset& d, const std::string& what) {
    if (d.canvas != config.model.image_size) {
      throw ConfigError(what + " has canvas " + std::to_string(d.canvas) + ", model expects " +
                        std::to_string(config.model.image_size));
    }
  };
  for (int t = 1; t <= steps; ++t) {
    const Dataset& d = train_split(t);
    check_split(d, "split " + std::to_string(t));
    if (d.step != t || d.full_labels) throw ConfigError("split " + std::to_string(t) + " is not a step-" + std::to_string(t) + " training split");
    const ClassRange c = config.protocol.classes_of_step(t);
    for (const auto& s : d.samples) {
      for (int id : s.label.ids) {
        if (id != kBackgroundId && !c.contains(id)) {
          throw ConfigError("split " + std::to_string(t) + " contains class " + std::to_string(id) +
                            ", which protocol " + config.protocol.name() + " does not assign to that step");
        }
      }
    }
  }
  check_split(validation, "validation split");
  if (!validation.full_labels) throw ConfigError("validation split must carry full labels");
  if (static_cast<int>(validation.samples.size()) < config.probe_count) {
    throw ConfigError("validation split has fewer scenes than probe_count");
  }
  for (const auto& s : validation.samples) {
    for (int id : s.label.ids) {
      if (id > config.protocol.total_classes()) {
        throw ConfigError("validation split contains class " + std::to_string(id) + " outside protocol " +
                          config.protocol.name());
      }
    }
  }
}

SegmentationModel make_initial_model(const TrainConfig& config) {
  return SegmentationModel(config.model, config.protocol.classes_of_step(1).count(),
                           derive_seed(config.seed, kModelStream, 0));
}

void apply_freeze(const TrainConfig& config, SegmentationModel& model, int step) {
  model.set_requires_grad(true);
  if (step < 2 || config.effective_freeze() != FreezePolicy::kBackboneAndOldHeads) return;
  for (auto& p : model.backbone_parameters()) p.tensor.set_requires_grad(false);
  for (int h = 1; h < step; ++h) {
    for (auto& p : model.head_parameters(h)) p.tensor.set_requires_grad(false);
  }
  // A single shared background classifier keeps training its own channel.
  if (config.method.background == BackgroundScheme::kInitialOnly) {
    model.head(1).out_background.weight.set_requires_grad(true);
    model.head(1).out_background.bias.set_requires_grad(true);
  }
}

GroupedMiou evaluate(const TrainConfig& config, const SegmentationModel& model, const Dataset& validation, int step) {
  const Dataset restricted = validation.full_labels ? restrict_to_step(validation, config.protocol, step) : validation;
  ConfusionCounts counts(config.protocol.classes_up_to(step) + 1);
  for (const auto& s : restricted.samples) {
    counts.accumulate(predict(model, s.image, config.method.background), s.label);
  }
  return grouped_miou(counts, config.protocol, step);
}

StepReport run_initial_step(const TrainConfig& config, SegmentationModel& model, const ProtocolData& data,
                            std::ostream* metrics) {
  config.validate();
  if (model.num_steps() != 1) throw ContractError("initial step needs a fresh single-head model");
  const ClassRange current = config.protocol.classes_of_step(1);
  if (model.head(1).num_classes != current.count()) {
    throw ConfigError("model head has " + std::to_string(model.head(1).num_classes) + " classes, protocol step 1 has " +
                      std::to_string(current.count()));
  }
  const auto t0 = std::chrono::steady_clock::now();
  apply_freeze(config, model, 1);

  StepReport report;
  report.step = 1;
  report.epochs = train_loop(config, 1, model, data.train_split(1), config.lr_initial, config.epochs_initial, false,
                             metrics, [&](const Sample& s) {
                               const LogitBundle b = model.forward(s.image);
                               const PseudoLabel gt = ground_truth_label(s.label, current);
                               LossTerms terms;
                               terms.pbbce = pb_bce(sigmoid(b.steps[0].adapt_channel), sigmoid(b.steps[0].class_logits), gt, current);
                               Tensor total = total_objective(terms, config.weights);
                               return std::pair{terms, total};
                             });
  report.miou = evaluate(config, model, data.validation, 1);
  emit(metrics, miou_record(1, report.miou));
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

namespace {

// Teacher outputs never change within a step, so they are computed once per
// training sample. With a frozen backbone the student features are constant
// as well.
struct StepCache {
  std::vector<LogitBundle> teacher;
  std::vector<Tensor> teacher_probs;
  std::vector<Tensor> student_features;  // empty unless the backbone is frozen
};

LogitBundle teacher_outputs(const SegmentationModel& teacher, const Tensor& image, Tensor* probs) {
  NoGradGuard no_grad;
  LogitBundle tb = teacher.forward(image);
  *probs = sigmoid(tb.stacked_class_logits());
  return tb;
}

SampleLosses sample_losses(const TrainConfig& config, ClassRange current, const SegmentationModel& student,
                           const LogitBundle& tb, const Tensor& teacher_probs, const Tensor* student_features,
                           const Sample& sample);

}  // namespace

SampleLosses incremental_sample_losses(const TrainConfig& config, ClassRange current, const SegmentationModel& student,
                                       const SegmentationModel& teacher, const Sample& sample) {
  Tensor probs;
  const LogitBundle tb = teacher_outputs(teacher, sample.image, &probs);
  return sample_losses(config, current, student, tb, probs, nullptr, sample);
}

namespace {

SampleLosses sample_losses(const TrainConfig& config, ClassRange current, const SegmentationModel& student,
                           const LogitBundle& tb, const Tensor& teacher_probs, const Tensor* student_features,
                           const Sample& sample) {
  const int old_heads = static_cast<int>(tb.steps.size());
  SampleLosses out;
  out.pseudo = generate_pseudo_label(sample.label, teacher_probs, static_cast<float>(config.tau), current);

  const LogitBundle sb = student_features ? student.forward_heads(*student_features) : student.forward(sample.image);
  const StepLogits& now = sb.steps.back();
  const Tensor mu_b = aggregate_background(sb, AggregationMode::kTraining, config.method.background);
  out.terms.pbbce = pb_bce(sigmoid(mu_b), sigmoid(now.class_logits), out.pseudo, current);

  const RegionMasks masks = RegionMasks::from_step_label(sample.label, current);
  const auto& m = config.method;
  if (m.background != BackgroundScheme::kInitialOnly && m.bga != BgaScheme::kNone) {
    bool empty_plus = false, empty_minus = false;
    const Tensor& mu_bt = now.adapt_channel;
    switch (m.bga) {
      case BgaScheme::kFinal:
        if (m.bga_plus) out.terms.bga_plus = bga_plus(mu_bt, masks, &empty_plus);
        if (m.bga_minus) out.terms.bga_minus = bga_minus(sigmoid(mu_bt), masks, &empty_minus);
        break;
      case BgaScheme::kMseZero:
        out.terms.bga_minus = bga_mse_zero(mu_bt, masks, &empty_minus);
        break;
      case BgaScheme::kBceOne:
        out.terms.bga_plus = bga_plus(mu_bt, masks, &empty_plus);
        out.terms.bga_minus = bga_bce_one(mu_bt, masks, &empty_minus);
        break;
      case BgaScheme::kNone: break;
    }
    out.empty_regions += empty_plus + empty_minus;
  }

  if (m.gkd) {
    std::vector<Tensor> s, t;
    for (int i = 0; i < old_heads; ++i) {
      s.push_back(sigmoid(with_adapt(sb.steps[static_cast<std::size_t>(i)])));
      NoGradGuard no_grad;
      t.push_back(sigmoid(with_adapt(tb.steps[static_cast<std::size_t>(i)])));
    }
    out.terms.gkd = gkd(s, t);
  }

  if (m.feature_distill != FeatureDistill::kNone) {
    std::vector<Tensor> s, t;
    for (int i = 0; i < old_heads; ++i) {
      s.push_back(sb.steps[static_cast<std::size_t>(i)].features);
      t.push_back(tb.steps[static_cast<std::size_t>(i)].features);
    }
    switch (m.feature_distill) {
      case FeatureDistill::kBfd: out.terms.bfd = bfd(s, t, masks.complement); break;
      case FeatureDistill::kMse: out.terms.bfd = bfd(s, t, Tensor::full(masks.complement.shape(), 1.0f)); break;
      case FeatureDistill::kKd: out.terms.bfd = feature_kd(s, t); break;
      case FeatureDistill::kNone: break;
    }
  }
  out.total = total_objective(out.terms, config.weights);
  return out;
}

}  // namespace

StepReport run_incremental_step(const TrainConfig& config, int step, SegmentationModel& model, const ProtocolData& data,
                                std::ostream* metrics) {
  config.validate();
  if (step < 2 || step > config.protocol.num_steps()) throw ConfigError("incremental step out of range");
  if (model.num_steps() != step - 1) {
    throw ContractError("step " + std::to_string(step) + " needs a model with " + std::to_string(step - 1) +
                        " heads, got " + std::to_string(model.num_steps()));
  }
  const ClassRange current = config.protocol.classes_of_step(step);
  const auto t0 = std::chrono::steady_clock::now();

  const SegmentationModel teacher = model.snapshot();
  model.add_step_head(current.count(), derive_seed(config.seed, kHeadStream, static_cast<std::uint64_t>(step)));

  StepReport report;
  report.step = step;
  const Dataset& train = data.train_split(step);

  if (config.audit_isolation) {
    model.set_requires_grad(true);
    const auto params = model.parameters();
    SgdOptimizer::zero_grad(params);
    const std::size_t n = std::min(train.samples.size(), static_cast<std::size_t>(config.batch_size));
    for (std::size_t i = 0; i < n; ++i) {
      SampleLosses l = incremental_sample_losses(config, current, model, teacher, train.samples[i]);
      LossTerms isolated;
      isolated.pbbce = l.terms.pbbce;
      isolated.bga_plus = l.terms.bga_plus;
      isolated.bga_minus = l.terms.bga_minus;
      backward(total_objective(isolated, config.weights));
    }
    report.isolation_grad_norm = old_heads_grad_l1(model, step - 1);
    SgdOptimizer::zero_grad(params);
  }

  apply_freeze(config, model, step);
  StepCache cache;
  cache.teacher.reserve(train.samples.size());
  cache.teacher_probs.resize(train.samples.size());
  for (std::size_t i = 0; i < train.samples.size(); ++i) {
    cache.teacher.push_back(teacher_outputs(teacher, train.samples[i].image, &cache.teacher_probs[i]));
  }
  if (config.effective_freeze() == FreezePolicy::kBackboneAndOldHeads) {
    NoGradGuard no_grad;
    for (const auto& s : train.samples) cache.student_features.push_back(model.forward_features(s.image));
  }
  std::size_t empty = 0;
  report.epochs = train_loop(config, step, model, train, config.lr_incremental, config.epochs_incremental, true, metrics,
                             [&](const Sample& s) {
                               const auto i = static_cast<std::size_t>(&s - train.samples.data());
                               const Tensor* features = cache.student_features.empty() ? nullptr : &cache.student_features[i];
                               SampleLosses l =
                                   sample_losses(config, current, model, cache.teacher[i], cache.teacher_probs[i], features, s);
                               empty += l.empty_regions;
                               return std::pair{l.terms, l.total};
                             });
  report.empty_region_warnings = empty;
  model.set_requires_grad(true);

  if (config.probe_count > 0) {
    double drift = 0.0;
    for (int i = 0; i < config.probe_count; ++i) {
      const Tensor& img = data.validation.samples.at(static_cast<std::size_t>(i)).image;
      const Tensor a = old_class_probs(model, img, step - 1);
      const Tensor b = old_class_probs(teacher, img, step - 1);
      for (std::size_t k = 0; k < a.numel(); ++k) {
        drift = std::max(drift, std::abs(static_cast<double>(a.at(k)) - b.at(k)));
      }
    }
    report.old_class_drift = drift;
  }

  report.miou = evaluate(config, model, data.validation, step);
  emit(metrics, miou_record(step, report.miou));
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::vector<StepReport> run_protocol(const TrainConfig& config, const std::filesystem::path& out_dir,
                                     const std::optional<std::filesystem::path>& resume_from) {
  config.validate();
  return run_protocol(config, ProtocolData::build(config), out_dir, resume_from);
}

std::vector<StepReport> run_protocol(const TrainConfig& config, const ProtocolData& data,
                                     const std::filesystem::path& out_dir,
                                     const std::optional<std::filesystem::path>& resume_from) {
  config.validate();
  data.check(config);
  std::filesystem::create_directories(out_dir);

  SegmentationModel model;
  int first_step = 1;
  if (resume_from) {
    Checkpoint ck = load_checkpoint(*resume_from, config.hash());
    if (ck.step_index < 1 || ck.step_index != ck.model.num_steps() || ck.step_index >= config.protocol.num_steps()) {
      throw ConfigError("checkpoint step " + std::to_string(ck.step_index) + " cannot be resumed under protocol " +
                        config.protocol.name());
    }
    model = std::move(ck.model);
    first_step = ck.step_index + 1;
  }

  std::ofstream metrics(out_dir / "metrics.jsonl", first_step == 1 ? std::ios::trunc : std::ios::app);
  if (!metrics) throw IoError("cannot write metrics in " + out_dir.string());

  std::vector<StepReport> reports;
  for (int t = first_step; t <= config.protocol.num_steps(); ++t) {
    StepReport r;
    if (t == 1) {
      model = make_initial_model(config);
      r = run_initial_step(config, model, data, &metrics);
    } else {
      r = run_incremental_step(config, t, model, data, &metrics);
    }
    r.checkpoint = out_dir / checkpoint_name(t);
    save_checkpoint(model, config.hash(), t, r.checkpoint);
    reports.push_back(std::move(r));
  }
  metrics.flush();
  if (!metrics) throw IoError("failed writing metrics in " + out_dir.string());
  return reports;
}

}  // namespace bgadapt
