// Python bindings: array-level access to the background algebra, pseudo
// labels and metrics, plus config-driven training and gradient checks.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "bgadapt/ablation.hpp"
#include "bgadapt/background_adaptation.hpp"
#include "bgadapt/errors.hpp"
#include "bgadapt/gradcheck.hpp"
#include "bgadapt/losses.hpp"
#include "bgadapt/metrics.hpp"
#include "bgadapt/pseudo_label.hpp"
#include "bgadapt/runtime.hpp"
#include "bgadapt/synthdata.hpp"
#include "bgadapt/trainer.hpp"

namespace py = pybind11;
using namespace bgadapt;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

// 2-D maps are promoted to 1×H×W.
Tensor to_map(const FloatArray& a) {
  if (a.ndim() == 2) return Tensor::from({1, static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1))},
                                         std::vector<float>(a.data(), a.data() + a.size()));
  return to_tensor(a);
}

FloatArray to_numpy(const Tensor& t, bool squeeze_channel = false) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  if (squeeze_channel && shape.size() == 3 && shape[0] == 1) shape.erase(shape.begin());
  FloatArray out(shape);
  const auto v = t.values();
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

LabelMap to_labels(const IntArray& a) {
  if (a.ndim() != 2) throw ShapeError("label maps must be 2-D");
  LabelMap m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.ids.begin());
  return m;
}

IntArray to_numpy(const LabelMap& m) {
  IntArray out({m.height, m.width});
  std::copy(m.ids.begin(), m.ids.end(), out.mutable_data());
  return out;
}

py::object opt(const std::optional<double>& v) { return v ? py::object(py::float_(*v)) : py::object(py::none()); }

py::dict miou_dict(const GroupedMiou& m) {
  py::list per;
  for (const auto& v : m.per_class) per.append(opt(v));
  py::dict d;
  d["miou_initial"] = opt(m.initial);
  d["miou_incremental"] = opt(m.incremental);
  d["miou_all"] = opt(m.all);
  d["per_class_iou"] = per;
  return d;
}

py::dict report_dict(const StepReport& r) {
  py::dict d = miou_dict(r.miou);
  d["step"] = r.step;
  d["checkpoint"] = r.checkpoint.string();
  d["wall_seconds"] = r.wall_seconds;
  d["isolation_grad_norm"] = opt(r.isolation_grad_norm);
  d["old_class_drift"] = opt(r.old_class_drift);
  return d;
}

TrainConfig config_from(const std::string& text, const py::dict& overrides) {
  TrainConfig c = TrainConfig::from_text(text);
  for (const auto& [k, v] : overrides) c.set(py::str(k), py::str(v));
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_bgadapt, m) {
  m.doc() = "Background adaptation for class-incremental segmentation (toy scale)";
  tune_allocator();

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<TrainingError>(m, "TrainingError", base.ptr());

  m.def(
      "filter_residual", [](const FloatArray& a) { return to_numpy(filter_residual(to_map(a)), a.ndim() == 2); },
      py::arg("adapt"), "Elementwise min(a, 0).");
  m.def(
      "aggregate_inference",
      [](const FloatArray& b1, const std::vector<FloatArray>& adapts) {
        std::vector<Tensor> ts;
        for (const auto& a : adapts) ts.push_back(to_map(a));
        return to_numpy(aggregate_inference(to_map(b1), ts), b1.ndim() == 2);
      },
      py::arg("b1"), py::arg("adapts"), "b1 plus the filtered residuals of later steps.");
  m.def(
      "aggregate_training",
      [](const FloatArray& b1, const std::vector<FloatArray>& old, const FloatArray& current) {
        std::vector<Tensor> ts;
        for (const auto& a : old) ts.push_back(to_map(a));
        return to_numpy(aggregate_training(to_map(b1), ts, to_map(current)), b1.ndim() == 2);
      },
      py::arg("b1"), py::arg("old_adapts"), py::arg("current"),
      "Training aggregate: old residuals filtered, the current one raw.");
  m.def("bga_minus_term", &bga_minus_term_simplified, py::arg("phi"), "Per-pixel hinge max(0, 1 - 2 phi).");

  m.def(
      "pseudo_label",
      [](const IntArray& step_label, const FloatArray& teacher_probs, float tau, int first, int last) {
        const PseudoLabel pl = generate_pseudo_label(to_labels(step_label), to_tensor(teacher_probs), tau,
                                                     ClassRange{first, last});
        IntArray src({pl.labels.height, pl.labels.width});
        std::transform(pl.source.begin(), pl.source.end(), src.mutable_data(),
                       [](LabelSource s) { return static_cast<int>(s); });
        return py::make_tuple(to_numpy(pl.labels), src);
      },
      py::arg("step_label"), py::arg("teacher_probs"), py::arg("tau"), py::arg("first"), py::arg("last"),
      "Returns (labels, source) where source is 0 ground truth, 1 teacher, 2 background.");

  m.def(
      "grouped_miou",
      [](const std::vector<IntArray>& preds, const std::vector<IntArray>& truths, const std::string& protocol,
         int step) {
        if (preds.size() != truths.size()) throw ShapeError("predictions and truths differ in count");
        const TaskProtocol p = TaskProtocol::parse(protocol);
        ConfusionCounts c(p.classes_up_to(step) + 1);
        for (std::size_t i = 0; i < preds.size(); ++i) c.accumulate(to_labels(preds[i]), to_labels(truths[i]));
        return miou_dict(grouped_miou(c, p, step));
      },
      py::arg("predictions"), py::arg("truths"), py::arg("protocol"), py::arg("step"));

  m.def(
      "protocol_steps",
      [](const std::string& name) {
        const TaskProtocol p = TaskProtocol::parse(name);
        py::list steps;
        for (int t = 1; t <= p.num_steps(); ++t) {
          const ClassRange r = p.classes_of_step(t);
          steps.append(py::make_tuple(r.first, r.last));
        }
        return steps;
      },
      py::arg("name"), "Class id range (first, last) of every step.");

  m.def(
      "build_split",
      [](const std::string& protocol, int step, int count, std::uint64_t seed, int canvas) {
        const Dataset d = step == 0 ? build_validation(TaskProtocol::parse(protocol), count, seed, canvas)
                                    : build_split(TaskProtocol::parse(protocol), step, count, seed, canvas);
        py::list out;
        for (const auto& s : d.samples) out.append(py::make_tuple(to_numpy(s.image), to_numpy(s.label)));
        return out;
      },
      py::arg("protocol"), py::arg("step"), py::arg("count"), py::arg("seed"), py::arg("canvas") = 32,
      "(image, label) pairs; step 0 is the fully labeled validation split.");

  m.def(
      "default_config", [] { return TrainConfig{}.to_text(); }, "Default configuration as key = value text.");
  m.def(
      "config_hash", [](const std::string& text) { return config_from(text, {}).hash(); }, py::arg("config"));

  m.def(
      "train",
      [](const std::string& config, const std::filesystem::path& out_dir, const py::dict& overrides) {
        const TrainConfig c = config_from(config, overrides);
        std::vector<StepReport> reports;
        {
          py::gil_scoped_release release;
          reports = run_protocol(c, out_dir);
        }
        py::list out;
        for (const auto& r : reports) out.append(report_dict(r));
        return out;
      },
      py::arg("config"), py::arg("out_dir"), py::arg("overrides") = py::dict(),
      "Runs every protocol step, writing checkpoints and metrics.jsonl to out_dir.");

  m.def(
      "ablate",
      [](const std::string& config, const std::vector<std::string>& variants, const py::dict& overrides) {
        const TrainConfig c = config_from(config, overrides);
        AblationReport r;
        {
          py::gil_scoped_release release;
          r = run_ablation(c, variants);
        }
        py::dict out;
        for (const auto& v : r.variants) {
          py::dict d = miou_dict(v.final_miou);
          d["isolation_grad_norm"] = v.isolation_grad_norm;
          d["old_class_drift"] = v.old_class_drift;
          out[py::str(v.id)] = d;
        }
        return out;
      },
      py::arg("config"), py::arg("variants"), py::arg("overrides") = py::dict());

  m.def(
      "grad_check",
      [](const std::vector<std::string>& cases, const std::string& inject, std::uint64_t seed, int instances) {
        GradCheckOptions o;
        o.cases = cases;
        o.inject = inject;
        o.seed = seed;
        o.instances = instances;
        const GradCheckReport r = run_grad_check(o);
        py::list out;
        for (const auto& c : r.cases) {
          py::dict d;
          d["name"] = c.name;
          d["instances"] = c.instances;
          d["worst_rel"] = c.worst_rel;
          d["worst_abs"] = c.worst_abs;
          d["passed"] = c.passed;
          d["failure"] = c.failure;
          out.append(d);
        }
        return out;
      },
      py::arg("cases") = std::vector<std::string>{}, py::arg("inject") = "", py::arg("seed") = 0,
      py::arg("instances") = 20);
  m.attr("grad_check_cases") = gradcheck_case_names();
}
