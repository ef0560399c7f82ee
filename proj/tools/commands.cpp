#include "commands.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bgadapt/ablation.hpp"
#include "bgadapt/archive.hpp"
#include "bgadapt/background_adaptation.hpp"
#include "bgadapt/config.hpp"
#include "bgadapt/errors.hpp"
#include "bgadapt/gradcheck.hpp"
#include "bgadapt/synthdata.hpp"
#include "bgadapt/trainer.hpp"

namespace bgadapt::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << content;
  os.flush();
  if (!os) throw IoError("cannot write " + p.string());
}

void prepare_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory " + dir.string());
  const fs::path probe = dir / ".write-probe";
  {
    std::ofstream os(probe);
    if (!os) throw UsageError("output directory " + dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Everything needed to rerun a command: flags, config text and hashes of
// inputs and outputs.
class Manifest {
 public:
  Manifest(std::string command, const std::string& command_line) {
    doc_["command"] = std::move(command);
    doc_["command_line"] = command_line;
    doc_["inputs"] = json::array();
    doc_["outputs"] = json::array();
  }
  void config(const TrainConfig& c) {
    doc_["config"] = c.to_text();
    doc_["config_hash"] = hex(c.hash());
    doc_["seed"] = c.seed;
  }
  void seed(std::uint64_t s) { doc_["seed"] = s; }
  void input(const fs::path& p) { doc_["inputs"].push_back({{"path", p.string()}, {"hash", git_blob_hash(read_file(p))}}); }
  void input_dir(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".bgad") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) input(f);
  }
  void output(const fs::path& p, const fs::path& base) {
    doc_["outputs"].push_back({{"path", fs::relative(p, base).string()}, {"hash", git_blob_hash(read_file(p))}});
  }
  json& extra() { return doc_; }
  void write(const fs::path& dir) {
    // The inputs hash covers the config snapshot and every input file, in
    // the manner of a git tree listing.
    std::string listing = doc_.value("config", std::string());
    for (const auto& in : doc_["inputs"]) listing += in["hash"].get<std::string>() + ' ' + in["path"].get<std::string>() + '\n';
    doc_["inputs_hash"] = git_blob_hash(listing);
    write_text(dir / "manifest.json", doc_.dump(2) + '\n');
  }

 private:
  json doc_;
};

TrainConfig load_config(const ConfigArgs& a) {
  TrainConfig c = a.config ? TrainConfig::from_file(*a.config) : TrainConfig{};
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed) c.seed = *a.seed;
  c.validate();
  return c;
}

fs::path split_path(const fs::path& dir, int step) { return dir / ("step-" + std::to_string(step) + ".bgad"); }

ProtocolData load_protocol_data(const fs::path& dir, const TrainConfig& config) {
  ProtocolData d;
  for (int t = 1; t <= config.protocol.num_steps(); ++t) d.train.push_back(load_dataset(split_path(dir, t)));
  d.validation = load_dataset(dir / "validation.bgad");
  d.check(config);
  return d;
}

Dataset load_validation(const std::optional<fs::path>& data, const TrainConfig& config) {
  if (data) return load_dataset(*data / "validation.bgad");
  return build_validation(config.protocol, config.val_count, config.seed, config.model.image_size);
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json miou_json(const GroupedMiou& m) {
  json per = json::array();
  for (const auto& v : m.per_class) per.push_back(opt_json(v));
  return {{"miou_initial", opt_json(m.initial)},
          {"miou_incremental", opt_json(m.incremental)},
          {"miou_all", opt_json(m.all)},
          {"per_class_iou", per}};
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "     -";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%6.3f", *v);
  return buf;
}

// Plain-text grid, one row per line, full float precision.
void write_grid(const fs::path& p, const Tensor& t) {
  std::ostringstream os;
  const int h = t.dim(1), w = t.dim(2);
  char buf[32];
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(t.at(static_cast<std::size_t>(y) * w + x)));
      if (x) os << ' ';
      os << buf;
    }
    os << '\n';
  }
  write_text(p, os.str());
}

// 8-bit graymap scaled linearly from [lo, hi]; returns the scale used.
json write_pgm(const fs::path& p, const Tensor& t) {
  const auto v = t.values();
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  const double lo = *mn, hi = *mx;
  std::string body = "P5\n" + std::to_string(t.dim(2)) + ' ' + std::to_string(t.dim(1)) + "\n255\n";
  for (float x : v) {
    const double s = hi > lo ? (x - lo) / (hi - lo) : 0.0;
    body.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * s))));
  }
  write_text(p, body);
  return {{"min", lo}, {"max", hi}};
}

}  // namespace

std::string git_blob_hash(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string out;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    out += buf;
  }
  return out;
}

int gen_data(const GenDataArgs& a, const std::string& command_line) {
  const TaskProtocol protocol = TaskProtocol::parse(a.protocol);
  if (a.count < 1 || a.val_count < 1) throw ConfigError("--count and --val-count must be positive");
  prepare_out_dir(a.out);
  Manifest m("gen-data", command_line);
  m.seed(a.seed);
  m.extra()["protocol"] = protocol.name();

  std::vector<fs::path> written;
  for (int t = 1; t <= protocol.num_steps(); ++t) {
    const Dataset d = build_split(protocol, t, a.count, a.seed, a.canvas);
    save_dataset(d, split_path(a.out, t));
    written.push_back(split_path(a.out, t));
    std::size_t labeled = 0;
    for (const auto& s : d.samples) {
      labeled += static_cast<std::size_t>(std::count_if(s.label.ids.begin(), s.label.ids.end(), [](int id) { return id != 0; }));
    }
    const ClassRange c = protocol.classes_of_step(t);
    std::cout << "step " << t << ": classes " << c.first << '-' << c.last << ", " << d.samples.size() << " scenes, "
              << labeled << " labeled pixels\n";
    if (a.pgm) {
      const fs::path dir = a.out / ("pgm-step-" + std::to_string(t));
      fs::create_directories(dir);
      for (std::size_t i = 0; i < d.samples.size(); ++i) {
        write_label_pgm(d.samples[i].label, protocol.total_classes(), dir / ("label-" + std::to_string(i) + ".pgm"));
      }
    }
  }
  const Dataset v = build_validation(protocol, a.val_count, a.seed, a.canvas);
  save_dataset(v, a.out / "validation.bgad");
  written.push_back(a.out / "validation.bgad");
  std::cout << "validation: " << v.samples.size() << " scenes, all " << protocol.total_classes() << " classes labeled\n";

  for (const auto& p : written) m.output(p, a.out);
  m.write(a.out);
  return kOk;
}

int train(const TrainArgs& a, const std::string& command_line) {
  const TrainConfig config = load_config(a.cfg);
  prepare_out_dir(a.out);
  Manifest m("train", command_line);
  m.config(config);
  if (a.cfg.config) m.input(*a.cfg.config);
  if (a.resume_from) m.input(*a.resume_from);

  std::vector<StepReport> reports;
  if (a.data) {
    m.input_dir(*a.data);
    reports = run_protocol(config, load_protocol_data(*a.data, config), a.out, a.resume_from);
  } else {
    reports = run_protocol(config, a.out, a.resume_from);
  }
  write_text(a.out / "config.txt", config.to_text());

  std::cout << "step    ini    inc    all   seconds\n";
  json table = json::array();
  for (const auto& r : reports) {
    char secs[32];
    std::snprintf(secs, sizeof secs, "%9.1f", r.wall_seconds);
    std::cout << r.step << "    " << fmt(r.miou.initial) << ' ' << fmt(r.miou.incremental) << ' ' << fmt(r.miou.all)
              << secs << '\n';
    json row = miou_json(r.miou);
    row["step"] = r.step;
    row["checkpoint"] = r.checkpoint.filename().string();
    table.push_back(row);
  }
  write_text(a.out / "miou.json", table.dump(2) + '\n');

  m.output(a.out / "config.txt", a.out);
  m.output(a.out / "metrics.jsonl", a.out);
  m.output(a.out / "miou.json", a.out);
  for (const auto& r : reports) m.output(r.checkpoint, a.out);
  m.write(a.out);
  return kOk;
}

int eval(const EvalArgs& a, const std::string& command_line) {
  const TrainConfig config = load_config(a.cfg);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  if (ck.model.config() != config.model) throw ConfigError("checkpoint model layout differs from the config");
  if (ck.step_index > config.protocol.num_steps()) {
    throw ConfigError("checkpoint step " + std::to_string(ck.step_index) + " exceeds protocol " + config.protocol.name());
  }
  const Dataset validation = load_validation(a.data, config);
  const GroupedMiou miou = evaluate(config, ck.model, validation, ck.step_index);
  json record = miou_json(miou);
  record["step"] = ck.step_index;
  std::cout << record.dump() << '\n';
  if (a.out) {
    prepare_out_dir(*a.out);
    Manifest m("eval", command_line);
    m.config(config);
    m.input(a.checkpoint);
    if (a.cfg.config) m.input(*a.cfg.config);
    if (a.data) m.input(*a.data / "validation.bgad");
    write_text(*a.out / "eval.json", record.dump(2) + '\n');
    m.output(*a.out / "eval.json", *a.out);
    m.write(*a.out);
  }
  return kOk;
}

int ablate(const AblateArgs& a, const std::string& command_line) {
  const TrainConfig base = load_config(a.cfg);
  std::vector<std::string> variants = a.variants;
  if (variants.empty()) {
    for (const auto& v : ablation_registry()) variants.push_back(v.id);
  }
  for (const auto& v : variants) find_variant(v);
  std::vector<std::uint64_t> seeds = a.seeds;
  if (seeds.empty()) seeds.push_back(base.seed);
  prepare_out_dir(a.out);

  Manifest m("ablate", command_line);
  m.config(base);
  if (a.cfg.config) m.input(*a.cfg.config);

  json runs = json::array();
  std::string tables;
  for (std::uint64_t seed : seeds) {
    TrainConfig cfg = base;
    cfg.seed = seed;
    const AblationReport report = run_ablation(cfg, variants, &std::cerr);
    const std::string t = report.table();
    std::cout << t << '\n';
    tables += t + '\n';
    json run = {{"seed", seed}, {"initial", miou_json(report.initial.miou)}, {"variants", json::array()}};
    for (const auto& v : report.variants) {
      json steps = json::array();
      for (const auto& s : v.steps) {
        steps.push_back({{"step", s.step},
                         {"miou", miou_json(s.miou)},
                         {"isolation_grad_norm", opt_json(s.isolation_grad_norm)},
                         {"old_class_drift", opt_json(s.old_class_drift)},
                         {"empty_region_warnings", s.empty_region_warnings}});
      }
      run["variants"].push_back({{"id", v.id},
                                 {"final", miou_json(v.final_miou)},
                                 {"isolation_grad_norm", v.isolation_grad_norm},
                                 {"old_class_drift", v.old_class_drift},
                                 {"steps", steps}});
    }
    runs.push_back(run);
  }
  write_text(a.out / "ablation.json", json{{"variants", variants}, {"runs", runs}}.dump(2) + '\n');
  write_text(a.out / "table.txt", tables);
  m.extra()["seeds"] = seeds;
  m.output(a.out / "ablation.json", a.out);
  m.output(a.out / "table.txt", a.out);
  m.write(a.out);
  return kOk;
}

int grad_check(const GradCheckArgs& a, const std::string& command_line) {
  GradCheckOptions opt;
  opt.seed = a.seed;
  opt.instances = a.instances;
  opt.cases = a.cases;
  opt.inject = a.inject;
  const GradCheckReport report = run_grad_check(opt);

  std::string failures;
  for (const auto& c : report.cases) {
    char line[160];
    std::snprintf(line, sizeof line, "%-20s %3d instances  worst rel %.3e  worst abs %.3e  forward %.3e  %s",
                  c.name.c_str(), c.instances, c.worst_rel, c.worst_abs, c.worst_forward, c.passed ? "ok" : "FAIL");
    std::cout << line << '\n';
    if (!c.passed) failures += c.failure + '\n';
  }
  if (!failures.empty()) std::cout << "failing cases (replay records):\n" << failures;

  if (a.out) {
    prepare_out_dir(*a.out);
    Manifest m("grad-check", command_line);
    m.seed(a.seed);
    json summary = json::array();
    for (const auto& c : report.cases) {
      summary.push_back({{"case", c.name},
                         {"instances", c.instances},
                         {"worst_rel", c.worst_rel},
                         {"worst_abs", c.worst_abs},
                         {"worst_forward", c.worst_forward},
                         {"passed", c.passed}});
    }
    write_text(*a.out / "grad-check.json", summary.dump(2) + '\n');
    m.output(*a.out / "grad-check.json", *a.out);
    if (!failures.empty()) {
      write_text(*a.out / "failures.jsonl", failures);
      m.output(*a.out / "failures.jsonl", *a.out);
    }
    m.write(*a.out);
  }
  return report.passed() ? kOk : kVerificationFailed;
}

int dump_logits(const DumpLogitsArgs& a, const std::string& command_line) {
  const TrainConfig config = load_config(a.cfg);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Dataset validation = load_validation(a.data, config);
  if (a.image_index < 0 || static_cast<std::size_t>(a.image_index) >= validation.samples.size()) {
    throw UsageError("--image-index " + std::to_string(a.image_index) + " outside 0.." +
                     std::to_string(validation.samples.size() - 1));
  }
  if (validation.canvas != ck.model.config().image_size) throw ConfigError("image size does not match the checkpoint");
  prepare_out_dir(a.out);

  LogitBundle bundle;
  Tensor mu_b;
  {
    NoGradGuard no_grad;
    bundle = ck.model.forward(validation.samples[static_cast<std::size_t>(a.image_index)].image);
    mu_b = aggregate_background(bundle, AggregationMode::kInference, BackgroundScheme::kFiltered);
  }

  Manifest m("dump-logits", command_line);
  m.config(config);
  m.input(a.checkpoint);
  if (a.data) m.input(*a.data / "validation.bgad");
  m.extra()["image_index"] = a.image_index;
  m.extra()["steps"] = ck.model.num_steps();
  json scales = json::object();
  auto emit = [&](const std::string& name, const Tensor& t) {
    write_grid(a.out / (name + ".txt"), t);
    scales[name] = write_pgm(a.out / (name + ".pgm"), t);
    m.output(a.out / (name + ".txt"), a.out);
    m.output(a.out / (name + ".pgm"), a.out);
  };
  emit("b1", bundle.steps[0].adapt_channel);
  for (int i = 2; i <= ck.model.num_steps(); ++i) {
    const Tensor& adapt = bundle.steps[static_cast<std::size_t>(i - 1)].adapt_channel;
    emit("adapt_" + std::to_string(i), adapt);
    emit("filtered_" + std::to_string(i), filter_residual(adapt));
  }
  if (ck.model.num_steps() > 1) emit("mu_b", mu_b);
  emit("sigmoid_mu_b", sigmoid(mu_b));
  m.extra()["pgm_scale"] = scales;
  m.write(a.out);
  std::cout << "wrote " << scales.size() << " grids to " << a.out.string() << '\n';
  return kOk;
}

}  // namespace bgadapt::cli
