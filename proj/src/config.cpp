#include "bgadapt/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "bgadapt/errors.hpp"

namespace bgadapt {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  }
}

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long n = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<int>(n);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

template <typename E>
E to_enum(const std::string& key, const std::string& v, std::initializer_list<E> options) {
  for (E o : options) {
    if (to_string(o) == v) return o;
  }
  throw ConfigError("config key '" + key + "': unknown value '" + v + "'");
}

// %.17g round-trips doubles exactly.
std::string fmt(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

}  // namespace

std::string to_string(FreezePolicy p) {
  switch (p) {
    case FreezePolicy::kAuto: return "auto";
    case FreezePolicy::kNone: return "none";
    case FreezePolicy::kBackboneAndOldHeads: return "freeze_backbone_and_old_heads";
  }
  return "?";
}

std::string to_string(BackgroundScheme s) {
  switch (s) {
    case BackgroundScheme::kFiltered: return "filtered";
    case BackgroundScheme::kUnfiltered: return "unfiltered";
    case BackgroundScheme::kInitialOnly: return "initial_only";
  }
  return "?";
}

std::string to_string(BgaScheme s) {
  switch (s) {
    case BgaScheme::kFinal: return "final";
    case BgaScheme::kNone: return "none";
    case BgaScheme::kMseZero: return "mse0";
    case BgaScheme::kBceOne: return "bce1";
  }
  return "?";
}

std::string to_string(FeatureDistill f) {
  switch (f) {
    case FeatureDistill::kBfd: return "bfd";
    case FeatureDistill::kNone: return "none";
    case FeatureDistill::kMse: return "mse";
    case FeatureDistill::kKd: return "kd";
  }
  return "?";
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void TrainConfig::validate() const {
  weights.validate();
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");
  if (!(lr_initial > 0.0) || !(lr_incremental > 0.0)) throw ConfigError("learning rates must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(poly_power > 0.0)) throw ConfigError("poly_power must be positive");
  if (epochs_initial < 1 || epochs_incremental < 1) throw ConfigError("epoch counts must be positive");
  if (batch_size < 1 || train_count < 1 || val_count < 1) throw ConfigError("batch and split sizes must be positive");
  if (probe_count < 0 || probe_count > val_count) throw ConfigError("probe_count must lie in [0, val_count]");
  if (model.encoder_width < 1 || model.feature_width < 1 || model.head_hidden < 1) throw ConfigError("layer widths must be positive");
}

bool TrainConfig::distillation_active() const {
  return (method.gkd && weights.gkd > 0.0) || (method.feature_distill != FeatureDistill::kNone && weights.bfd > 0.0);
}

FreezePolicy TrainConfig::effective_freeze() const {
  if (freeze_policy != FreezePolicy::kAuto) return freeze_policy;
  return distillation_active() ? FreezePolicy::kNone : FreezePolicy::kBackboneAndOldHeads;
}

std::string TrainConfig::to_text() const {
  std::map<std::string, std::string> kv{
      {"protocol", protocol.name()},
      {"seed", std::to_string(seed)},
      {"tau", fmt(tau)},
      {"lambda1", fmt(weights.bga_plus)},
      {"lambda2", fmt(weights.bga_minus)},
      {"lambda3", fmt(weights.gkd)},
      {"lambda4", fmt(weights.bfd)},
      {"lr_initial", fmt(lr_initial)},
      {"lr_incremental", fmt(lr_incremental)},
      {"momentum", fmt(momentum)},
      {"weight_decay", fmt(weight_decay)},
      {"poly_power", fmt(poly_power)},
      {"epochs_initial", std::to_string(epochs_initial)},
      {"epochs_incremental", std::to_string(epochs_incremental)},
      {"batch_size", std::to_string(batch_size)},
      {"train_count", std::to_string(train_count)},
      {"val_count", std::to_string(val_count)},
      {"probe_count", std::to_string(probe_count)},
      {"image_size", std::to_string(model.image_size)},
      {"encoder_width", std::to_string(model.encoder_width)},
      {"feature_width", std::to_string(model.feature_width)},
      {"head_hidden", std::to_string(model.head_hidden)},
      {"freeze_policy", to_string(freeze_policy)},
      {"audit_isolation", audit_isolation ? "true" : "false"},
      {"background_scheme", to_string(method.background)},
      {"bga_scheme", to_string(method.bga)},
      {"bga_plus", method.bga_plus ? "true" : "false"},
      {"bga_minus", method.bga_minus ? "true" : "false"},
      {"gkd", method.gkd ? "true" : "false"},
      {"feature_distill", to_string(method.feature_distill)},
  };
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

std::uint64_t TrainConfig::hash() const { return fnv1a64(to_text()); }

void TrainConfig::set(const std::string& key, const std::string& value) {
  const std::string& v = value;
  if (key == "protocol") protocol = TaskProtocol::parse(v);
  else if (key == "seed") {
    try {
      std::size_t used = 0;
      seed = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      throw ConfigError("config key 'seed': '" + v + "' is not an unsigned integer");
    }
  }
  else if (key == "tau") tau = to_double(key, v);
  else if (key == "lambda1") weights.bga_plus = to_double(key, v);
  else if (key == "lambda2") weights.bga_minus = to_double(key, v);
  else if (key == "lambda3") weights.gkd = to_double(key, v);
  else if (key == "lambda4") weights.bfd = to_double(key, v);
  else if (key == "lr_initial") lr_initial = to_double(key, v);
  else if (key == "lr_incremental") lr_incremental = to_double(key, v);
  else if (key == "momentum") momentum = to_double(key, v);
  else if (key == "weight_decay") weight_decay = to_double(key, v);
  else if (key == "poly_power") poly_power = to_double(key, v);
  else if (key == "epochs_initial") epochs_initial = to_int(key, v);
  else if (key == "epochs_incremental") epochs_incremental = to_int(key, v);
  else if (key == "batch_size") batch_size = to_int(key, v);
  else if (key == "train_count") train_count = to_int(key, v);
  else if (key == "val_count") val_count = to_int(key, v);
  else if (key == "probe_count") probe_count = to_int(key, v);
  else if (key == "image_size") model.image_size = to_int(key, v);
  else if (key == "encoder_width") model.encoder_width = to_int(key, v);
  else if (key == "feature_width") model.feature_width = to_int(key, v);
  else if (key == "head_hidden") model.head_hidden = to_int(key, v);
  else if (key == "audit_isolation") audit_isolation = to_bool(key, v);
  else if (key == "freeze_policy")
    freeze_policy = to_enum(key, v, {FreezePolicy::kAuto, FreezePolicy::kNone, FreezePolicy::kBackboneAndOldHeads});
  else if (key == "background_scheme")
    method.background = to_enum(key, v, {BackgroundScheme::kFiltered, BackgroundScheme::kUnfiltered, BackgroundScheme::kInitialOnly});
  else if (key == "bga_scheme")
    method.bga = to_enum(key, v, {BgaScheme::kFinal, BgaScheme::kNone, BgaScheme::kMseZero, BgaScheme::kBceOne});
  else if (key == "bga_plus") method.bga_plus = to_bool(key, v);
  else if (key == "bga_minus") method.bga_minus = to_bool(key, v);
  else if (key == "gkd") method.gkd = to_bool(key, v);
  else if (key == "feature_distill")
    method.feature_distill = to_enum(key, v, {FeatureDistill::kBfd, FeatureDistill::kNone, FeatureDistill::kMse, FeatureDistill::kKd});
  else throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash_pos = line.find('#'); hash_pos != std::string::npos) line.erase(hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return from_text(ss.str());
}

}  // namespace bgadapt
