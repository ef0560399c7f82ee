#include "bgadapt/protocol.hpp"

#include <regex>

#include "bgadapt/errors.hpp"

namespace bgadapt {

TaskProtocol::TaskProtocol(int n_initial, int n_increment, int num_steps)
    : n_initial_(n_initial), n_increment_(n_increment), num_steps_(num_steps) {
  if (n_initial < 1 || n_increment < 1 || num_steps < 1) {
    throw ConfigError("protocol needs N_ini >= 1, N_inc >= 1 and at least one step");
  }
}

TaskProtocol TaskProtocol::parse(const std::string& name) {
  if (name == "4-1") return {4, 1, 5};
  if (name == "2-2") return {2, 2, 3};
  if (name == "6-1") return {6, 1, 3};
  static const std::regex pattern(R"((\d+)-(\d+)/(\d+))");
  std::smatch m;
  if (!std::regex_match(name, m, pattern)) {
    throw ConfigError("unknown protocol '" + name + "' (expected 4-1, 2-2, 6-1 or N-M/T)");
  }
  return {std::stoi(m[1]), std::stoi(m[2]), std::stoi(m[3])};
}

ClassRange TaskProtocol::classes_of_step(int step) const {
  if (step < 1 || step > num_steps_) {
    throw ConfigError("step " + std::to_string(step) + " outside 1.." + std::to_string(num_steps_));
  }
  if (step == 1) return {1, n_initial_};
  const int first = n_initial_ + (step - 2) * n_increment_ + 1;
  return {first, first + n_increment_ - 1};
}

int TaskProtocol::step_of_class(int class_id) const {
  if (class_id < 1 || class_id > total_classes()) {
    throw ConfigError("class " + std::to_string(class_id) + " not in protocol " + name());
  }
  if (class_id <= n_initial_) return 1;
  return 2 + (class_id - n_initial_ - 1) / n_increment_;
}

std::string TaskProtocol::name() const {
  return std::to_string(n_initial_) + "-" + std::to_string(n_increment_) + "/" + std::to_string(num_steps_);
}

}  // namespace bgadapt
