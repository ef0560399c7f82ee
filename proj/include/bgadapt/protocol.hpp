#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace bgadapt {

inline constexpr int kBackgroundId = 0;

/// Integer class map, row-major, one id per pixel. Id 0 is background.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> ids;

  LabelMap() = default;
  LabelMap(int h, int w, int fill = kBackgroundId) : height(h), width(w), ids(static_cast<std::size_t>(h) * w, fill) {}

  int& at(int y, int x) { return ids[static_cast<std::size_t>(y) * width + x]; }
  int at(int y, int x) const { return ids[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return ids.size(); }

  bool operator==(const LabelMap&) const = default;
};

/// Inclusive range of class ids learned in one step.
struct ClassRange {
  int first = 1;
  int last = 0;

  int count() const { return last - first + 1; }
  bool contains(int id) const { return id >= first && id <= last; }
};

/// N_ini-N_inc step schedule: step 1 owns classes 1..N_ini and every
/// later step owns the next N_inc ids.
class TaskProtocol {
 public:
  TaskProtocol() = default;
  TaskProtocol(int n_initial, int n_increment, int num_steps);

  // Accepts the named toy protocols ("4-1", "2-2", "6-1") and the general
  // form "N-M/T" with an explicit step count.
  static TaskProtocol parse(const std::string& name);

  int n_initial() const { return n_initial_; }
  int n_increment() const { return n_increment_; }
  int num_steps() const { return num_steps_; }
  int total_classes() const { return n_initial_ + (num_steps_ - 1) * n_increment_; }

  // Steps are 1-based.
  ClassRange classes_of_step(int step) const;
  // Classes 1..last id of `step`.
  int classes_up_to(int step) const { return classes_of_step(step).last; }
  int step_of_class(int class_id) const;
  std::string name() const;

  bool operator==(const TaskProtocol&) const = default;

 private:
  int n_initial_ = 0;
  int n_increment_ = 0;
  int num_steps_ = 0;
};

}  // namespace bgadapt
