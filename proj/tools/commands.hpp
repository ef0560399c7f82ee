#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace bgadapt::cli {

enum ExitCode : int { kOk = 0, kVerificationFailed = 1, kUsage = 2, kIo = 3 };

// Output directory problems are reported as usage errors.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenDataArgs {
  std::string protocol = "4-1";
  int count = 64;
  int val_count = 64;
  int canvas = 32;
  std::uint64_t seed = 1;
  std::filesystem::path out;
  bool pgm = false;
};

struct ConfigArgs {
  std::optional<std::filesystem::path> config;
  std::vector<std::string> overrides;  // key=value
  std::optional<std::uint64_t> seed;
};

struct TrainArgs {
  ConfigArgs cfg;
  std::optional<std::filesystem::path> data;
  std::filesystem::path out;
  std::optional<std::filesystem::path> resume_from;
};

struct EvalArgs {
  ConfigArgs cfg;
  std::optional<std::filesystem::path> data;
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> out;
};

struct AblateArgs {
  ConfigArgs cfg;
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path out;
};

struct GradCheckArgs {
  std::uint64_t seed = 0;
  int instances = 20;
  std::vector<std::string> cases;
  std::string inject;
  std::optional<std::filesystem::path> out;
};

struct DumpLogitsArgs {
  ConfigArgs cfg;
  std::optional<std::filesystem::path> data;
  std::filesystem::path checkpoint;
  int image_index = 0;
  std::filesystem::path out;
};

int gen_data(const GenDataArgs& a, const std::string& command_line);
int train(const TrainArgs& a, const std::string& command_line);
int eval(const EvalArgs& a, const std::string& command_line);
int ablate(const AblateArgs& a, const std::string& command_line);
int grad_check(const GradCheckArgs& a, const std::string& command_line);
int dump_logits(const DumpLogitsArgs& a, const std::string& command_line);

// Git blob hash (SHA-1 over "blob <size>\0" + content), lowercase hex.
std::string git_blob_hash(const std::string& content);

}  // namespace bgadapt::cli
