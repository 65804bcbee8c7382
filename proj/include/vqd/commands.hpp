#pragma once

// Subcommand implementations behind the vqd executable. Each returns a
// process exit code and writes only to the given streams.

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace vqd::cli {

enum ExitCode : int { kOk = 0, kUsageError = 1, kDataError = 2, kNumericError = 3 };

struct GenDataArgs {
  std::filesystem::path out;
  std::size_t scenes = 0;
  std::uint64_t seed = 0;
  std::string split = "train";
  bool force = false;
  std::optional<std::filesystem::path> config;
};

struct TrainArgs {
  std::optional<std::filesystem::path> config;
  std::filesystem::path data;
  std::filesystem::path val;
  std::string run;
  std::optional<std::string> mode;
};

struct EvalArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  double iou = 0.5;
  // Defaults to config.txt beside the checkpoint.
  std::optional<std::filesystem::path> config;
};

struct GradCheckArgs {
  std::uint64_t seed = 0;
  double perturb = 0.0;
};

struct DiagnoseArgs {
  std::vector<std::string> runs;
  std::filesystem::path runs_dir = "runs";
};

// Dataset seed for a split, so train and val files never share scenes.
std::uint64_t split_seed(std::uint64_t seed, const std::string& split);

int cmd_gen_data(const GenDataArgs& args, std::ostream& out, std::ostream& err);
int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err);
int cmd_grad_check(const GradCheckArgs& args, std::ostream& out, std::ostream& err);
int cmd_diagnose(const DiagnoseArgs& args, std::ostream& out, std::ostream& err);

}  // namespace vqd::cli
