#pragma once

// Flat key=value run configuration covering the detector, scenes and
// optimizer. Lines starting with '#' are comments.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vqd/model.hpp"
#include "vqd/scenes.hpp"
#include "vqd/trainer.hpp"

namespace vqd::cli {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  model::DetectorConfig detector;
  scenes::SceneConfig scene;
  train::TrainConfig train;
  std::filesystem::path runs_dir = "runs";

  // Copies the shared scene fields (grid, classes, channels) into the
  // detector and validates everything. Throws ConfigError.
  void finalize();
};

// Every key with its default, in file order.
std::vector<std::pair<std::string, std::string>> default_entries();

// Throws ConfigError naming the line and key for unknown keys, duplicate
// keys, and malformed values.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

// Canonical text with every key; parse_run_config(format_run_config(c))
// reproduces c.
std::string format_run_config(const RunConfig& cfg);

}  // namespace vqd::cli
