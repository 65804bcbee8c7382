#pragma once

// Synthetic monocular scenes: objects on a ground plane seen by a pinhole
// camera, a feature grid standing in for backbone features, line-delimited
// dataset files, and AP over 40 recall positions.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "vqd/geometry.hpp"
#include "vqd/rng.hpp"

namespace vqd::scenes {

struct ClassPrior {
  double l3d, w3d, h3d;
};

struct SceneConfig {
  std::size_t grid = 16;
  std::size_t num_classes = 3;
  std::size_t k_max = 4;
  double depth_min = 8.0;
  double depth_max = 35.0;
  double camera_height = 1.65;
  double feature_noise = 0.05;
  geometry::Intrinsics intrinsics{1.2, 0.5, 0.5};
  std::vector<ClassPrior> priors{{3.9, 1.6, 1.5}, {5.2, 1.9, 2.0}, {8.5, 2.5, 3.2}};

  // Class splats, inverse depth, log dims (3), sin/cos yaw, lrtb (4),
  // sub-cell center offset (2).
  std::size_t channels() const { return num_classes + 12; }
  void validate() const;
};

struct Scene {
  std::uint64_t scene_id = 0;
  std::uint64_t seed = 0;
  geometry::Intrinsics intrinsics;
  std::size_t grid = 0;
  std::size_t channels = 0;
  std::vector<double> features;  // grid * grid * channels, row-major cells
  std::vector<geometry::GroundTruthObject> objects;
};

// Draws K uniformly in [1, k_max] unless `forced_objects` is given.
Scene generate_scene(std::uint64_t scene_id, std::uint64_t seed,
                     const SceneConfig& cfg,
                     std::optional<std::size_t> forced_objects = std::nullopt);

// Scene i gets id (seed << 32 | i) and its own derived seed.
std::vector<Scene> generate_dataset(std::size_t count, std::uint64_t seed,
                                    const SceneConfig& cfg);

struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void save_dataset(std::span<const Scene> scenes, const std::filesystem::path& path);
// Throws DatasetError naming the 1-based line of a malformed record.
std::vector<Scene> load_dataset(const std::filesystem::path& path);

struct Detection {
  std::size_t scene = 0;  // index into the ground-truth list
  int category = 0;
  double score = 0.0;
  geometry::OrientedBox3D box;
};

struct EvalObject {
  int category = 0;
  geometry::OrientedBox3D box;
};

std::vector<std::vector<EvalObject>> eval_objects(std::span<const Scene> scenes);

// Greedy highest-score-first matching per scene (same class, iou3d >=
// threshold, each ground truth used once), precision interpolated at recall
// 1/40 .. 40/40. nullopt when there are no ground truths.
std::optional<double> ap40(std::span<const Detection> detections,
                           std::span<const std::vector<EvalObject>> ground_truths,
                           double iou_threshold);

// Same, restricted to one category.
std::optional<double> ap40_for_class(std::span<const Detection> detections,
                                     std::span<const std::vector<EvalObject>> ground_truths,
                                     double iou_threshold, int category);

}  // namespace vqd::scenes
