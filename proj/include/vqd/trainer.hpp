#pragma once

// Adam with step decay, mini-batch training with per-epoch validation, and
// AP40 evaluation of a detector.

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "vqd/diagnostics.hpp"
#include "vqd/model.hpp"
#include "vqd/scenes.hpp"

namespace vqd::train {

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay_factor = 0.5;
  std::vector<double> decay_at{0.6, 0.85};  // fractions of the epoch count
  double clip_norm = 1.0;                   // 0 disables

  void validate() const;
};

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 8;
  double beta_warmup = 0.1;  // fraction of epochs with a linear beta ramp
  std::uint64_t seed = 0;
  double iou_threshold = 0.5;
  OptimizerConfig optimizer;

  void validate() const;
};

class Adam {
 public:
  Adam(const ParameterStore& store, const OptimizerConfig& cfg);
  // Applies one update from the accumulated gradients.
  void step(ParameterStore& store, double lr);
  std::size_t steps() const { return steps_; }

 private:
  OptimizerConfig cfg_;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Rescales all gradients so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_gradients(ParameterStore& store, double max_norm);

double learning_rate(const OptimizerConfig& cfg, std::size_t epoch, std::size_t epochs);
double beta_schedule(double beta, double warmup, std::size_t epoch, std::size_t epochs);

struct Evaluation {
  std::optional<double> ap40;
  std::vector<std::optional<double>> per_class;
};

Evaluation evaluate(const model::DetectorParams& params, const model::DetectorConfig& cfg,
                    std::span<const scenes::Scene> scenes, double iou_threshold);

struct TrainResult {
  std::vector<diagnostics::EpochRecord> records;
  double best_val_ap = 0.0;
  std::size_t best_epoch = 0;
};

// Writes metrics.csv, timing.csv and checkpoint.bin (best validation AP)
// into `run_dir` when given. `params` holds the last epoch's weights on
// return. Throws NumericError on a non-finite loss.
TrainResult train(model::DetectorParams& params, const model::DetectorConfig& cfg,
                  const TrainConfig& tcfg, std::span<const scenes::Scene> train_set,
                  std::span<const scenes::Scene> val_set,
                  const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                  const std::function<void(const diagnostics::EpochRecord&)>& on_epoch = {});

}  // namespace vqd::train
