#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "vqd/ops.hpp"
#include "vqd/trainer.hpp"

using namespace vqd;
using namespace vqd::train;

namespace {

model::DetectorConfig small_config() {
  model::DetectorConfig cfg;
  cfg.queries = 6;
  cfg.width = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.grid = 6;
  cfg.ffn_width = 32;
  return cfg;
}

std::vector<scenes::Scene> dataset(std::size_t count, std::uint64_t seed, std::size_t grid) {
  scenes::SceneConfig sc;
  sc.grid = grid;
  return scenes::generate_dataset(count, seed, sc);
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "vqd_trainer_test" / name;
  std::filesystem::remove_all(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("adam matches a hand-computed update") {
  ParameterStore store;
  Tensor& w = store.add("w", Tensor::from({2}, {1.0, -2.0}, true));
  OptimizerConfig cfg;
  Adam adam(store, cfg);
  double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -2.0};
  for (int step = 1; step <= 3; ++step) {
    store.zero_grad();
    backward(sum(mul(w, w)));  // gradient 2w
    adam.step(store, 0.1);
    for (int i = 0; i < 2; ++i) {
      const double g = 2.0 * x[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, step));
      const double vh = v[i] / (1 - std::pow(0.999, step));
      x[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(w.values()[i] == doctest::Approx(x[i]).epsilon(1e-14));
    }
  }
  CHECK(adam.steps() == 3);
}

TEST_CASE("gradient clipping rescales the joint norm") {
  ParameterStore store;
  Tensor& a = store.add("a", Tensor::from({1}, {0.0}, true));
  Tensor& b = store.add("b", Tensor::from({1}, {0.0}, true));
  a.node()->grad_buffer() = {3.0};
  b.node()->grad_buffer() = {4.0};
  CHECK(clip_gradients(store, 10.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == 3.0);
  CHECK(clip_gradients(store, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(b.grad()[0] == doctest::Approx(0.8));
}

TEST_CASE("step decay and beta warm-up schedules") {
  OptimizerConfig cfg;
  for (std::size_t e = 0; e < 6; ++e) CHECK(learning_rate(cfg, e, 10) == 1e-3);
  for (std::size_t e = 6; e < 9; ++e) CHECK(learning_rate(cfg, e, 10) == 5e-4);
  CHECK(learning_rate(cfg, 9, 10) == 2.5e-4);

  CHECK(beta_schedule(0.1, 0.1, 0, 60) == doctest::Approx(0.1 / 6));
  CHECK(beta_schedule(0.1, 0.1, 5, 60) == doctest::Approx(0.1));
  CHECK(beta_schedule(0.1, 0.1, 40, 60) == doctest::Approx(0.1));
  CHECK(beta_schedule(0.1, 0.0, 0, 60) == 0.1);
}

TEST_CASE("configuration validation") {
  TrainConfig t;
  t.validate();
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  t = TrainConfig{};
  t.optimizer.lr = -1;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
}

TEST_CASE("detection loss falls on a single fixed scene in every mode") {
  const auto scene = dataset(1, 7, 6);
  for (auto mode : {model::TrainingMode::kBaseline, model::TrainingMode::kFld,
                    model::TrainingMode::kFldDn, model::TrainingMode::kFldVdn}) {
    model::DetectorConfig cfg = small_config();
    model::apply_mode(cfg, mode);
    auto params = model::create_params(cfg, 1);
    TrainConfig t;
    t.epochs = 200;
    t.batch_size = 1;
    t.optimizer.decay_at.clear();
    const auto result = train::train(*params, cfg, t, scene, {});
    REQUIRE(result.records.size() == 200);
    CAPTURE(model::mode_name(mode));
    auto window = [&](std::size_t from) {
      double s = 0;
      for (std::size_t i = from; i < from + 20; ++i) s += result.records[i].loss_det;
      return s / 20;
    };
    // Non-increasing in 20-step windows, and well below the start.
    for (std::size_t w = 20; w < 200; w += 20) CHECK(window(w) < window(w - 20));
    CHECK(result.records.back().loss_det < 0.5 * result.records.front().loss_det);
  }
}

TEST_CASE("training writes the run directory deterministically") {
  const auto train_set = dataset(12, 1, 6);
  const auto val_set = dataset(6, 2, 6);
  model::DetectorConfig cfg = small_config();
  model::apply_mode(cfg, model::TrainingMode::kFldVdn);
  TrainConfig t;
  t.epochs = 3;
  t.batch_size = 4;
  t.seed = 9;
  auto run = [&](const std::string& name) {
    auto params = model::create_params(cfg, 9);
    const auto dir = temp_dir(name);
    const auto result = train::train(*params, cfg, t, train_set, val_set, dir);
    CHECK(result.records.size() == 3);
    CHECK(result.best_epoch >= 1);
    return dir;
  };
  const auto a = run("a"), b = run("b");
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "checkpoint.bin") == slurp(b / "checkpoint.bin"));
  CHECK(std::filesystem::exists(a / "timing.csv"));
  const auto recs = diagnostics::read_run_csv(a / "metrics.csv");
  REQUIRE(recs.size() == 3);
  for (const auto& r : recs) {
    CHECK(r.negative_entropy <= 0.0);
    CHECK(r.noisy_to_learnable_mass >= 0.0);
    CHECK(r.noisy_to_learnable_mass <= 1.0);
    CHECK(r.loss_kl > 0.0);
  }

  // The checkpoint holds the best epoch's weights.
  auto reloaded = model::create_params(cfg, 123);
  load_checkpoint(reloaded->store, a / "checkpoint.bin");
  const auto ev = evaluate(*reloaded, cfg, val_set, t.iou_threshold);
  double best = 0;
  for (const auto& r : recs) best = std::max(best, r.val_ap40);
  CHECK(ev.ap40.value_or(0.0) == doctest::Approx(best).epsilon(1e-5));
}

TEST_CASE("a non-finite loss aborts with context") {
  auto train_set = dataset(2, 3, 6);
  train_set[1].features[0] = std::nan("");
  model::DetectorConfig cfg = small_config();
  auto params = model::create_params(cfg, 1);
  TrainConfig t;
  t.epochs = 1;
  t.batch_size = 1;
  try {
    train::train(*params, cfg, t, train_set, {});
    FAIL("expected a numeric error");
  } catch (const train::NumericError& e) {
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
}

TEST_CASE("an overfit model scores on its own training scenes") {
  const auto train_set = dataset(2, 11, 6);
  model::DetectorConfig cfg = small_config();
  model::apply_mode(cfg, model::TrainingMode::kFld);
  auto params = model::create_params(cfg, 2);
  TrainConfig t;
  t.epochs = 1500;
  t.batch_size = 2;
  t.optimizer.decay_at = {0.75};
  train::train(*params, cfg, t, train_set, {});
  const auto ev = evaluate(*params, cfg, train_set, 0.5);
  REQUIRE(ev.ap40.has_value());
  CHECK(*ev.ap40 > 0.9);
  CHECK(evaluate(*params, cfg, train_set, 0.999).ap40.value_or(0.0) < 0.05);
}
