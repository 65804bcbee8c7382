#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "vqd/gradcheck.hpp"
#include "vqd/model.hpp"
#include "vqd/ops.hpp"

using namespace vqd;
using namespace vqd::model;

namespace {

DetectorConfig tiny_config() {
  DetectorConfig cfg;
  cfg.groups = 2;
  cfg.queries = 2;
  cfg.noisy_groups = 1;
  cfg.width = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.grid = 4;
  cfg.ffn_width = 8;
  return cfg;
}

DetectorConfig small_config() {
  DetectorConfig cfg;
  cfg.queries = 6;
  cfg.width = 16;
  cfg.layers = 3;
  cfg.heads = 2;
  cfg.grid = 6;
  cfg.ffn_width = 32;
  return cfg;
}

scenes::Scene scene_for(const DetectorConfig& cfg, std::uint64_t id,
                        std::optional<std::size_t> k = std::nullopt) {
  scenes::SceneConfig sc;
  sc.grid = cfg.grid;
  return scenes::generate_scene(id, 1000 + id, sc, k);
}

std::vector<Tensor> all_parameters(DetectorParams& p) {
  std::vector<Tensor> out;
  for (auto& [name, t] : p.store) out.push_back(t);
  return out;
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::ranges::equal(a.values(), b.values());
}

}  // namespace

TEST_CASE("mode names round trip and apply_mode sets the ladder") {
  for (auto m : {TrainingMode::kBaseline, TrainingMode::kFld, TrainingMode::kFldDn,
                 TrainingMode::kFldVdn})
    CHECK(parse_mode(mode_name(m)) == m);
  CHECK_FALSE(parse_mode("vdn").has_value());

  DetectorConfig a;
  apply_mode(a, TrainingMode::kBaseline);
  CHECK(a.lambda_dn == 0.0);
  CHECK(a.lambda_distill == 0.0);
  CHECK(a.noisy_groups == 0);
  DetectorConfig b;
  apply_mode(b, TrainingMode::kFld);
  CHECK(b.lambda_distill == 0.5);
  CHECK(b.noisy_groups == 0);
  DetectorConfig c;
  apply_mode(c, TrainingMode::kFldDn);
  CHECK(c.denoising.mode == vqg::DenoisingMode::kDeterministic);
  CHECK(c.noisy_groups == 3);
  DetectorConfig d;
  apply_mode(d, TrainingMode::kFldVdn);
  CHECK(d.denoising.mode == vqg::DenoisingMode::kVariational);
  CHECK(d.denoising.beta > 0.0);
}

TEST_CASE("config validation") {
  DetectorConfig cfg;
  cfg.validate();
  cfg.heads = 5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = DetectorConfig{};
  cfg.confidence_threshold = 1.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = DetectorConfig{};
  cfg.groups = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("overall loss weighting") {
  CHECK(overall_loss(2.0, 1.0, 4.0, 1.0, 1.0, 0.5) == doctest::Approx(5.0).epsilon(1e-12));
  const Tensor t = overall_loss(Tensor::scalar(2.0), Tensor::scalar(1.0), Tensor::scalar(4.0),
                                1.0, 1.0, 0.5);
  CHECK(std::abs(t.item() - 5.0) < 1e-12);
}

TEST_CASE("parameter registration does not depend on the mode") {
  DetectorConfig a = small_config(), b = small_config();
  apply_mode(a, TrainingMode::kBaseline);
  apply_mode(b, TrainingMode::kFldVdn);
  auto pa = create_params(a, 5), pb = create_params(b, 5);
  REQUIRE(pa->store.size() == pb->store.size());
  auto ia = pa->store.begin();
  for (auto ib = pb->store.begin(); ib != pb->store.end(); ++ia, ++ib) {
    CHECK(ia->first == ib->first);
    CHECK(same_values(ia->second, ib->second));
  }
}

TEST_CASE("positional encoding is bounded and distinct per cell") {
  const Tensor pe = grid_positional_encoding(4, 8);
  CHECK(pe.rows() == 16);
  CHECK(pe.cols() == 8);
  for (double v : pe.values()) CHECK(std::abs(v) <= 1.0);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = i + 1; j < 16; ++j) {
      double d = 0;
      for (std::size_t c = 0; c < 8; ++c)
        d += std::abs(pe.values()[i * 8 + c] - pe.values()[j * 8 + c]);
      CHECK(d > 1e-6);
    }
}

TEST_CASE("encoder rejects a mis-sized grid") {
  const DetectorConfig cfg = tiny_config();
  auto p = create_params(cfg, 1);
  std::vector<double> bad(10, 0.0);
  CHECK_THROWS_AS(encode_features(*p, cfg, bad), DimensionError);
}

TEST_CASE("training forward shapes and trace") {
  const DetectorConfig cfg = small_config();
  auto p = create_params(cfg, 3);
  const auto scene = scene_for(cfg, 1, 3);
  Rng rng(9);
  const StepInputs in = prepare_step(scene, cfg, rng);
  REQUIRE(in.noisy.size() == cfg.groups);
  CHECK(in.noisy[0].size() == cfg.noisy_groups * 3);
  const ForwardResult f = forward_train(*p, cfg, scene, in);
  const std::size_t s = cfg.queries + cfg.noisy_groups * 3;
  CHECK(f.trace.group_size() == s);
  CHECK(f.trace.layer_queries.size() == cfg.layers);
  CHECK(f.trace.layer_predictions.size() == cfg.layers);
  CHECK(f.trace.final_maps.size() == cfg.groups);
  CHECK(f.trace.final_maps[0].size() == s * s);
  CHECK(f.trace.layer_queries[0].rows() == cfg.groups * s);
  CHECK(f.trace.layer_predictions.back().logits.cols() == cfg.num_classes);
  CHECK(f.latent.rows() == cfg.groups * cfg.noisy_groups * 3);

  for (const auto& q : decode(f.trace.layer_predictions.back())) {
    CHECK(q.x_c > 0.0);
    CHECK(q.x_c < 1.0);
    CHECK(q.l >= 0.0);
    CHECK(q.depth > 0.0);
    CHECK(q.l3d > 0.0);
  }
}

TEST_CASE("a single layer decoder yields one trace entry") {
  DetectorConfig cfg = small_config();
  cfg.layers = 1;
  auto p = create_params(cfg, 3);
  const auto scene = scene_for(cfg, 2);
  Rng rng(1);
  const ForwardResult f = forward_train(*p, cfg, scene, prepare_step(scene, cfg, rng));
  CHECK(f.trace.layer_queries.size() == 1);
  // Distillation needs a later layer to look forward to.
  const LossTerms t = compute_losses(*p, cfg, scene, f, cfg.denoising.beta);
  CHECK(t.distill.item() == 0.0);
  CHECK(std::isfinite(t.total.item()));
}

TEST_CASE("noisy queries do not change learnable outputs") {
  DetectorConfig with = small_config(), without = small_config();
  without.noisy_groups = 0;
  auto p = create_params(with, 4);
  const auto scene = scene_for(with, 3, 4);
  Rng rng(2);
  const ForwardResult a = forward_train(*p, with, scene, prepare_step(scene, with, rng));
  Rng rng2(2);
  const ForwardResult b =
      forward_train(*p, without, scene, prepare_step(scene, without, rng2));
  const std::size_t n = with.queries, s = a.trace.group_size();
  for (std::size_t l = 0; l < with.layers; ++l)
    for (std::size_t g = 0; g < with.groups; ++g) {
      const Tensor la = slice_rows(a.trace.layer_queries[l], g * s, n);
      const Tensor lb = slice_rows(b.trace.layer_queries[l], g * n, n);
      CHECK(same_values(la, lb));
    }
}

TEST_CASE("inference equals the first group of a training pass") {
  DetectorConfig cfg = small_config();
  cfg.noisy_groups = 0;
  cfg.confidence_threshold = 0.0;
  auto p = create_params(cfg, 6);
  const auto scene = scene_for(cfg, 4);
  Rng rng(0);
  const ForwardResult f = forward_train(*p, cfg, scene, prepare_step(scene, cfg, rng));
  const auto decoded = decode(f.trace.layer_predictions.back().slice(0, cfg.queries));
  const auto dets = inference(*p, cfg, scene);
  REQUIRE(dets.size() == cfg.queries);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    CHECK(dets[i].score == decoded[i].score());
    CHECK(dets[i].category == decoded[i].best_class());
    CHECK(dets[i].box.center.z == decoded[i].box3d(scene.intrinsics).center.z);
  }
}

TEST_CASE("inference threshold filters and is mode independent") {
  DetectorConfig cfg = small_config();
  auto p = create_params(cfg, 6);
  const auto scene = scene_for(cfg, 5);
  cfg.confidence_threshold = 1.0;
  CHECK(inference(*p, cfg, scene).empty());
  cfg.confidence_threshold = 0.0;
  const auto ref = inference(*p, cfg, scene);
  for (auto m : {TrainingMode::kBaseline, TrainingMode::kFld, TrainingMode::kFldDn,
                 TrainingMode::kFldVdn}) {
    DetectorConfig c = cfg;
    apply_mode(c, m);
    const auto d = inference(*p, c, scene);
    REQUIRE(d.size() == ref.size());
    for (std::size_t i = 0; i < d.size(); ++i) CHECK(d[i].score == ref[i].score);
  }
  for (const auto& d : ref) {
    CHECK(d.score >= 0.0);
    CHECK(d.score <= 1.0);
  }
}

TEST_CASE("losses are finite and respect the ladder") {
  for (auto m : {TrainingMode::kBaseline, TrainingMode::kFld, TrainingMode::kFldDn,
                 TrainingMode::kFldVdn}) {
    DetectorConfig cfg = small_config();
    apply_mode(cfg, m);
    auto p = create_params(cfg, 7);
    const auto scene = scene_for(cfg, 6, 3);
    Rng rng(3);
    const ForwardResult f = forward_train(*p, cfg, scene, prepare_step(scene, cfg, rng));
    const LossTerms t = compute_losses(*p, cfg, scene, f, cfg.denoising.beta);
    CAPTURE(mode_name(m));
    CHECK(std::isfinite(t.total.item()));
    CHECK(t.det.item() > 0.0);
    if (m == TrainingMode::kBaseline) CHECK(t.distill.item() == 0.0);
    else CHECK(t.distill.item() > 0.0);
    if (m == TrainingMode::kBaseline || m == TrainingMode::kFld) CHECK(t.dn.item() == 0.0);
    else CHECK(t.dn.item() > 0.0);
    if (m == TrainingMode::kFldVdn) CHECK(t.kl.item() > 0.0);
    else CHECK(t.kl.item() == 0.0);
    const double expect = overall_loss(t.det.item(), t.dn.item(), t.distill.item(),
                                       cfg.lambda_det, cfg.lambda_dn, cfg.lambda_distill);
    CHECK(t.total.item() == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("scenes without objects train on classification only") {
  DetectorConfig cfg = small_config();
  apply_mode(cfg, TrainingMode::kFldVdn);
  auto p = create_params(cfg, 8);
  auto scene = scene_for(cfg, 7, 1);
  scene.objects.clear();
  Rng rng(4);
  const ForwardResult f = forward_train(*p, cfg, scene, prepare_step(scene, cfg, rng));
  CHECK(f.trace.group_size() == cfg.queries);
  const LossTerms t = compute_losses(*p, cfg, scene, f, cfg.denoising.beta);
  CHECK(std::isfinite(t.total.item()));
  CHECK(t.dn.item() == 0.0);
  CHECK(t.distill.item() == 0.0);
  backward(t.total);
}

TEST_CASE("detection loss with a hand assignment") {
  // One query, one class, single layer and group: focal + regression terms
  // computed directly.
  Prediction pred;
  pred.logits = Tensor::matrix({{0.3}});
  pred.center = Tensor::matrix({{0.5, 0.5}});
  pred.lrtb = Tensor::matrix({{0.1, 0.1, 0.1, 0.1}});
  pred.dims = Tensor::matrix({{4.0, 1.6, 1.5}});
  pred.angle = Tensor::matrix({{0.0, 1.0}});
  pred.depth = Tensor::matrix({{20.0}});
  geometry::GroundTruthObject gt;
  gt.category = 0;
  gt.x_c = 0.5;
  gt.y_c = 0.5;
  gt.l = gt.r = gt.t = gt.b = 0.1;
  gt.l3d = 4.0;
  gt.w3d = 1.6;
  gt.h3d = 1.5;
  gt.theta = 0.0;
  gt.depth = 22.0;
  matching::Assignment a;
  a.pairs = {{0, 0}};
  LossWeights w;
  const std::vector<geometry::GroundTruthObject> gts{gt};
  const Tensor loss = detection_loss({{pred}}, {{a}}, gts, w);

  const double prob = 1.0 / (1.0 + std::exp(-0.3));
  const double focal = w.focal_alpha * std::pow(1.0 - prob, w.focal_gamma) * -std::log(prob);
  // Only depth differs: |20 - 22| = 2 under L1.
  const double expect = w.cls * focal + w.depth * 2.0;
  CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("end to end gradients with frozen matching") {
  for (auto m : {TrainingMode::kFldDn, TrainingMode::kFldVdn, TrainingMode::kBaseline}) {
    DetectorConfig cfg = tiny_config();
    apply_mode(cfg, m);
    cfg.noisy_groups = m == TrainingMode::kBaseline ? 0 : 1;
    auto p = create_params(cfg, 11);
    const auto scene = scene_for(cfg, 8, 1);
    Rng rng(5);
    const StepInputs in = prepare_step(scene, cfg, rng);
    FrozenStep frozen;
    auto loss_fn = [&] {
      const ForwardResult f = forward_train(*p, cfg, scene, in);
      return compute_losses(*p, cfg, scene, f, cfg.denoising.beta, &frozen).total;
    };
    loss_fn();
    REQUIRE(frozen.filled);
    const auto report = check_gradients(loss_fn, all_parameters(*p));
    CAPTURE(mode_name(m));
    CHECK(report.entries > 500);
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("encoder gradients") {
  const DetectorConfig cfg = tiny_config();
  auto p = create_params(cfg, 12);
  const auto scene = scene_for(cfg, 9);
  const auto& e = p->encoder;
  auto loss_fn = [&] {
    const Tensor m = encode_features(*p, cfg, scene.features);
    return mean(mul(m, m));
  };
  const auto report = check_gradients(
      loss_fn, {e.w_in, e.b_in, e.norm1.gain, e.self.wq, e.self.wv, e.ffn.w1, e.ffn.b2});
  CHECK(report.max_rel_error < 1e-5);
}

TEST_CASE("forward and losses are deterministic") {
  DetectorConfig cfg = small_config();
  apply_mode(cfg, TrainingMode::kFldVdn);
  auto run = [&] {
    auto p = create_params(cfg, 13);
    const auto scene = scene_for(cfg, 10, 2);
    Rng rng(6);
    const ForwardResult f = forward_train(*p, cfg, scene, prepare_step(scene, cfg, rng));
    const LossTerms t = compute_losses(*p, cfg, scene, f, cfg.denoising.beta);
    backward(t.total);
    return std::make_pair(t.total.item(), p->query_content.grad());
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("point encoding agrees with the grid encoding at cell centers") {
  const std::size_t f = 5, d = 12;
  std::vector<double> pts;
  for (std::size_t i = 0; i < f; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      pts.push_back((j + 0.5) / f);
      pts.push_back((i + 0.5) / f);
    }
  const Tensor pe = point_encoding(Tensor::from({f * f, 2}, pts), d);
  const Tensor grid = grid_positional_encoding(f, d);
  for (std::size_t i = 0; i < grid.size(); ++i)
    CHECK(std::abs(pe.values()[i] - grid.values()[i]) < 1e-12);
}
