#include "vqd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

#include "vqd/ops.hpp"

namespace vqd::train {

void OptimizerConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw std::invalid_argument("adam betas must lie in [0, 1)");
  if (!(eps > 0)) throw std::invalid_argument("eps must be > 0");
  if (!(decay_factor > 0 && decay_factor <= 1))
    throw std::invalid_argument("decay_factor must lie in (0, 1]");
  for (double f : decay_at)
    if (!(f >= 0 && f <= 1)) throw std::invalid_argument("decay_at entries must lie in [0, 1]");
  if (clip_norm < 0) throw std::invalid_argument("clip_norm must be >= 0");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (!(beta_warmup >= 0 && beta_warmup <= 1))
    throw std::invalid_argument("beta_warmup must lie in [0, 1]");
  if (!(iou_threshold > 0 && iou_threshold < 1))
    throw std::invalid_argument("iou_threshold must lie in (0, 1)");
  optimizer.validate();
}

Adam::Adam(const ParameterStore& store, const OptimizerConfig& cfg) : cfg_(cfg) {
  for (const auto& [name, t] : store) {
    m_.emplace_back(t.size(), 0.0);
    v_.emplace_back(t.size(), 0.0);
  }
}

void Adam::step(ParameterStore& store, double lr) {
  ++steps_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  std::size_t i = 0;
  for (auto& [name, t] : store) {
    const std::vector<double> g = t.grad();
    auto w = t.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < g.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
    ++i;
  }
}

double clip_gradients(ParameterStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : store)
    for (double g : t.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, t] : store)
      for (double& g : t.node()->grad_buffer()) g *= s;
  }
  return norm;
}

double learning_rate(const OptimizerConfig& cfg, std::size_t epoch, std::size_t epochs) {
  double lr = cfg.lr;
  for (double f : cfg.decay_at)
    if (static_cast<double>(epoch) >= f * static_cast<double>(epochs)) lr *= cfg.decay_factor;
  return lr;
}

double beta_schedule(double beta, double warmup, std::size_t epoch, std::size_t epochs) {
  const double ramp = std::ceil(warmup * static_cast<double>(epochs));
  if (ramp <= 0.0) return beta;
  return beta * std::min(1.0, static_cast<double>(epoch + 1) / ramp);
}

Evaluation evaluate(const model::DetectorParams& params, const model::DetectorConfig& cfg,
                    std::span<const scenes::Scene> scenes, double iou_threshold) {
  std::vector<scenes::Detection> dets;
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (const auto& d : model::inference(params, cfg, scenes[s]))
      dets.push_back({s, d.category, d.score, d.box});
  const auto gts = scenes::eval_objects(scenes);
  Evaluation out;
  out.ap40 = scenes::ap40(dets, gts, iou_threshold);
  for (std::size_t c = 0; c < cfg.num_classes; ++c)
    out.per_class.push_back(scenes::ap40_for_class(dets, gts, iou_threshold, static_cast<int>(c)));
  return out;
}

TrainResult train(model::DetectorParams& params, const model::DetectorConfig& cfg,
                  const TrainConfig& tcfg, std::span<const scenes::Scene> train_set,
                  std::span<const scenes::Scene> val_set,
                  const std::optional<std::filesystem::path>& run_dir,
                  const std::function<void(const diagnostics::EpochRecord&)>& on_epoch) {
  cfg.validate();
  tcfg.validate();
  if (train_set.empty()) throw std::invalid_argument("training set is empty");
  std::filesystem::path metrics, timing, checkpoint;
  if (run_dir) {
    std::filesystem::create_directories(*run_dir);
    metrics = *run_dir / "metrics.csv";
    timing = *run_dir / "timing.csv";
    checkpoint = *run_dir / "checkpoint.bin";
    diagnostics::write_run_csv({}, metrics);
    std::filesystem::remove(timing);
  }

  Rng rng(tcfg.seed);
  Adam adam(params.store, tcfg.optimizer);
  TrainResult result;
  bool have_best = false;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng.engine());
    const double lr = learning_rate(tcfg.optimizer, epoch, tcfg.epochs);
    const double beta = beta_schedule(cfg.denoising.beta, tcfg.beta_warmup, epoch, tcfg.epochs);
    diagnostics::MapAccumulator maps;
    diagnostics::EpochRecord rec;
    rec.epoch = epoch + 1;

    for (std::size_t b = 0; b < order.size(); b += tcfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + tcfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - b);
      params.store.zero_grad();
      for (std::size_t i = b; i < end; ++i) {
        const scenes::Scene& scene = train_set[order[i]];
        const model::StepInputs in = model::prepare_step(scene, cfg, rng);
        auto fail = [&] {
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) +
                             ", step " + std::to_string(b / tcfg.batch_size + 1) +
                             ", scene " + std::to_string(scene.scene_id));
        };
        const model::ForwardResult fwd = model::forward_train(params, cfg, scene, in);
        // Matching needs finite costs, so catch a diverged forward first.
        for (double v : fwd.trace.layer_queries.back().values())
          if (!std::isfinite(v)) fail();
        const model::LossTerms t = model::compute_losses(params, cfg, scene, fwd, beta);
        const double total = t.total.item();
        if (!std::isfinite(total)) fail();
        for (const auto& m : fwd.trace.final_maps)
          maps.add(m, fwd.trace.n, fwd.trace.k, fwd.trace.c);
        rec.loss_total += total;
        rec.loss_det += t.det.item();
        rec.loss_dn += t.dn.item();
        rec.loss_reconstruction += t.dn_reconstruction.item();
        rec.loss_kl += t.kl.item();
        rec.loss_distill += t.distill.item();
        backward(scale(t.total, inv));
      }
      clip_gradients(params.store, tcfg.optimizer.clip_norm);
      adam.step(params.store, lr);
    }
    params.store.zero_grad();

    const double count = static_cast<double>(train_set.size());
    for (double* v : {&rec.loss_total, &rec.loss_det, &rec.loss_dn, &rec.loss_reconstruction,
                      &rec.loss_kl, &rec.loss_distill})
      *v /= count;
    rec.negative_entropy = maps.negative_entropy();
    rec.noisy_to_learnable_mass = maps.mass();
    const Evaluation ev = evaluate(params, cfg, val_set, tcfg.iou_threshold);
    rec.val_ap40 = ev.ap40.value_or(0.0);
    if (!have_best || rec.val_ap40 > result.best_val_ap) {
      have_best = true;
      result.best_val_ap = rec.val_ap40;
      result.best_epoch = rec.epoch;
      if (run_dir) save_checkpoint(params.store, checkpoint);
    }
    rec.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (run_dir) {
      diagnostics::append_run_csv(rec, metrics);
      diagnostics::append_timing_csv(rec, timing);
    }
    result.records.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace vqd::train
