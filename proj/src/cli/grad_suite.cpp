#include "vqd/grad_suite.hpp"

#include <algorithm>
#include <functional>
#include <map>

#include "vqd/attention.hpp"
#include "vqd/distill.hpp"
#include "vqd/gradcheck.hpp"
#include "vqd/model.hpp"
#include "vqd/ops.hpp"
#include "vqd/vqg.hpp"

namespace vqd {

namespace {

constexpr double kOpTolerance = 1e-5;
constexpr double kEndToEndTolerance = 1e-4;

class Suite {
 public:
  Suite(const GradSuiteOptions& o) : opt_(o), rng_(o.seed) {}

  Tensor random(Shape shape, bool grad = true) {
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = rng_.normal();
    return Tensor::from(std::move(shape), std::move(v), grad);
  }

  // Checks a fixed random linear functional of a tensor-valued `fn`, so
  // every output entry reaches the loss.
  void check_output(const std::string& name, const std::function<Tensor()>& fn,
                    std::vector<Tensor> inputs, double tol = kOpTolerance) {
    const Tensor w = random(fn().shape(), false);
    check(name, [fn, w] { return weighted_sum(fn(), w); }, std::move(inputs), tol);
  }

  void check(const std::string& name, const std::function<Tensor()>& fn,
             std::vector<Tensor> inputs, double tol = kOpTolerance) {
    std::function<Tensor()> loss = fn;
    if (opt_.perturb != 0.0)
      loss = [&, fn, inputs] {
        double extra = 0.0;
        for (const auto& t : inputs)
          for (double v : t.values()) extra += v * v;
        return add(fn(), Tensor::scalar(opt_.perturb * extra));
      };
    const auto report = check_gradients(loss, inputs);
    auto it = index_.find(name);
    if (it == index_.end()) {
      index_[name] = results_.size();
      results_.push_back({name, report.max_rel_error, tol, report.entries});
    } else {
      auto& r = results_[it->second];
      r.max_rel_error = std::max(r.max_rel_error, report.max_rel_error);
      r.entries += report.entries;
    }
  }

  std::size_t size(std::size_t lo, std::size_t hi) {
    return static_cast<std::size_t>(rng_.integer(lo, hi));
  }
  Rng& rng() { return rng_; }
  std::vector<OpCheck> take() { return std::move(results_); }

 private:
  GradSuiteOptions opt_;
  Rng rng_;
  std::vector<OpCheck> results_;
  std::map<std::string, std::size_t> index_;
};

void tensor_ops(Suite& s) {
  const std::size_t m = s.size(1, 4), k = s.size(2, 5), n = s.size(1, 4);
  Tensor a = s.random({m, k}), b = s.random({m, k}), c = s.random({k, n});
  Tensor ct = s.random({n, k}), row = s.random({k}), bias = s.random({n});
  s.check_output("matmul", [&] { return matmul(a, c); }, {a, c});
  s.check_output("matmul_nt", [&] { return matmul_nt(a, ct); }, {a, ct});
  s.check_output("linear", [&] { return linear(a, c, bias); }, {a, c, bias});
  s.check_output("add", [&] { return add(a, b); }, {a, b});
  s.check_output("sub", [&] { return sub(a, b); }, {a, b});
  s.check_output("mul", [&] { return mul(a, b); }, {a, b});
  s.check_output("add_row", [&] { return add_row(a, row); }, {a, row});
  s.check_output("scale", [&] { return scale(a, -1.7); }, {a});
  s.check_output("add_scalar", [&] { return add_scalar(a, 0.3); }, {a});
  s.check_output("relu", [&] { return relu(a); }, {a});
  s.check_output("sigmoid", [&] { return sigmoid(a); }, {a});
  s.check_output("softplus", [&] { return softplus(a); }, {a});
  s.check_output("exp", [&] { return exp(a); }, {a});
  s.check_output("sin", [&] { return sin(a); }, {a});
  s.check_output("clamp", [&] { return clamp(a, -0.5, 0.5); }, {a});

  std::vector<std::uint8_t> allow(m * k);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < k; ++j) allow[i * k + j] = s.rng().bernoulli(0.7);
    allow[i * k + s.size(0, k - 1)] = 1;
  }
  const MaskView mask{m, k, allow};
  s.check_output("softmax_rows", [&] { return softmax_rows(a, &mask); }, {a});
  Tensor gain = s.random({k}), beta = s.random({k});
  s.check_output("layer_norm", [&] { return layer_norm(a, gain, beta); },
          {a, gain, beta});

  Tensor tall = s.random({n, k}), wide = s.random({m, n});
  s.check_output("concat_rows", [&] {
    const Tensor parts[] = {a, tall};
    return concat_rows(parts);
  }, {a, tall});
  s.check_output("concat_cols", [&] {
    const Tensor parts[] = {a, wide};
    return concat_cols(parts);
  }, {a, wide});
  s.check_output("slice_rows", [&] { return slice_rows(a, m - 1, 1); }, {a});
  s.check_output("slice_cols", [&] { return slice_cols(a, 1, k - 1); }, {a});
  const std::vector<std::size_t> idx{m - 1, 0, m - 1};
  s.check_output("gather_rows", [&] { return gather_rows(a, idx); }, {a});
  s.check("sum", [&] { return sum(mul(a, b)); }, {a, b});
  s.check("mean", [&] { return mean(mul(a, b)); }, {a, b});
  const Tensor w = s.random({m, k}, false);
  s.check("weighted_sum", [&] { return weighted_sum(mul(a, a), w); }, {a});
}

void loss_ops(Suite& s) {
  const std::size_t m = s.size(1, 4), k = s.size(1, 5);
  Tensor a = s.random({m, k}), b = s.random({m, k});
  std::vector<double> rw(m);
  for (double& v : rw) v = s.rng().uniform(0.2, 1.0);
  s.check("smooth_l1", [&] { return smooth_l1(scale(a, 2.0), b); }, {a, b});
  s.check("weighted_smooth_l1", [&] { return weighted_smooth_l1(scale(a, 2.0), b, rw); },
          {a, b});
  s.check("weighted_l1", [&] { return weighted_l1(a, b, rw); }, {a, b});
  s.check("gaussian_kl", [&] { return gaussian_kl(a, b); }, {a, b});
  std::vector<double> tv(m * k);
  for (double& v : tv) v = s.rng().bernoulli(0.3) ? 1.0 : 0.0;
  const Tensor targets = Tensor::from({m, k}, tv);
  s.check("sigmoid_focal_loss",
          [&] { return sigmoid_focal_loss(scale(a, 2.0), targets, 0.25, 2.0); }, {a});

  auto boxes = [&] {
    std::vector<double> v(m * 4);
    for (std::size_t r = 0; r < m; ++r) {
      v[r * 4 + 0] = s.rng().uniform(0.0, 1.0);
      v[r * 4 + 1] = s.rng().uniform(0.0, 1.0);
      v[r * 4 + 2] = v[r * 4 + 0] + s.rng().uniform(0.1, 1.0);
      v[r * 4 + 3] = v[r * 4 + 1] + s.rng().uniform(0.1, 1.0);
    }
    return Tensor::from({m, 4}, std::move(v), true);
  };
  Tensor p = boxes(), t = boxes();
  s.check("giou_loss", [&] { return giou_loss(p, t, rw); }, {p, t});
}

void attention_ops(Suite& s) {
  const std::size_t heads = s.size(1, 2), d = heads * s.size(1, 3);
  const std::size_t sq = s.size(1, 4), sk = s.size(1, 4);
  Tensor q = s.random({sq, d}), k = s.random({sk, d}), v = s.random({sk, d});
  std::vector<std::uint8_t> allow(sq * sk);
  for (std::size_t i = 0; i < sq; ++i) {
    for (std::size_t j = 0; j < sk; ++j) allow[i * sk + j] = s.rng().bernoulli(0.7);
    allow[i * sk + s.size(0, sk - 1)] = 1;
  }
  const MaskView mask{sq, sk, allow};
  s.check_output("multihead_attention",
          [&] { return multihead_attention(q, k, v, heads, &mask); }, {q, k, v});

  const std::size_t n = s.size(1, 3), kk = s.size(0, 2), c = s.size(0, 2);
  const std::size_t width = 4;
  ParameterStore store(s.rng().next());
  const auto params = attention::AttentionParams::create(store, "a", width);
  const auto dmask = attention::build_denoising_mask(n, kk, c);
  Tensor x = s.random({dmask.size, width});
  s.check_output("masked_self_attention", [&] {
    return attention::masked_multihead_self_attention(x, dmask, params, 2).output;
  }, {x, params.wq, params.wk, params.wv, params.wo, params.bo});
  Tensor stacked = s.random({2 * dmask.size, width});
  s.check_output("separated_group_attention", [&] {
    return attention::separated_group_attention(stacked, 2, dmask, params, 2).output;
  }, {stacked, params.wq, params.bk});
}

void denoising_ops(Suite& s) {
  const std::size_t width = 6, rows = s.size(1, 3);
  ParameterStore store(s.rng().next());
  const auto gen = vqg::GeneratorParams::create(store, "g", 3, width);
  std::vector<vqg::NoisyBox> boxes;
  for (std::size_t i = 0; i < rows; ++i) {
    vqg::NoisyBox b;
    b.anchor = {s.rng().uniform(0.2, 0.8), s.rng().uniform(0.2, 0.8), 0.05, 0.06, 0.04, 0.07};
    b.attrs = {static_cast<int>(s.size(0, 2)), 4.0, 1.7, 1.5, s.rng().uniform(-3, 3),
               s.rng().uniform(5, 40)};
    boxes.push_back(b);
  }
  std::vector<Tensor> gen_inputs;
  for (auto& [name, t] : store) gen_inputs.push_back(t);
  s.check_output("encode_noisy_box", [&] {
    const auto d = vqg::encode_noisy_box(gen, boxes);
    return add(d.mu, d.log_var);
  }, gen_inputs);

  Tensor mu = s.random({rows, width}), log_var = s.random({rows, width});
  const Tensor eps = vqg::draw_epsilon(rows, width, s.rng());
  s.check_output("sample_reparameterized", [&] {
    return vqg::sample_reparameterized({mu, log_var}, eps,
                                                 vqg::DenoisingMode::kVariational);
  }, {mu, log_var});

  ParameterStore rstore(s.rng().next());
  const auto refiner = distill::Refiner::create(rstore, "r", width);
  const std::size_t layers = 3, total = 5;
  std::vector<Tensor> qs;
  for (std::size_t l = 0; l < layers; ++l) qs.push_back(s.random({total, width}));
  const Tensor teacher = s.random({total, width}, false);
  std::vector<distill::DistillSet> sets{{{0, 2, 4}, {0.3, 0.9, 0.5}}, {{1, 3}, {0.7, 0.2}}};
  std::vector<Tensor> dist_inputs(qs.begin(), qs.end() - 1);
  for (auto& [name, t] : rstore) dist_inputs.push_back(t);
  s.check("forward_looking_distill", [&] {
    return distill::forward_looking_distill(qs, sets, refiner, &teacher);
  }, dist_inputs);
}

void prediction_ops(Suite& s) {
  const std::size_t rows = 4;
  auto positive = [&](std::size_t cols, double lo, double hi) {
    std::vector<double> v(rows * cols);
    for (double& x : v) x = s.rng().uniform(lo, hi);
    return Tensor::from({rows, cols}, std::move(v), true);
  };
  model::Prediction p;
  p.logits = s.random({rows, 3});
  p.center = positive(2, 0.2, 0.8);
  p.lrtb = positive(4, 0.03, 0.2);
  p.dims = positive(3, 1.0, 5.0);
  p.angle = s.random({rows, 2});
  p.depth = positive(1, 5.0, 40.0);
  std::vector<geometry::GroundTruthObject> gts(2);
  for (auto& g : gts) {
    g.category = static_cast<int>(s.size(0, 2));
    g.x_c = s.rng().uniform(0.2, 0.8);
    g.y_c = s.rng().uniform(0.2, 0.8);
    g.l = g.r = g.t = g.b = s.rng().uniform(0.02, 0.2);
    g.l3d = 4.0;
    g.w3d = 1.7;
    g.h3d = 1.5;
    g.theta = s.rng().uniform(-3, 3);
    g.depth = s.rng().uniform(5, 40);
  }
  const model::MatchPairs pairs{{1, 0}, {3, 1}};
  s.check("set_prediction_loss", [&] {
    return model::set_prediction_loss(p, pairs, gts, model::LossWeights{}, 2.0)
        .total(model::LossWeights{});
  }, {p.logits, p.center, p.lrtb, p.dims, p.angle, p.depth});
}

void end_to_end(Suite& s, std::uint64_t seed) {
  model::DetectorConfig cfg;
  cfg.groups = 2;
  cfg.queries = 2;
  cfg.width = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.grid = 4;
  cfg.ffn_width = 8;
  model::apply_mode(cfg, model::TrainingMode::kFldVdn);
  cfg.noisy_groups = 1;
  auto params = model::create_params(cfg, seed + 1);
  scenes::SceneConfig sc;
  sc.grid = cfg.grid;
  const auto scene = scenes::generate_scene(seed, seed + 2, sc, 1);
  Rng rng(seed + 3);
  const auto inputs = model::prepare_step(scene, cfg, rng);
  model::FrozenStep frozen;
  auto loss = [&] {
    const auto f = model::forward_train(*params, cfg, scene, inputs);
    return model::compute_losses(*params, cfg, scene, f, cfg.denoising.beta, &frozen).total;
  };
  loss();
  std::vector<Tensor> all;
  for (auto& [name, t] : params->store) all.push_back(t);
  s.check("end_to_end_model", loss, all, kEndToEndTolerance);
}

}  // namespace

std::vector<OpCheck> run_gradient_suite(const GradSuiteOptions& options) {
  Suite s(options);
  for (int t = 0; t < std::max(1, options.trials); ++t) {
    tensor_ops(s);
    loss_ops(s);
    attention_ops(s);
    denoising_ops(s);
    prediction_ops(s);
  }
  end_to_end(s, options.seed);
  return s.take();
}

}  // namespace vqd
