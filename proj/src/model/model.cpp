#include "vqd/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "vqd/ops.hpp"

namespace vqd::model {

namespace {

using attention::AttentionMask;
using attention::AttentionParams;

LayerNormParams make_norm(ParameterStore& s, const std::string& name, std::size_t d) {
  return {s.add_constant(name + ".gain", {d}, 1.0), s.add_constant(name + ".bias", {d}, 0.0)};
}

FeedForwardParams make_ffn(ParameterStore& s, const std::string& name, std::size_t d,
                           std::size_t hidden) {
  return {s.add_normal(name + ".w1", {d, hidden}, 1.0 / std::sqrt(static_cast<double>(d))),
          s.add_constant(name + ".b1", {hidden}, 0.0),
          s.add_normal(name + ".w2", {hidden, d}, 1.0 / std::sqrt(static_cast<double>(hidden))),
          s.add_constant(name + ".b2", {d}, 0.0)};
}

Tensor norm(const Tensor& x, const LayerNormParams& p) { return layer_norm(x, p.gain, p.bias); }

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

double logit(double p) {
  const double q = std::clamp(p, 1e-3, 1.0 - 1e-3);
  return std::log(q / (1.0 - q));
}

// Positional embedding of 6D anchors: sinusoidal center code plus extents,
// through a two-layer MLP.
Tensor anchor_embedding(const DetectorParams& p, const Tensor& centers, const Tensor& lrtb) {
  const Tensor parts[] = {point_encoding(centers, p.w_pos2.cols()), lrtb};
  return linear(relu(linear(concat_cols(parts), p.w_pos1, p.b_pos1)), p.w_pos2, p.b_pos2);
}

const Tensor& cached_grid_encoding(std::size_t grid, std::size_t width) {
  static thread_local std::map<std::pair<std::size_t, std::size_t>, Tensor> cache;
  const auto key = std::make_pair(grid, width);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, grid_positional_encoding(grid, width)).first;
  return it->second;
}

}  // namespace

const char* mode_name(TrainingMode mode) {
  switch (mode) {
    case TrainingMode::kBaseline: return "baseline";
    case TrainingMode::kFld: return "fld";
    case TrainingMode::kFldDn: return "fld+dn";
    case TrainingMode::kFldVdn: return "fld+vdn";
  }
  return "?";
}

std::optional<TrainingMode> parse_mode(std::string_view text) {
  for (TrainingMode m : {TrainingMode::kBaseline, TrainingMode::kFld, TrainingMode::kFldDn,
                         TrainingMode::kFldVdn})
    if (text == mode_name(m)) return m;
  return std::nullopt;
}

void DetectorConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument(what); };
  if (groups == 0) fail("groups must be >= 1");
  if (queries == 0) fail("queries must be >= 1");
  if (width == 0 || heads == 0 || width % heads != 0) fail("width must be divisible by heads");
  if (width < 2) fail("width must be >= 2");
  if (layers == 0) fail("layers must be >= 1");
  if (num_classes == 0) fail("num_classes must be >= 1");
  if (grid == 0) fail("grid must be >= 1");
  if (input_channels == 0) fail("input_channels must be >= 1");
  if (ffn_width == 0) fail("ffn_width must be >= 1");
  if (lambda_det < 0 || lambda_dn < 0 || lambda_distill < 0) fail("loss weights must be >= 0");
  if (!(confidence_threshold >= 0.0 && confidence_threshold <= 1.0))
    fail("confidence_threshold must lie in [0, 1]");
  for (double d : dim_prior)
    if (!(d > 0)) fail("dim_prior entries must be > 0");
  if (!(depth_prior > 0)) fail("depth_prior must be > 0");
  noise.validate();
  denoising.validate();
}

void apply_mode(DetectorConfig& cfg, TrainingMode mode) {
  switch (mode) {
    case TrainingMode::kBaseline:
      cfg.lambda_dn = 0.0;
      cfg.lambda_distill = 0.0;
      cfg.noisy_groups = 0;
      break;
    case TrainingMode::kFld:
      cfg.lambda_dn = 0.0;
      cfg.noisy_groups = 0;
      break;
    case TrainingMode::kFldDn:
      cfg.denoising.mode = vqg::DenoisingMode::kDeterministic;
      cfg.denoising.beta = 0.0;
      break;
    case TrainingMode::kFldVdn:
      cfg.denoising.mode = vqg::DenoisingMode::kVariational;
      break;
  }
}

std::unique_ptr<DetectorParams> create_params(const DetectorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto p = std::make_unique<DetectorParams>(seed);
  ParameterStore& s = p->store;
  const std::size_t d = cfg.width;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));

  p->encoder.w_in = s.add_normal("enc.w_in", {cfg.input_channels, d},
                                 1.0 / std::sqrt(static_cast<double>(cfg.input_channels)));
  p->encoder.b_in = s.add_constant("enc.b_in", {d}, 0.0);
  p->encoder.norm1 = make_norm(s, "enc.norm1", d);
  p->encoder.self = AttentionParams::create(s, "enc.self", d);
  p->encoder.norm2 = make_norm(s, "enc.norm2", d);
  p->encoder.ffn = make_ffn(s, "enc.ffn", d, cfg.ffn_width);

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string pre = "dec" + std::to_string(l);
    DecoderLayerParams layer;
    layer.norm1 = make_norm(s, pre + ".norm1", d);
    layer.self = AttentionParams::create(s, pre + ".self", d);
    layer.norm2 = make_norm(s, pre + ".norm2", d);
    layer.cross = AttentionParams::create(s, pre + ".cross", d);
    layer.norm3 = make_norm(s, pre + ".norm3", d);
    layer.ffn = make_ffn(s, pre + ".ffn", d, cfg.ffn_width);
    p->decoder.push_back(std::move(layer));
  }

  const std::size_t rows = cfg.groups * cfg.queries;
  p->query_content = s.add_normal("query.content", {rows, d}, 0.02);
  // References spread over the image.
  Rng rng(seed ^ 0x5eedULL);
  std::vector<double> refs(rows * 2);
  for (double& r : refs) r = logit(rng.uniform(0.1, 0.9));
  p->query_reference = s.add("query.reference", Tensor::from({rows, 2}, std::move(refs)));
  p->w_pos1 = s.add_normal("pos.w1", {d + 4, d}, 1.0 / std::sqrt(static_cast<double>(d)));
  p->b_pos1 = s.add_constant("pos.b1", {d}, 0.0);
  p->w_pos2 = s.add_normal("pos.w2", {d, d}, sd);
  p->b_pos2 = s.add_constant("pos.b2", {d}, 0.0);

  p->generator = vqg::GeneratorParams::create(s, "vqg", cfg.num_classes, d);
  p->refiner = distill::Refiner::create(s, "refiner", d);
  p->refiner.identity = cfg.refiner_identity;

  p->heads.norm = make_norm(s, "head.norm", d);
  p->heads.w_cls = s.add_normal("head.w_cls", {d, cfg.num_classes}, 0.01);
  // Prior probability 0.01 per class.
  p->heads.b_cls = s.add_constant("head.b_cls", {cfg.num_classes}, -std::log(99.0));
  p->heads.w_reg1 = s.add_normal("head.w_reg1", {d, d}, sd);
  p->heads.b_reg1 = s.add_constant("head.b_reg1", {d}, 0.0);
  p->heads.w_reg2 = s.add_normal("head.w_reg2", {d, 12}, 0.01);
  p->heads.b_reg2 = s.add_constant("head.b_reg2", {12}, 0.0);
  return p;
}

Tensor grid_positional_encoding(std::size_t grid, std::size_t width) {
  const std::size_t half = width / 2;
  std::vector<double> v(grid * grid * width, 0.0);
  for (std::size_t i = 0; i < grid; ++i)
    for (std::size_t j = 0; j < grid; ++j) {
      double* row = v.data() + (i * grid + j) * width;
      const double coord[2] = {(i + 0.5) / grid, (j + 0.5) / grid};
      for (int axis = 0; axis < 2; ++axis) {
        const std::size_t base = axis * half;
        const std::size_t span = axis == 0 ? half : width - half;
        for (std::size_t c = 0; c < span; ++c) {
          const double freq = std::pow(2.0, static_cast<double>(c / 2)) * M_PI;
          row[base + c] = (c % 2 == 0) ? std::sin(freq * coord[axis])
                                       : std::cos(freq * coord[axis]);
        }
      }
    }
  return Tensor::from({grid * grid, width}, std::move(v));
}

Tensor point_encoding(const Tensor& points, std::size_t width) {
  const std::size_t half = width / 2;
  std::vector<double> freq(2 * width, 0.0), phase(width, 0.0);
  for (std::size_t axis = 0; axis < 2; ++axis) {
    const std::size_t base = axis * half;
    const std::size_t span = axis == 0 ? half : width - half;
    for (std::size_t c = 0; c < span; ++c) {
      freq[(1 - axis) * width + base + c] = std::pow(2.0, static_cast<double>(c / 2)) * M_PI;
      phase[base + c] = (c % 2 == 0) ? 0.0 : M_PI / 2.0;
    }
  }
  return sin(add_row(matmul(points, Tensor::from({2, width}, std::move(freq))),
                     Tensor::from({width}, std::move(phase))));
}

Tensor encode_features(const DetectorParams& params, const DetectorConfig& cfg,
                       std::span<const double> features) {
  const std::size_t tokens = cfg.grid * cfg.grid;
  if (features.size() != tokens * cfg.input_channels)
    throw DimensionError("feature grid holds " + std::to_string(features.size()) +
                         " values, expected " + std::to_string(tokens * cfg.input_channels));
  const auto& e = params.encoder;
  const Tensor grid =
      Tensor::from({tokens, cfg.input_channels}, {features.begin(), features.end()});
  Tensor x = add(linear(grid, e.w_in, e.b_in), cached_grid_encoding(cfg.grid, cfg.width));
  const Tensor h = norm(x, e.norm1);
  const Tensor q = linear(h, e.self.wq, e.self.bq);
  const Tensor k = linear(h, e.self.wk, e.self.bk);
  const Tensor v = linear(h, e.self.wv, e.self.bv);
  x = add(x, linear(multihead_attention(q, k, v, cfg.heads, nullptr), e.self.wo, e.self.bo));
  return add(x, feed_forward(norm(x, e.norm2), e.ffn));
}

Prediction apply_heads(const DetectorParams& params, const DetectorConfig& cfg,
                       const Tensor& queries, const Tensor& reference_logits) {
  const HeadParams& h = params.heads;
  const Tensor x = norm(queries, h.norm);
  Prediction p;
  p.logits = linear(x, h.w_cls, h.b_cls);
  const Tensor reg = linear(relu(linear(x, h.w_reg1, h.b_reg1)), h.w_reg2, h.b_reg2);
  p.center = sigmoid(add(reference_logits, slice_cols(reg, 0, 2)));
  p.lrtb = scale(softplus(slice_cols(reg, 2, 4)), 0.1);
  const std::array<double, 3>& prior = cfg.dim_prior;
  const Tensor log_prior = Tensor::from(
      {3}, {std::log(prior[0]), std::log(prior[1]), std::log(prior[2])});
  p.dims = exp(add_row(clamp(slice_cols(reg, 6, 3), -3.0, 3.0), log_prior));
  p.angle = slice_cols(reg, 9, 2);
  p.depth = exp(add_scalar(clamp(slice_cols(reg, 11, 1), -4.0, 4.0),
                           std::log(cfg.depth_prior)));
  return p;
}

DecoderTrace decoder_forward(const DetectorParams& params, const DetectorConfig& cfg,
                             const Tensor& memory,
                             const attention::GroupQuerySet& queries,
                             const AttentionMask& mask, const Tensor& reference_logits,
                             const Tensor& query_pos) {
  queries.validate();
  DecoderTrace trace;
  trace.groups = queries.groups.size();
  trace.n = queries.n;
  trace.k = queries.k;
  trace.c = queries.c;
  Tensor x = trace.groups == 1 ? queries.groups[0] : concat_rows(queries.groups);
  if (reference_logits.rows() != x.rows() || reference_logits.cols() != 2)
    throw DimensionError("reference logits " + shape_string(reference_logits.shape()) +
                         " for " + std::to_string(x.rows()) + " queries");
  if (query_pos.rows() != x.rows() || query_pos.cols() != x.cols())
    throw DimensionError("positional queries " + shape_string(query_pos.shape()) + " for " +
                         shape_string(x.shape()));
  const Tensor keyed = add(memory, cached_grid_encoding(cfg.grid, cfg.width));
  for (std::size_t l = 0; l < params.decoder.size() && l < cfg.layers; ++l) {
    const DecoderLayerParams& layer = params.decoder[l];
    auto sa = attention::separated_group_attention(add(norm(x, layer.norm1), query_pos),
                                                   trace.groups, mask, layer.self, cfg.heads);
    x = add(x, sa.output);
    const Tensor h = add(norm(x, layer.norm2), query_pos);
    const Tensor q = linear(h, layer.cross.wq, layer.cross.bq);
    const Tensor k = linear(keyed, layer.cross.wk, layer.cross.bk);
    const Tensor v = linear(memory, layer.cross.wv, layer.cross.bv);
    x = add(x, linear(multihead_attention(q, k, v, cfg.heads, nullptr), layer.cross.wo,
                      layer.cross.bo));
    x = add(x, feed_forward(norm(x, layer.norm3), layer.ffn));
    trace.layer_queries.push_back(x);
    trace.layer_predictions.push_back(apply_heads(params, cfg, x, reference_logits));
    if (l + 1 == cfg.layers) trace.final_maps = std::move(sa.maps);
  }
  return trace;
}

StepInputs prepare_step(const scenes::Scene& scene, const DetectorConfig& cfg, Rng& rng) {
  StepInputs in;
  const std::size_t k = scene.objects.size(), c = cfg.noisy_groups;
  in.noisy.resize(cfg.groups);
  in.eps.resize(cfg.groups);
  for (std::size_t g = 0; g < cfg.groups; ++g) {
    for (std::size_t j = 0; j < c; ++j)
      for (const auto& obj : scene.objects) {
        auto [anchor, attrs] =
            geometry::apply_box_noise(obj, cfg.noise, static_cast<int>(cfg.num_classes), rng);
        in.noisy[g].push_back({anchor, attrs});
      }
    in.eps[g] = vqg::draw_epsilon(k * c, cfg.width, rng);
  }
  return in;
}

namespace {

// Builds the stacked queries and reference logits for `groups` groups with
// the given noisy content (empty when C = 0).
struct QueryBuild {
  attention::GroupQuerySet set;
  Tensor reference;
  Tensor pos;
};

QueryBuild build_queries(const DetectorParams& params, const DetectorConfig& cfg,
                         std::size_t groups, std::size_t k, std::size_t c,
                         const std::vector<Tensor>& noisy_content,
                         const std::vector<std::vector<vqg::NoisyBox>>& noisy_boxes) {
  const std::size_t n = cfg.queries;
  QueryBuild out;
  out.set.n = n;
  out.set.k = k;
  out.set.c = c;
  const bool all = groups == cfg.groups;
  const Tensor content = all ? params.query_content : slice_rows(params.query_content, 0, groups * n);
  const Tensor refs = all ? params.query_reference
                          : slice_rows(params.query_reference, 0, groups * n);
  // Learnable anchors carry a center only.
  const Tensor learn_pos =
      anchor_embedding(params, sigmoid(refs), Tensor::zeros({groups * n, 4}));

  std::vector<Tensor> ref_parts, pos_parts;
  for (std::size_t g = 0; g < groups; ++g) {
    const Tensor lg = slice_rows(content, g * n, n);
    ref_parts.push_back(slice_rows(refs, g * n, n));
    pos_parts.push_back(slice_rows(learn_pos, g * n, n));
    if (k * c == 0) {
      out.set.groups.push_back(lg);
      continue;
    }
    std::vector<double> centers, extents, ref_vals;
    for (const auto& b : noisy_boxes[g]) {
      centers.push_back(b.anchor.x_c);
      centers.push_back(b.anchor.y_c);
      extents.insert(extents.end(), {b.anchor.l, b.anchor.r, b.anchor.t, b.anchor.b});
      ref_vals.push_back(logit(b.anchor.x_c));
      ref_vals.push_back(logit(b.anchor.y_c));
    }
    const Tensor parts[] = {lg, noisy_content[g]};
    out.set.groups.push_back(concat_rows(parts));
    ref_parts.push_back(Tensor::from({k * c, 2}, std::move(ref_vals)));
    pos_parts.push_back(anchor_embedding(params, Tensor::from({k * c, 2}, std::move(centers)),
                                         Tensor::from({k * c, 4}, std::move(extents))));
  }
  out.reference = ref_parts.size() == 1 ? ref_parts[0] : concat_rows(ref_parts);
  out.pos = pos_parts.size() == 1 ? pos_parts[0] : concat_rows(pos_parts);
  return out;
}

}  // namespace

ForwardResult forward_train(const DetectorParams& params, const DetectorConfig& cfg,
                            const scenes::Scene& scene, const StepInputs& inputs) {
  const std::size_t k = scene.objects.size(), c = cfg.noisy_groups;
  ForwardResult out;
  std::vector<Tensor> content;
  if (k * c > 0) {
    std::vector<vqg::NoisyBox> all;
    for (const auto& g : inputs.noisy) all.insert(all.end(), g.begin(), g.end());
    out.latent = vqg::encode_noisy_box(params.generator, all);
    for (std::size_t g = 0; g < cfg.groups; ++g) {
      const vqg::LatentDistribution part{slice_rows(out.latent.mu, g * k * c, k * c),
                                         slice_rows(out.latent.log_var, g * k * c, k * c)};
      content.push_back(vqg::sample_reparameterized(part, inputs.eps[g], cfg.denoising.mode));
    }
  } else {
    out.latent = {Tensor::zeros({0, cfg.width}), Tensor::zeros({0, cfg.width})};
  }
  const QueryBuild q = build_queries(params, cfg, cfg.groups, k, c, content, inputs.noisy);
  const Tensor memory = encode_features(params, cfg, scene.features);
  const AttentionMask mask = attention::build_denoising_mask(cfg.queries, k, c);
  out.trace = decoder_forward(params, cfg, memory, q.set, mask, q.reference, q.pos);
  return out;
}

Tensor detection_loss(const std::vector<std::vector<Prediction>>& layer_groups,
                      const std::vector<std::vector<matching::Assignment>>& assignments,
                      std::span<const geometry::GroundTruthObject> gts,
                      const LossWeights& weights) {
  const double normalizer = std::max<double>(1.0, static_cast<double>(gts.size()));
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < layer_groups.size(); ++l)
    for (std::size_t g = 0; g < layer_groups[l].size(); ++g) {
      const MatchPairs pairs(assignments[l][g].pairs.begin(), assignments[l][g].pairs.end());
      total = add(total, set_prediction_loss(layer_groups[l][g], pairs, gts, weights,
                                             normalizer)
                             .total(weights));
    }
  return total;
}

Tensor overall_loss(const Tensor& det, const Tensor& dn, const Tensor& distill,
                    double lambda_det, double lambda_dn, double lambda_distill) {
  return add(add(scale(det, lambda_det), scale(dn, lambda_dn)), scale(distill, lambda_distill));
}

double overall_loss(double det, double dn, double distill, double lambda_det,
                    double lambda_dn, double lambda_distill) {
  return lambda_det * det + lambda_dn * dn + lambda_distill * distill;
}

LossTerms compute_losses(const DetectorParams& params, const DetectorConfig& cfg,
                         const scenes::Scene& scene, const ForwardResult& fwd,
                         double beta, FrozenStep* frozen) {
  const DecoderTrace& tr = fwd.trace;
  const auto& gts = scene.objects;
  const std::size_t layers = tr.layer_predictions.size(), groups = tr.groups;
  const std::size_t n = tr.n, s = tr.group_size(), k = tr.k, c = tr.c;
  const bool replay = frozen && frozen->filled;

  // Learnable-block predictions per layer and group.
  std::vector<std::vector<Prediction>> learn(layers);
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t g = 0; g < groups; ++g)
      learn[l].push_back(tr.layer_predictions[l].slice(g * s, n));

  std::vector<std::vector<matching::Assignment>> assignments;
  if (replay) {
    assignments = frozen->assignments;
  } else {
    assignments.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      std::vector<std::vector<DecodedQuery>> decoded;
      for (const auto& p : learn[l]) decoded.push_back(decode(p));
      assignments[l] = matching::groupwise_match(decoded, gts, cfg.matcher);
    }
  }

  LossTerms out;
  out.det = detection_loss(learn, assignments, gts, cfg.loss);

  // Denoising: reconstruction on every layer, KL once.
  out.dn_reconstruction = Tensor::scalar(0.0);
  out.kl = Tensor::scalar(0.0);
  const bool denoise = k * c > 0 && cfg.lambda_dn > 0.0;
  if (denoise) {
    vqg::DenoisingConfig res_only = cfg.denoising;
    res_only.beta = 0.0;
    for (std::size_t l = 0; l < layers; ++l) {
      std::vector<Prediction> blocks;
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t j = 0; j < c; ++j)
          blocks.push_back(tr.layer_predictions[l].slice(g * s + n + j * k, k));
      out.dn_reconstruction = add(
          out.dn_reconstruction,
          vqg::denoising_loss(blocks, gts, fwd.latent, res_only, cfg.loss).reconstruction);
    }
    if (cfg.denoising.mode == vqg::DenoisingMode::kVariational)
      out.kl = gaussian_kl(fwd.latent.mu, fwd.latent.log_var);
  }
  out.dn = beta > 0.0 ? add(out.dn_reconstruction, scale(out.kl, beta)) : out.dn_reconstruction;

  // Distillation against the final layer.
  out.distill = Tensor::scalar(0.0);
  if (cfg.lambda_distill > 0.0 && layers > 1) {
    std::vector<distill::DistillSet> sets;
    Tensor teacher;
    if (replay) {
      sets = frozen->distill_sets;
      teacher = frozen->teacher;
    } else {
      teacher = tr.layer_queries.back().detach();
      const std::vector<DecodedQuery> final_all = decode(tr.layer_predictions.back());
      for (std::size_t g = 0; g < groups; ++g) {
        const auto& a = assignments.back()[g];
        const std::span<const DecodedQuery> final_learn(final_all.data() + g * s, n);
        distill::DistillSet learn_set;
        learn_set.weights = distill::iou_weights(final_learn, a, gts, scene.intrinsics);
        for (const auto& [q, gt] : a.pairs) learn_set.rows.push_back(g * s + q);
        sets.push_back(std::move(learn_set));
        if (k * c == 0) continue;
        distill::DistillSet noisy_set;
        for (std::size_t j = 0; j < c; ++j)
          for (std::size_t i = 0; i < k; ++i) {
            const std::size_t row = g * s + n + j * k + i;
            noisy_set.rows.push_back(row);
            noisy_set.weights.push_back(
                geometry::iou3d(final_all[row].box3d(scene.intrinsics),
                                geometry::oriented_box(gts[i], scene.intrinsics)));
          }
        sets.push_back(std::move(noisy_set));
      }
    }
    out.distill = scale(distill::forward_looking_distill(tr.layer_queries, sets,
                                                         params.refiner, &teacher),
                        1.0 / static_cast<double>(groups));
    if (frozen && !replay) {
      frozen->distill_sets = std::move(sets);
      frozen->teacher = teacher;
    }
  }
  if (frozen && !replay) {
    frozen->assignments = std::move(assignments);
    frozen->filled = true;
  }

  out.total = overall_loss(out.det, out.dn, out.distill, cfg.lambda_det,
                           denoise ? cfg.lambda_dn : 0.0, cfg.lambda_distill);
  return out;
}

std::vector<InferenceDetection> inference(const DetectorParams& params,
                                          const DetectorConfig& cfg,
                                          const scenes::Scene& scene) {
  const QueryBuild q = build_queries(params, cfg, 1, 0, 0, {}, {});
  const Tensor memory = encode_features(params, cfg, scene.features);
  const AttentionMask mask = attention::build_denoising_mask(cfg.queries, 0, 0);
  const DecoderTrace tr = decoder_forward(params, cfg, memory, q.set, mask, q.reference, q.pos);
  const std::vector<DecodedQuery> decoded = decode(tr.layer_predictions.back());
  std::vector<InferenceDetection> out;
  for (const auto& d : decoded) {
    const double score = d.score();
    if (score < cfg.confidence_threshold) continue;
    out.push_back({d.best_class(), score, d.box3d(scene.intrinsics), d.corners()});
  }
  return out;
}

}  // namespace vqd::model
