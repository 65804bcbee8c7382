#include "vqd/vqg.hpp"

#include <cmath>
#include <stdexcept>

#include "vqd/ops.hpp"

namespace vqd::vqg {

void DenoisingConfig::validate() const {
  if (!(beta >= 0.0)) throw std::invalid_argument("beta must be >= 0");
}

GeneratorParams GeneratorParams::create(ParameterStore& store,
                                        const std::string& prefix,
                                        std::size_t num_classes,
                                        std::size_t width) {
  GeneratorParams p;
  p.num_classes = num_classes;
  p.width = width;
  const std::size_t e = width / 2;
  const double sd = 1.0 / std::sqrt(static_cast<double>(width));
  p.class_table = store.add_normal(prefix + ".class_table", {num_classes, e}, 1.0);
  p.w_attr = store.add_normal(prefix + ".w_attr", {kBoxFeatures, width - e},
                              1.0 / std::sqrt(static_cast<double>(kBoxFeatures)));
  p.b_attr = store.add_constant(prefix + ".b_attr", {width - e}, 0.0);
  p.w_hidden = store.add_normal(prefix + ".w_hidden", {width, width}, sd);
  p.b_hidden = store.add_constant(prefix + ".b_hidden", {width}, 0.0);
  p.w_mu = store.add_normal(prefix + ".w_mu", {width, width}, sd);
  p.b_mu = store.add_constant(prefix + ".b_mu", {width}, 0.0);
  // Small initial variance keeps early samples close to the mean.
  p.w_logvar = store.add_normal(prefix + ".w_logvar", {width, width}, 0.1 * sd);
  p.b_logvar = store.add_constant(prefix + ".b_logvar", {width}, -2.0);
  return p;
}

std::array<double, kBoxFeatures> box_features(const NoisyBox& box) {
  const auto& a = box.anchor;
  const auto& n = box.attrs;
  return {a.x_c,
          a.y_c,
          a.l,
          a.r,
          a.t,
          a.b,
          std::log(n.l3d),
          std::log(n.w3d),
          std::log(n.h3d),
          std::sin(n.theta),
          std::cos(n.theta),
          std::log(n.depth / 20.0)};
}

LatentDistribution encode_noisy_box(const GeneratorParams& params,
                                    std::span<const NoisyBox> boxes) {
  const std::size_t k = boxes.size(), d = params.width;
  if (k == 0) return {Tensor::zeros({0, d}), Tensor::zeros({0, d})};
  std::vector<std::size_t> cats(k);
  std::vector<double> feats(k * kBoxFeatures);
  for (std::size_t i = 0; i < k; ++i) {
    const int c = boxes[i].attrs.category;
    if (c < 0 || static_cast<std::size_t>(c) >= params.num_classes)
      throw std::out_of_range("noisy box category " + std::to_string(c) +
                              " outside [0, " +
                              std::to_string(params.num_classes) + ")");
    cats[i] = static_cast<std::size_t>(c);
    const auto f = box_features(boxes[i]);
    std::copy(f.begin(), f.end(), feats.begin() + i * kBoxFeatures);
  }
  const Tensor attrs = Tensor::from({k, kBoxFeatures}, std::move(feats));
  const Tensor parts[] = {gather_rows(params.class_table, cats),
                          linear(attrs, params.w_attr, params.b_attr)};
  const Tensor h = relu(linear(concat_cols(parts), params.w_hidden, params.b_hidden));
  return {linear(h, params.w_mu, params.b_mu),
          clamp(linear(h, params.w_logvar, params.b_logvar), kLogVarMin, kLogVarMax)};
}

Tensor draw_epsilon(std::size_t rows, std::size_t width, Rng& rng) {
  std::vector<double> v(rows * width);
  for (double& x : v) x = rng.normal();
  return Tensor::from({rows, width}, std::move(v));
}

Tensor sample_reparameterized(const LatentDistribution& dist, const Tensor& eps,
                              DenoisingMode mode) {
  if (mode == DenoisingMode::kDeterministic || dist.rows() == 0) return dist.mu;
  if (eps.shape() != dist.mu.shape())
    throw DimensionError("epsilon shape " + shape_string(eps.shape()) +
                         " differs from " + shape_string(dist.mu.shape()));
  const Tensor sigma = exp(scale(dist.log_var, 0.5));
  return add(dist.mu, mul(sigma, eps));
}

Tensor sample_reparameterized(const LatentDistribution& dist, Rng& rng,
                              DenoisingMode mode) {
  if (mode == DenoisingMode::kDeterministic) return dist.mu;
  return sample_reparameterized(dist, draw_epsilon(dist.rows(), dist.mu.cols(), rng),
                                mode);
}

DenoisingLoss denoising_loss(const std::vector<model::Prediction>& noisy,
                             std::span<const geometry::GroundTruthObject> gts,
                             const LatentDistribution& dist,
                             const DenoisingConfig& cfg,
                             const model::LossWeights& weights) {
  const std::size_t k = gts.size();
  model::MatchPairs pairs(k);
  for (std::size_t i = 0; i < k; ++i) pairs[i] = {i, i};
  DenoisingLoss out;
  out.reconstruction = Tensor::scalar(0.0);
  if (k > 0 && !noisy.empty()) {
    std::vector<Tensor> terms;
    terms.reserve(noisy.size());
    for (const auto& block : noisy) {
      if (block.rows() != k)
        throw DimensionError("noisy block holds " + std::to_string(block.rows()) +
                             " predictions for " + std::to_string(k) +
                             " ground truths");
      terms.push_back(model::set_prediction_loss(block, pairs, gts, weights,
                                                 static_cast<double>(k))
                          .total(weights));
    }
    Tensor acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    out.reconstruction = scale(acc, 1.0 / static_cast<double>(terms.size()));
  }
  const bool variational = cfg.mode == DenoisingMode::kVariational;
  out.kl = variational && dist.rows() > 0 ? gaussian_kl(dist.mu, dist.log_var)
                                          : Tensor::scalar(0.0);
  out.total = cfg.beta > 0.0 && variational
                  ? add(out.reconstruction, scale(out.kl, cfg.beta))
                  : out.reconstruction;
  return out;
}

}  // namespace vqd::vqg
