#pragma once

// Variational query generator: a box embedding that acts as the encoder of a
// VAE over noisy boxes, reparameterized sampling, and the denoising loss.

#include <span>
#include <string>
#include <vector>

#include "vqd/geometry.hpp"
#include "vqd/parameters.hpp"
#include "vqd/prediction.hpp"
#include "vqd/rng.hpp"
#include "vqd/tensor.hpp"

namespace vqd::vqg {

enum class DenoisingMode { kVariational, kDeterministic };

struct DenoisingConfig {
  double beta = 0.1;
  DenoisingMode mode = DenoisingMode::kVariational;

  void validate() const;
};

struct LatentDistribution {
  Tensor mu;       // K x D
  Tensor log_var;  // K x D, clamped to [-10, 10]

  std::size_t rows() const { return mu.rows(); }
};

struct NoisyBox {
  geometry::AnchorBox6D anchor;
  geometry::Noisy3D attrs;
};

inline constexpr std::size_t kBoxFeatures = 12;
inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

struct GeneratorParams {
  std::size_t num_classes = 0;
  std::size_t width = 0;
  Tensor class_table;  // num_classes x E
  Tensor w_attr, b_attr;
  Tensor w_hidden, b_hidden;
  Tensor w_mu, b_mu;
  Tensor w_logvar, b_logvar;

  static GeneratorParams create(ParameterStore& store, const std::string& prefix,
                                std::size_t num_classes, std::size_t width);
};

// Continuous attributes of a noisy box: anchor, log dims, sin/cos yaw,
// log depth (12 values).
std::array<double, kBoxFeatures> box_features(const NoisyBox& box);

// Throws std::out_of_range for a category outside [0, num_classes).
LatentDistribution encode_noisy_box(const GeneratorParams& params,
                                    std::span<const NoisyBox> boxes);

// K x D standard normal draws.
Tensor draw_epsilon(std::size_t rows, std::size_t width, Rng& rng);

// z = mu + exp(0.5 log_var) * eps; deterministic mode returns mu.
Tensor sample_reparameterized(const LatentDistribution& dist, const Tensor& eps,
                              DenoisingMode mode);
Tensor sample_reparameterized(const LatentDistribution& dist, Rng& rng,
                              DenoisingMode mode);

struct DenoisingLoss {
  Tensor reconstruction;
  Tensor kl;
  Tensor total;
};

// Reconstruction of noisy-query predictions against their source ground
// truths plus beta * KL. `noisy` holds G * C blocks of K rows each (block b
// of group g at position g*C + b); block row i targets gts[i]. The
// reconstruction is averaged over the blocks; the KL averages over all
// encoded rows of `dist`.
DenoisingLoss denoising_loss(const std::vector<model::Prediction>& noisy,
                             std::span<const geometry::GroundTruthObject> gts,
                             const LatentDistribution& dist,
                             const DenoisingConfig& cfg,
                             const model::LossWeights& weights);

}  // namespace vqd::vqg
