#pragma once

// The toy detector: one encoder layer over a feature grid, an L-layer decoder
// with mask separated self-attention and cross-attention, shared prediction
// heads, the training losses, and inference.

#include <array>
#include <memory>
#include <optional>
#include <vector>

#include "vqd/attention.hpp"
#include "vqd/distill.hpp"
#include "vqd/geometry.hpp"
#include "vqd/matching.hpp"
#include "vqd/parameters.hpp"
#include "vqd/prediction.hpp"
#include "vqd/scenes.hpp"
#include "vqd/vqg.hpp"

namespace vqd::model {

// The ablation ladder: (a) baseline, (b) + distillation, (c) + deterministic
// denoising, (d) + variational denoising.
enum class TrainingMode { kBaseline, kFld, kFldDn, kFldVdn };

const char* mode_name(TrainingMode mode);
// Accepts "baseline", "fld", "fld+dn", "fld+vdn".
std::optional<TrainingMode> parse_mode(std::string_view text);

struct DetectorConfig {
  std::size_t groups = 2;        // G
  std::size_t queries = 16;      // N per group
  std::size_t noisy_groups = 3;  // C
  std::size_t width = 64;        // D
  std::size_t layers = 4;        // L
  std::size_t heads = 4;         // H
  std::size_t num_classes = 3;
  std::size_t grid = 16;         // F
  std::size_t input_channels = 15;
  std::size_t ffn_width = 128;
  double lambda_det = 1.0;
  double lambda_dn = 1.0;
  double lambda_distill = 0.5;
  double confidence_threshold = 0.2;
  std::array<double, 3> dim_prior{5.0, 1.9, 2.0};
  double depth_prior = 20.0;
  matching::MatcherWeights matcher;
  LossWeights loss;
  geometry::NoiseConfig noise;
  vqg::DenoisingConfig denoising;
  bool refiner_identity = false;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

// Sets the loss weights, noisy group count and denoising mode for a rung of
// the ladder. Baseline and fld drop the noisy queries entirely.
void apply_mode(DetectorConfig& cfg, TrainingMode mode);

struct LayerNormParams {
  Tensor gain, bias;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct EncoderParams {
  Tensor w_in, b_in;
  LayerNormParams norm1, norm2;
  attention::AttentionParams self;
  FeedForwardParams ffn;
};

struct DecoderLayerParams {
  LayerNormParams norm1, norm2, norm3;
  attention::AttentionParams self;
  attention::AttentionParams cross;
  FeedForwardParams ffn;
};

struct HeadParams {
  LayerNormParams norm;
  Tensor w_cls, b_cls;
  Tensor w_reg1, b_reg1, w_reg2, b_reg2;
};

struct DetectorParams {
  ParameterStore store;
  EncoderParams encoder;
  std::vector<DecoderLayerParams> decoder;
  Tensor query_content;    // (G*N) x D
  Tensor query_reference;  // (G*N) x 2, center logits
  Tensor w_pos1, b_pos1, w_pos2, b_pos2;  // (D + 4) -> D -> D anchor embedding
  vqg::GeneratorParams generator;
  distill::Refiner refiner;
  HeadParams heads;

  explicit DetectorParams(std::uint64_t seed) : store(seed) {}
};

// Registers every parameter in a fixed order, independent of the mode.
std::unique_ptr<DetectorParams> create_params(const DetectorConfig& cfg,
                                              std::uint64_t seed);

// Row-major (F*F) x D sinusoidal encoding: first half rows, second columns.
Tensor grid_positional_encoding(std::size_t grid, std::size_t width);
// The same code for arbitrary points (R x 2 as (x, y) in normalized image
// coordinates; rows follow y, columns x),
// differentiable in the points.
Tensor point_encoding(const Tensor& points, std::size_t width);

// One encoder layer over the flattened grid. Output (F*F) x D.
Tensor encode_features(const DetectorParams& params, const DetectorConfig& cfg,
                       std::span<const double> features);

struct DecoderTrace {
  std::size_t groups = 0, n = 0, k = 0, c = 0;
  std::vector<Tensor> layer_queries;           // L entries, (G*S) x D
  std::vector<Prediction> layer_predictions;   // L entries over the same rows
  std::vector<std::vector<double>> final_maps; // last layer, per group S x S

  std::size_t group_size() const { return k * c + n; }
};

Prediction apply_heads(const DetectorParams& params, const DetectorConfig& cfg,
                       const Tensor& queries, const Tensor& reference_logits);

// `reference_logits` holds the center logits the center head refines and
// `query_pos` the anchor embeddings added before self- and cross-attention,
// one row per stacked query.
DecoderTrace decoder_forward(const DetectorParams& params, const DetectorConfig& cfg,
                             const Tensor& memory,
                             const attention::GroupQuerySet& queries,
                             const attention::AttentionMask& mask,
                             const Tensor& reference_logits, const Tensor& query_pos);

// Noise boxes and reparameterization draws for one training step, kept so a
// step can be replayed exactly.
struct StepInputs {
  std::vector<std::vector<vqg::NoisyBox>> noisy;  // per group, C*K in block order
  std::vector<Tensor> eps;                        // per group, (C*K) x D
};

StepInputs prepare_step(const scenes::Scene& scene, const DetectorConfig& cfg,
                        Rng& rng);

struct ForwardResult {
  DecoderTrace trace;
  vqg::LatentDistribution latent;  // all encoded noisy boxes
};

// Training forward pass over all groups with the configured noisy groups.
ForwardResult forward_train(const DetectorParams& params, const DetectorConfig& cfg,
                            const scenes::Scene& scene, const StepInputs& inputs);

// Values that must stay fixed when a step's loss is re-evaluated at
// perturbed parameters: assignments, IoU weights, and the distillation
// teacher. Filled by the first evaluation, replayed afterwards.
struct FrozenStep {
  bool filled = false;
  std::vector<std::vector<matching::Assignment>> assignments;  // [layer][group]
  std::vector<distill::DistillSet> distill_sets;
  Tensor teacher;
};

Tensor detection_loss(const std::vector<std::vector<Prediction>>& layer_groups,
                      const std::vector<std::vector<matching::Assignment>>& assignments,
                      std::span<const geometry::GroundTruthObject> gts,
                      const LossWeights& weights);

Tensor overall_loss(const Tensor& det, const Tensor& dn, const Tensor& distill,
                    double lambda_det, double lambda_dn, double lambda_distill);
double overall_loss(double det, double dn, double distill, double lambda_det,
                    double lambda_dn, double lambda_distill);

struct LossTerms {
  Tensor total;
  Tensor det;
  Tensor dn;
  Tensor dn_reconstruction;
  Tensor kl;
  Tensor distill;
};

// `beta` replaces cfg.denoising.beta (warm-up schedule).
LossTerms compute_losses(const DetectorParams& params, const DetectorConfig& cfg,
                         const scenes::Scene& scene, const ForwardResult& fwd,
                         double beta, FrozenStep* frozen = nullptr);

struct InferenceDetection {
  int category = 0;
  double score = 0.0;
  geometry::OrientedBox3D box;
  geometry::Corners2D box2d;
};

// Group 1 only, no noisy queries, last layer, max-class confidence at or
// above the threshold, no suppression.
std::vector<InferenceDetection> inference(const DetectorParams& params,
                                          const DetectorConfig& cfg,
                                          const scenes::Scene& scene);

}  // namespace vqd::model
