#pragma once

// Per-query head outputs, their decoded values, and the set-prediction loss
// components shared by detection and denoising.

#include <array>
#include <span>
#include <utility>
#include <vector>

#include "vqd/geometry.hpp"
#include "vqd/tensor.hpp"

namespace vqd::model {

// Head outputs for R queries. Activations already applied: lrtb >= 0,
// dims > 0, depth > 0. Class probabilities are sigmoid(logits).
struct Prediction {
  Tensor logits;  // R x num_classes
  Tensor center;  // R x 2 (x_c, y_c)
  Tensor lrtb;    // R x 4
  Tensor dims;    // R x 3 (l3D, w3D, h3D)
  Tensor angle;   // R x 2 (sin, cos)
  Tensor depth;   // R x 1

  std::size_t rows() const { return logits.rows(); }
  Prediction slice(std::size_t begin, std::size_t count) const;
  // x0, y0, x1, y1 from center and lrtb.
  Tensor corners() const;
};

struct DecodedQuery {
  std::vector<double> probs;
  double x_c = 0, y_c = 0;
  double l = 0, r = 0, t = 0, b = 0;
  double l3d = 0, w3d = 0, h3d = 0;
  double sin_yaw = 0, cos_yaw = 1;
  double depth = 0;

  int best_class() const;
  double score() const;
  double yaw() const;
  geometry::Corners2D corners() const;
  geometry::OrientedBox3D box3d(const geometry::Intrinsics& k) const;
};

std::vector<DecodedQuery> decode(const Prediction& pred);

// Loss weights inside the set-prediction loss.
struct LossWeights {
  double cls = 2.0;
  double center = 5.0;
  double box_l1 = 5.0;
  double giou = 2.0;
  double dims = 1.0;
  double angle = 1.0;
  double depth = 0.1;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

struct LossBreakdown {
  Tensor cls, center, box_l1, giou, dims, angle, depth;

  Tensor total(const LossWeights& w) const;
};

using MatchPairs = std::vector<std::pair<std::size_t, std::size_t>>;

// Focal loss over every row and class of `pred` (rows absent from `pairs`
// are background) plus regression terms on the (row, gt) pairs. Every term
// is divided by `normalizer`.
LossBreakdown set_prediction_loss(const Prediction& pred, const MatchPairs& pairs,
                                  std::span<const geometry::GroundTruthObject> gts,
                                  const LossWeights& w, double normalizer);

}  // namespace vqd::model
