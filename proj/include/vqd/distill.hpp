#pragma once

// Forward-looking distillation: early decoder layers are pulled toward the
// final layer's queries through a shared refinement MLP, weighted by the
// final prediction's 3D IoU with its ground truth.

#include <span>
#include <string>
#include <vector>

#include "vqd/geometry.hpp"
#include "vqd/matching.hpp"
#include "vqd/parameters.hpp"
#include "vqd/prediction.hpp"
#include "vqd/tensor.hpp"

namespace vqd::distill {

// Two-layer MLP shared across layers. `identity` bypasses it (test hook).
struct Refiner {
  Tensor w1, b1, w2, b2;
  bool identity = false;

  Tensor apply(const Tensor& x) const;
  static Refiner create(ParameterStore& store, const std::string& prefix,
                        std::size_t width);
};

// iou3d(decoded final box, matched gt box), one weight per assignment pair.
std::vector<double> iou_weights(std::span<const model::DecodedQuery> final_queries,
                                const matching::Assignment& assignment,
                                std::span<const geometry::GroundTruthObject> gts,
                                const geometry::Intrinsics& intrinsics);

// Query rows (into each layer's query tensor) and their weights.
struct DistillSet {
  std::vector<std::size_t> rows;
  std::vector<double> weights;
};

// sum over layers i < L of sum_r w_r mean_c smooth_l1(f(Q_i[r]) - Q_L[r]) / |rows|,
// added over sets. The teacher is `teacher` when given, else the detached last
// entry of `layer_queries`.
Tensor forward_looking_distill(const std::vector<Tensor>& layer_queries,
                               std::span<const DistillSet> sets,
                               const Refiner& refiner,
                               const Tensor* teacher = nullptr);

}  // namespace vqd::distill
