#include "vqd/distill.hpp"

#include <cmath>

#include "vqd/ops.hpp"

namespace vqd::distill {

Tensor Refiner::apply(const Tensor& x) const {
  if (identity) return x;
  return linear(relu(linear(x, w1, b1)), w2, b2);
}

Refiner Refiner::create(ParameterStore& store, const std::string& prefix,
                        std::size_t width) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(width));
  Refiner r;
  r.w1 = store.add_normal(prefix + ".w1", {width, width}, sd);
  r.b1 = store.add_constant(prefix + ".b1", {width}, 0.0);
  r.w2 = store.add_normal(prefix + ".w2", {width, width}, sd);
  r.b2 = store.add_constant(prefix + ".b2", {width}, 0.0);
  return r;
}

std::vector<double> iou_weights(std::span<const model::DecodedQuery> final_queries,
                                const matching::Assignment& assignment,
                                std::span<const geometry::GroundTruthObject> gts,
                                const geometry::Intrinsics& intrinsics) {
  std::vector<double> w;
  w.reserve(assignment.pairs.size());
  for (const auto& [q, g] : assignment.pairs)
    w.push_back(geometry::iou3d(final_queries[q].box3d(intrinsics),
                                geometry::oriented_box(gts[g], intrinsics)));
  return w;
}

Tensor forward_looking_distill(const std::vector<Tensor>& layer_queries,
                               std::span<const DistillSet> sets,
                               const Refiner& refiner, const Tensor* teacher) {
  Tensor total = Tensor::scalar(0.0);
  if (layer_queries.size() < 2) return total;
  const Tensor final_q = teacher ? *teacher : layer_queries.back().detach();
  if (final_q.shape() != layer_queries.back().shape())
    throw DimensionError("teacher shape " + shape_string(final_q.shape()) +
                         " differs from " + shape_string(layer_queries.back().shape()));
  for (const DistillSet& set : sets) {
    if (set.rows.size() != set.weights.size())
      throw DimensionError("distillation rows and weights differ in count");
    if (set.rows.empty()) continue;
    const double inv = 1.0 / static_cast<double>(set.rows.size());
    std::vector<double> w(set.weights.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = set.weights[i] * inv;
    const Tensor target = gather_rows(final_q, set.rows);
    for (std::size_t i = 0; i + 1 < layer_queries.size(); ++i) {
      const Tensor student = refiner.apply(gather_rows(layer_queries[i], set.rows));
      total = add(total, weighted_smooth_l1(student, target, w));
    }
  }
  return total;
}

}  // namespace vqd::distill
