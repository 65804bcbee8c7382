#pragma once

// Optimal one-to-one assignment and the group-wise one-to-many scheme.

#include <span>
#include <utility>
#include <vector>

#include "vqd/geometry.hpp"
#include "vqd/prediction.hpp"

namespace vqd::matching {

struct CostMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  CostMatrix() = default;
  CostMatrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query, gt), by query
  double total_cost = 0.0;
};

// Minimum-cost assignment of the smaller side. Ties resolve toward the
// lowest query index. Throws std::invalid_argument on non-finite costs.
Assignment hungarian(const CostMatrix& cost);

struct MatcherWeights {
  double cls = 2.0;
  double center = 5.0;
  double giou = 2.0;
};

// queries x gts: w_cls (1 - p_class) + w_center L1(center) + w_giou (1 - GIoU)
CostMatrix matching_cost(std::span<const model::DecodedQuery> queries,
                         std::span<const geometry::GroundTruthObject> gts,
                         const MatcherWeights& w);

// One independent match per group; groups[g] holds that group's queries.
std::vector<Assignment> groupwise_match(
    const std::vector<std::vector<model::DecodedQuery>>& groups,
    std::span<const geometry::GroundTruthObject> gts, const MatcherWeights& w);

}  // namespace vqd::matching
