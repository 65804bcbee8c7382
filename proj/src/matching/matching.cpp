#include "vqd/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace vqd::matching {

namespace {

// Shortest augmenting path with potentials; requires rows <= cols. Returns
// the column assigned to each row.
std::vector<std::size_t> solve(const CostMatrix& a) {
  const std::size_t n = a.rows, m = a.cols;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is the virtual start.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col_of(n, 0);
  for (std::size_t j = 1; j <= m; ++j)
    if (owner[j] != 0) col_of[owner[j] - 1] = j - 1;
  return col_of;
}

}  // namespace

Assignment hungarian(const CostMatrix& cost) {
  Assignment out;
  if (cost.rows == 0 || cost.cols == 0) return out;
  for (double c : cost.data)
    if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost");

  if (cost.rows <= cost.cols) {
    const auto col_of = solve(cost);
    for (std::size_t r = 0; r < cost.rows; ++r) out.pairs.emplace_back(r, col_of[r]);
  } else {
    CostMatrix t(cost.cols, cost.rows);
    for (std::size_t r = 0; r < cost.rows; ++r)
      for (std::size_t c = 0; c < cost.cols; ++c) t(c, r) = cost(r, c);
    const auto row_of = solve(t);
    for (std::size_t c = 0; c < cost.cols; ++c) out.pairs.emplace_back(row_of[c], c);
    std::sort(out.pairs.begin(), out.pairs.end());
  }
  for (const auto& [r, c] : out.pairs) out.total_cost += cost(r, c);
  return out;
}

CostMatrix matching_cost(std::span<const model::DecodedQuery> queries,
                         std::span<const geometry::GroundTruthObject> gts,
                         const MatcherWeights& w) {
  CostMatrix cost(queries.size(), gts.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto& p = queries[q];
    const geometry::Corners2D pc = p.corners();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const auto& t = gts[g];
      const double prob = p.probs.at(static_cast<std::size_t>(t.category));
      const double l1 = std::abs(p.x_c - t.x_c) + std::abs(p.y_c - t.y_c);
      const double giou = geometry::giou2d(pc, geometry::box2d_corners(t.anchor()));
      cost(q, g) = w.cls * (1.0 - prob) + w.center * l1 + w.giou * (1.0 - giou);
    }
  }
  return cost;
}

std::vector<Assignment> groupwise_match(
    const std::vector<std::vector<model::DecodedQuery>>& groups,
    std::span<const geometry::GroundTruthObject> gts, const MatcherWeights& w) {
  std::vector<Assignment> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(hungarian(matching_cost(g, gts, w)));
  return out;
}

}  // namespace vqd::matching
