#include "vqd/prediction.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "vqd/ops.hpp"

namespace vqd::model {

namespace {

// Maps (x_c, y_c, l, r, t, b) to (x0, y0, x1, y1).
const Tensor& corner_matrix() {
  static const Tensor m = Tensor::matrix({{1, 0, 1, 0},
                                          {0, 1, 0, 1},
                                          {-1, 0, 0, 0},
                                          {0, 0, 1, 0},
                                          {0, -1, 0, 0},
                                          {0, 0, 0, 1}});
  return m;
}

Tensor target_rows(std::size_t count, std::size_t width,
                   const std::function<void(std::size_t, double*)>& fill) {
  std::vector<double> v(count * width);
  for (std::size_t i = 0; i < count; ++i) fill(i, v.data() + i * width);
  return Tensor::from({count, width}, std::move(v));
}

}  // namespace

Prediction Prediction::slice(std::size_t begin, std::size_t count) const {
  return {slice_rows(logits, begin, count), slice_rows(center, begin, count),
          slice_rows(lrtb, begin, count),   slice_rows(dims, begin, count),
          slice_rows(angle, begin, count),  slice_rows(depth, begin, count)};
}

Tensor Prediction::corners() const {
  const Tensor parts[] = {center, lrtb};
  return matmul(concat_cols(parts), corner_matrix());
}

int DecodedQuery::best_class() const {
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) -
                          probs.begin());
}

double DecodedQuery::score() const {
  return *std::max_element(probs.begin(), probs.end());
}

double DecodedQuery::yaw() const { return std::atan2(sin_yaw, cos_yaw); }

geometry::Corners2D DecodedQuery::corners() const {
  return {x_c - l, y_c - t, x_c + r, y_c + b};
}

geometry::OrientedBox3D DecodedQuery::box3d(const geometry::Intrinsics& k) const {
  return geometry::oriented_box(x_c, y_c, depth, l3d, w3d, h3d, yaw(), k);
}

std::vector<DecodedQuery> decode(const Prediction& pred) {
  const std::size_t n = pred.rows(), nc = pred.logits.cols();
  const auto lg = pred.logits.values(), ce = pred.center.values(),
             bx = pred.lrtb.values(), dm = pred.dims.values(),
             an = pred.angle.values(), dp = pred.depth.values();
  std::vector<DecodedQuery> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    DecodedQuery& q = out[i];
    q.probs.resize(nc);
    for (std::size_t c = 0; c < nc; ++c)
      q.probs[c] = 1.0 / (1.0 + std::exp(-lg[i * nc + c]));
    q.x_c = ce[i * 2];
    q.y_c = ce[i * 2 + 1];
    q.l = bx[i * 4];
    q.r = bx[i * 4 + 1];
    q.t = bx[i * 4 + 2];
    q.b = bx[i * 4 + 3];
    q.l3d = dm[i * 3];
    q.w3d = dm[i * 3 + 1];
    q.h3d = dm[i * 3 + 2];
    q.sin_yaw = an[i * 2];
    q.cos_yaw = an[i * 2 + 1];
    q.depth = dp[i];
  }
  return out;
}

Tensor LossBreakdown::total(const LossWeights& w) const {
  Tensor t = scale(cls, w.cls);
  t = add(t, scale(center, w.center));
  t = add(t, scale(box_l1, w.box_l1));
  t = add(t, scale(giou, w.giou));
  t = add(t, scale(dims, w.dims));
  t = add(t, scale(angle, w.angle));
  return add(t, scale(depth, w.depth));
}

LossBreakdown set_prediction_loss(const Prediction& pred, const MatchPairs& pairs,
                                  std::span<const geometry::GroundTruthObject> gts,
                                  const LossWeights& w, double normalizer) {
  const std::size_t rows = pred.rows(), nc = pred.logits.cols();
  const double inv = 1.0 / normalizer;
  LossBreakdown out;

  std::vector<double> onehot(rows * nc, 0.0);
  for (const auto& [row, gt] : pairs) {
    const int c = gts[gt].category;
    if (c < 0 || static_cast<std::size_t>(c) >= nc)
      throw DimensionError("ground-truth category " + std::to_string(c) +
                           " outside [0, " + std::to_string(nc) + ")");
    onehot[row * nc + c] = 1.0;
  }
  out.cls = rows == 0 ? Tensor::scalar(0.0)
                      : scale(sigmoid_focal_loss(
                                  pred.logits,
                                  Tensor::from({rows, nc}, std::move(onehot)),
                                  w.focal_alpha, w.focal_gamma),
                              inv);

  if (pairs.empty()) {
    out.center = out.box_l1 = out.giou = out.dims = out.angle = out.depth =
        Tensor::scalar(0.0);
    return out;
  }

  const std::size_t m = pairs.size();
  std::vector<std::size_t> idx(m);
  for (std::size_t i = 0; i < m; ++i) idx[i] = pairs[i].first;
  auto gt_of = [&](std::size_t i) -> const geometry::GroundTruthObject& {
    return gts[pairs[i].second];
  };
  const std::vector<double> weights(m, inv);

  const Tensor center_t = target_rows(m, 2, [&](std::size_t i, double* o) {
    o[0] = gt_of(i).x_c;
    o[1] = gt_of(i).y_c;
  });
  const Tensor lrtb_t = target_rows(m, 4, [&](std::size_t i, double* o) {
    o[0] = gt_of(i).l;
    o[1] = gt_of(i).r;
    o[2] = gt_of(i).t;
    o[3] = gt_of(i).b;
  });
  const Tensor corner_t = target_rows(m, 4, [&](std::size_t i, double* o) {
    const auto& g = gt_of(i);
    o[0] = g.x_c - g.l;
    o[1] = g.y_c - g.t;
    o[2] = g.x_c + g.r;
    o[3] = g.y_c + g.b;
  });
  const Tensor dims_t = target_rows(m, 3, [&](std::size_t i, double* o) {
    o[0] = gt_of(i).l3d;
    o[1] = gt_of(i).w3d;
    o[2] = gt_of(i).h3d;
  });
  const Tensor angle_t = target_rows(m, 2, [&](std::size_t i, double* o) {
    o[0] = std::sin(gt_of(i).theta);
    o[1] = std::cos(gt_of(i).theta);
  });
  const Tensor depth_t = target_rows(m, 1, [&](std::size_t i, double* o) {
    o[0] = gt_of(i).depth;
  });

  const Tensor center = gather_rows(pred.center, idx);
  const Tensor lrtb = gather_rows(pred.lrtb, idx);
  out.center = weighted_l1(center, center_t, weights);
  out.box_l1 = weighted_l1(lrtb, lrtb_t, weights);
  const Tensor parts[] = {center, lrtb};
  out.giou = giou_loss(matmul(concat_cols(parts), corner_matrix()), corner_t, weights);
  out.dims = weighted_l1(gather_rows(pred.dims, idx), dims_t, weights);
  out.angle = weighted_l1(gather_rows(pred.angle, idx), angle_t, weights);
  out.depth = weighted_l1(gather_rows(pred.depth, idx), depth_t, weights);
  return out;
}

}  // namespace vqd::model
