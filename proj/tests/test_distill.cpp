#include <cmath>

#include "doctest.h"
#include "vqd/distill.hpp"
#include "vqd/gradcheck.hpp"
#include "vqd/ops.hpp"

using namespace vqd;
using namespace vqd::distill;
using geometry::GroundTruthObject;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool grad = true) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

double smooth(double d) {
  const double a = std::abs(d);
  return a < 1.0 ? 0.5 * a * a : a - 0.5;
}

// f(x) = W2 relu(W1 x + b1) + b2 for one row, by loops.
std::vector<double> refine(const Refiner& r, std::span<const double> x) {
  const std::size_t d = x.size();
  std::vector<double> h(d), y(d);
  for (std::size_t j = 0; j < d; ++j) {
    double s = r.b1.values()[j];
    for (std::size_t i = 0; i < d; ++i) s += x[i] * r.w1.values()[i * d + j];
    h[j] = std::max(0.0, s);
  }
  for (std::size_t j = 0; j < d; ++j) {
    double s = r.b2.values()[j];
    for (std::size_t i = 0; i < d; ++i) s += h[i] * r.w2.values()[i * d + j];
    y[j] = s;
  }
  return y;
}

GroundTruthObject car() {
  GroundTruthObject g;
  g.category = 0;
  g.x_c = 0.55;
  g.y_c = 0.6;
  g.l3d = 4.0;
  g.w3d = 1.7;
  g.h3d = 1.5;
  g.theta = 0.4;
  g.depth = 20.0;
  return g;
}

model::DecodedQuery as_query(const GroundTruthObject& g) {
  model::DecodedQuery q;
  q.probs = {0.9};
  q.x_c = g.x_c;
  q.y_c = g.y_c;
  q.l3d = g.l3d;
  q.w3d = g.w3d;
  q.h3d = g.h3d;
  q.sin_yaw = std::sin(g.theta);
  q.cos_yaw = std::cos(g.theta);
  q.depth = g.depth;
  return q;
}

}  // namespace

TEST_CASE("iou weights") {
  const geometry::Intrinsics k{1.2, 0.5, 0.5};
  const GroundTruthObject g = car();
  model::DecodedQuery exact = as_query(g);
  model::DecodedQuery far = exact;
  far.depth = 60.0;
  model::DecodedQuery near = exact;
  near.depth = 20.8;
  near.sin_yaw = std::sin(0.6);
  near.cos_yaw = std::cos(0.6);
  const std::vector<model::DecodedQuery> qs{far, exact, near};
  matching::Assignment a;
  a.pairs = {{1, 0}, {0, 1}, {2, 2}};
  const std::vector<GroundTruthObject> gts{g, g, g};
  const auto w = iou_weights(qs, a, gts, k);
  REQUIRE(w.size() == 3);
  CHECK(w[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w[1] == 0.0);
  CHECK(w[2] == geometry::iou3d(near.box3d(k), geometry::oriented_box(g, k)));
  CHECK(w[2] > 0.0);
  CHECK(w[2] < 1.0);
}

TEST_CASE("trivial distillation values") {
  Rng rng(1);
  ParameterStore store(2);
  Refiner r = Refiner::create(store, "fq", 4);
  const Tensor q = random_tensor(rng, {3, 4});
  const std::vector<DistillSet> sets{{{0, 2}, {1.0, 0.5}}};
  CHECK(forward_looking_distill({q}, sets, r).item() == 0.0);
  r.identity = true;
  CHECK(forward_looking_distill({q, q, q}, sets, r).item() == 0.0);
}

TEST_CASE("hand-executed two-layer instance") {
  // L = 2, N = 2 learnable rows, K = 1 noisy row.
  Rng rng(5);
  ParameterStore store(6);
  const Refiner r = Refiner::create(store, "fq", 3);
  const Tensor q1 = random_tensor(rng, {3, 3});
  const Tensor q2 = random_tensor(rng, {3, 3});
  const std::vector<DistillSet> sets{{{1, 0}, {0.8, 0.3}}, {{2}, {0.6}}};
  const double got = forward_looking_distill({q1, q2}, sets, r).item();

  auto row_term = [&](std::size_t row, double w) {
    const auto f = refine(r, q1.values().subspan(row * 3, 3));
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) s += smooth(f[c] - q2.values()[row * 3 + c]);
    return w * s / 3.0;
  };
  const double expected = (row_term(1, 0.8) + row_term(0, 0.3)) / 2.0 + row_term(2, 0.6);
  CHECK(std::abs(got - expected) <= 1e-10);
}

TEST_CASE("teacher is detached and weights act linearly") {
  Rng rng(9);
  ParameterStore store(10);
  const Refiner r = Refiner::create(store, "fq", 4);
  Tensor q0 = random_tensor(rng, {5, 4});
  Tensor q1 = random_tensor(rng, {5, 4});
  Tensor q2 = random_tensor(rng, {5, 4});
  const std::vector<DistillSet> sets{{{0, 3, 4}, {0.9, 0.4, 0.7}}};
  const Tensor loss = forward_looking_distill({q0, q1, q2}, sets, r);
  CHECK(loss.item() > 0.0);
  backward(loss);
  for (double g : q2.grad()) CHECK(g == 0.0);

  // Zero weight removes the row.
  const std::vector<DistillSet> drop{{{0, 3, 4}, {0.9, 0.0, 0.7}}};
  const std::vector<DistillSet> without{{{0, 4}, {0.9, 0.7}}};
  const double a = forward_looking_distill({q0, q1, q2}, drop, r).item();
  const double b = forward_looking_distill({q0, q1, q2}, without, r).item();
  CHECK(a == doctest::Approx(b * 2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("distillation gradient") {
  Rng rng(11);
  ParameterStore store(12);
  const Refiner r = Refiner::create(store, "fq", 4);
  Tensor q0 = random_tensor(rng, {4, 4});
  Tensor q1 = random_tensor(rng, {4, 4});
  const Tensor teacher = random_tensor(rng, {4, 4}, false);
  const std::vector<DistillSet> sets{{{0, 2}, {0.5, 0.9}}, {{3}, {0.2}}};
  auto fn = [&] { return forward_looking_distill({q0, q1, teacher}, sets, r); };
  CHECK(check_gradients(fn, {q0, q1, r.w1, r.b1, r.w2, r.b2}).max_rel_error <= 1e-5);
}
