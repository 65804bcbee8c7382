#include "vqd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace vqd::geometry {

namespace {

using Point = std::pair<double, double>;

double cross(const Point& o, const Point& a, const Point& b) {
  return (a.first - o.first) * (b.second - o.second) -
         (a.second - o.second) * (b.first - o.first);
}

double polygon_area(const std::vector<Point>& poly) {
  double twice = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Point& p = poly[i];
    const Point& q = poly[(i + 1) % poly.size()];
    twice += p.first * q.second - q.first * p.second;
  }
  return 0.5 * std::abs(twice);
}

Point line_intersection(const Point& p, const Point& q, const Point& a,
                        const Point& b) {
  // Point on segment p-q lying on line a-b.
  const double cp = cross(a, b, p);
  const double cq = cross(a, b, q);
  const double t = cp / (cp - cq);
  return {p.first + t * (q.first - p.first), p.second + t * (q.second - p.second)};
}

// Sutherland-Hodgman clipping of `subject` against the convex CCW `clip`.
std::vector<Point> clip_polygon(std::vector<Point> subject,
                                const std::array<Point, 4>& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Point& a = clip[e];
    const Point& b = clip[(e + 1) % clip.size()];
    std::vector<Point> out;
    out.reserve(subject.size() + 2);
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const Point& cur = subject[i];
      const Point& prev = subject[(i + subject.size() - 1) % subject.size()];
      const bool cur_in = cross(a, b, cur) >= 0.0;
      const bool prev_in = cross(a, b, prev) >= 0.0;
      if (cur_in) {
        if (!prev_in) out.push_back(line_intersection(prev, cur, a, b));
        out.push_back(cur);
      } else if (prev_in) {
        out.push_back(line_intersection(prev, cur, a, b));
      }
    }
    subject = std::move(out);
  }
  return subject;
}

}  // namespace

std::array<double, 12> GroundTruthObject::to_array() const {
  return {static_cast<double>(category), x_c, y_c, l, r, t, b,
          l3d, w3d, h3d, theta, depth};
}

GroundTruthObject GroundTruthObject::from_array(const std::array<double, 12>& v) {
  GroundTruthObject g;
  g.category = static_cast<int>(v[0]);
  g.x_c = v[1];
  g.y_c = v[2];
  g.l = v[3];
  g.r = v[4];
  g.t = v[5];
  g.b = v[6];
  g.l3d = v[7];
  g.w3d = v[8];
  g.h3d = v[9];
  g.theta = v[10];
  g.depth = v[11];
  return g;
}

void NoiseConfig::validate() const {
  auto in = [](double v, double lo, double hi, bool hi_open) {
    return v >= lo && (hi_open ? v < hi : v <= hi);
  };
  if (!in(center_shift, 0, 1, true) || !in(box_scale, 0, 1, true) ||
      !in(label_flip, 0, 1, false) || !in(dim_scale, 0, 1, true) ||
      angle_jitter < 0 || !in(depth_jitter, 0, 1, true))
    throw std::invalid_argument("noise configuration out of range");
}

double wrap_angle(double theta) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  double w = std::fmod(theta + std::numbers::pi, kTwoPi);
  if (w <= 0.0) w += kTwoPi;
  return w - std::numbers::pi;
}

ImagePoint project_to_image(const Vec3& p, const Intrinsics& k) {
  if (p.z <= 0.0)
    throw BehindCameraError("point behind camera (z = " + std::to_string(p.z) +
                            ")");
  return {k.focal * p.x / p.z + k.cx, k.focal * p.y / p.z + k.cy};
}

Vec3 back_project(double u, double v, double depth, const Intrinsics& k) {
  return {(u - k.cx) * depth / k.focal, (v - k.cy) * depth / k.focal, depth};
}

Corners2D box2d_corners(const AnchorBox6D& a) {
  return {a.x_c - a.l, a.y_c - a.t, a.x_c + a.r, a.y_c + a.b};
}

AnchorBox6D anchor_from_corners(const Corners2D& c, double x_c, double y_c) {
  return {x_c, y_c, x_c - c.x_min, c.x_max - x_c, y_c - c.y_min, c.y_max - y_c};
}

double giou2d(const Corners2D& a, const Corners2D& b) {
  const double area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min);
  const double area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min);
  const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = iw * ih;
  const double uni = area_a + area_b - inter;
  const double hull = (std::max(a.x_max, b.x_max) - std::min(a.x_min, b.x_min)) *
                      (std::max(a.y_max, b.y_max) - std::min(a.y_min, b.y_min));
  if (hull <= 0.0) return 0.0;
  const double iou = uni > 0.0 ? inter / uni : 0.0;
  return iou - (hull - uni) / hull;
}

std::array<std::pair<double, double>, 4> bev_corners(const OrientedBox3D& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double hl = 0.5 * box.l, hw = 0.5 * box.w;
  // Local (along, lateral) offsets in CCW order; lateral axis is heading
  // rotated by +90 degrees in (x, z).
  const double local[4][2] = {{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}};
  std::array<Point, 4> out;
  for (int i = 0; i < 4; ++i) {
    const double a = local[i][0], b = local[i][1];
    out[i] = {box.center.x + a * c - b * s, box.center.z + a * s + b * c};
  }
  return out;
}

double iou3d(const OrientedBox3D& a, const OrientedBox3D& b) {
  const double vol_a = a.l * a.w * a.h;
  const double vol_b = b.l * b.w * b.h;
  if (!(vol_a > 0.0) || !(vol_b > 0.0)) return 0.0;
  const double y_overlap =
      std::min(a.center.y + 0.5 * a.h, b.center.y + 0.5 * b.h) -
      std::max(a.center.y - 0.5 * a.h, b.center.y - 0.5 * b.h);
  if (y_overlap <= 0.0) return 0.0;
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  const double reach = 0.5 * (std::hypot(a.l, a.w) + std::hypot(b.l, b.w));
  if (std::hypot(a.center.x - b.center.x, a.center.z - b.center.z) >= reach)
    return 0.0;
  const auto poly = clip_polygon(std::vector<Point>(ca.begin(), ca.end()), cb);
  const double area = poly.size() >= 3 ? polygon_area(poly) : 0.0;
  const double inter = area * y_overlap;
  const double uni = vol_a + vol_b - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

OrientedBox3D oriented_box(double x_c, double y_c, double depth, double l3d,
                           double w3d, double h3d, double theta,
                           const Intrinsics& k) {
  return {back_project(x_c, y_c, depth, k), l3d, w3d, h3d, theta};
}

OrientedBox3D oriented_box(const GroundTruthObject& gt, const Intrinsics& k) {
  return oriented_box(gt.x_c, gt.y_c, gt.depth, gt.l3d, gt.w3d, gt.h3d,
                      gt.theta, k);
}

bool satisfies_invariants(const GroundTruthObject& g) {
  const bool lrtb = g.l >= 0 && g.r >= 0 && g.t >= 0 && g.b >= 0;
  const bool frame = g.x_c - g.l >= -0.25 && g.x_c + g.r <= 1.25 &&
                     g.y_c - g.t >= -0.25 && g.y_c + g.b <= 1.25;
  const bool center = g.x_c >= 0 && g.x_c <= 1 && g.y_c >= 0 && g.y_c <= 1;
  auto open = [](double v, double lo, double hi) { return v > lo && v < hi; };
  const bool dims = open(g.l3d, 0, 30) && open(g.w3d, 0, 30) && open(g.h3d, 0, 30);
  const bool theta = g.theta > -std::numbers::pi && g.theta <= std::numbers::pi;
  return g.category >= 0 && lrtb && frame && center && dims && theta &&
         open(g.depth, 0.5, 120);
}

GroundTruthObject clamp_to_invariants(GroundTruthObject g) {
  g.x_c = std::clamp(g.x_c, 0.0, 1.0);
  g.y_c = std::clamp(g.y_c, 0.0, 1.0);
  g.l = std::clamp(g.l, 0.0, g.x_c + 0.25);
  g.r = std::clamp(g.r, 0.0, 1.25 - g.x_c);
  g.t = std::clamp(g.t, 0.0, g.y_c + 0.25);
  g.b = std::clamp(g.b, 0.0, 1.25 - g.y_c);
  g.l3d = std::clamp(g.l3d, 1e-3, 29.999);
  g.w3d = std::clamp(g.w3d, 1e-3, 29.999);
  g.h3d = std::clamp(g.h3d, 1e-3, 29.999);
  g.theta = wrap_angle(g.theta);
  g.depth = std::clamp(g.depth, 0.501, 119.999);
  return g;
}

std::pair<AnchorBox6D, Noisy3D> apply_box_noise(const GroundTruthObject& gt,
                                                const NoiseConfig& cfg,
                                                int num_classes, Rng& rng) {
  // A fixed number of draws per call keeps streams aligned across configs.
  const double u_x = rng.uniform(-1.0, 1.0);
  const double u_y = rng.uniform(-1.0, 1.0);
  double u_box[4];
  for (double& u : u_box) u = rng.uniform(-1.0, 1.0);
  const double u_flip = rng.uniform();
  const double u_class = rng.uniform();
  double u_dim[3];
  for (double& u : u_dim) u = rng.uniform(-1.0, 1.0);
  const double u_angle = rng.uniform(-1.0, 1.0);
  const double u_depth = rng.uniform(-1.0, 1.0);

  GroundTruthObject n = gt;
  const double half_w = 0.5 * (gt.l + gt.r);
  const double half_h = 0.5 * (gt.t + gt.b);
  n.x_c = gt.x_c + u_x * cfg.center_shift * half_w;
  n.y_c = gt.y_c + u_y * cfg.center_shift * half_h;
  n.l = gt.l * (1.0 + u_box[0] * cfg.box_scale);
  n.r = gt.r * (1.0 + u_box[1] * cfg.box_scale);
  n.t = gt.t * (1.0 + u_box[2] * cfg.box_scale);
  n.b = gt.b * (1.0 + u_box[3] * cfg.box_scale);
  if (num_classes > 1 && u_flip < cfg.label_flip) {
    // Uniform over the other classes.
    int pick = std::min(num_classes - 2,
                        static_cast<int>(u_class * (num_classes - 1)));
    n.category = pick >= gt.category ? pick + 1 : pick;
  }
  n.l3d = gt.l3d * (1.0 + u_dim[0] * cfg.dim_scale);
  n.w3d = gt.w3d * (1.0 + u_dim[1] * cfg.dim_scale);
  n.h3d = gt.h3d * (1.0 + u_dim[2] * cfg.dim_scale);
  n.theta = gt.theta + u_angle * cfg.angle_jitter;
  n.depth = gt.depth * (1.0 + u_depth * cfg.depth_jitter);
  if (!satisfies_invariants(n)) n = clamp_to_invariants(n);

  return {n.anchor(), Noisy3D{n.category, n.l3d, n.w3d, n.h3d, n.theta, n.depth}};
}

}  // namespace vqd::geometry
