#pragma once

// Box representations for the monocular 3D target: the 12-field ground-truth
// tuple, its 6D image-plane anchor, yaw-oriented 3D boxes in the camera
// frame, and the noise model that corrupts ground truths into denoising
// inputs.
//
// Camera frame: x right, y down, z forward. Yaw rotates the box heading in
// the x-z (bird's-eye) plane: heading = (cos yaw, sin yaw) in (x, z).

#include <array>
#include <numbers>
#include <stdexcept>
#include <utility>

#include "vqd/rng.hpp"

namespace vqd::geometry {

struct BehindCameraError : std::domain_error {
  using std::domain_error::domain_error;
};

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

struct ImagePoint {
  double u = 0, v = 0;
};

struct Intrinsics {
  double focal = 1.0;
  double cx = 0.5;
  double cy = 0.5;
};

struct AnchorBox6D {
  double x_c = 0, y_c = 0;
  double l = 0, r = 0, t = 0, b = 0;
};

struct Corners2D {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
};

struct GroundTruthObject {
  int category = 0;
  double x_c = 0, y_c = 0;
  double l = 0, r = 0, t = 0, b = 0;
  double l3d = 1, w3d = 1, h3d = 1;
  double theta = 0;
  double depth = 1;

  AnchorBox6D anchor() const { return {x_c, y_c, l, r, t, b}; }
  // Field order used by serialization: c, x_c, y_c, l, r, t, b, l3D, w3D,
  // h3D, theta, d.
  std::array<double, 12> to_array() const;
  static GroundTruthObject from_array(const std::array<double, 12>& v);
};

// Corrupted 3D attributes paired with a noisy anchor.
struct Noisy3D {
  int category = 0;
  double l3d = 1, w3d = 1, h3d = 1;
  double theta = 0;
  double depth = 1;
};

struct OrientedBox3D {
  Vec3 center;
  double l = 1, w = 1, h = 1;  // along heading, lateral, vertical
  double yaw = 0;
};

struct NoiseConfig {
  double center_shift = 0.4;     // fraction of the half-extent per axis
  double box_scale = 0.4;        // l, r, t, b scaled in [1-s, 1+s]
  double label_flip = 0.25;      // probability of resampling the category
  double dim_scale = 0.2;        // l3D, w3D, h3D scaled in [1-s, 1+s]
  double angle_jitter = std::numbers::pi / 8.0;  // radians, uniform +-
  double depth_jitter = 0.1;     // relative, uniform +-

  void validate() const;
};

// Wraps to (-pi, pi].
double wrap_angle(double theta);

ImagePoint project_to_image(const Vec3& p, const Intrinsics& k);
Vec3 back_project(double u, double v, double depth, const Intrinsics& k);

Corners2D box2d_corners(const AnchorBox6D& anchor);
AnchorBox6D anchor_from_corners(const Corners2D& c, double x_c, double y_c);

// Generalized IoU of axis-aligned boxes, in (-1, 1]. Degenerate hulls give 0.
double giou2d(const Corners2D& a, const Corners2D& b);

// Volume IoU of yaw-oriented boxes: exact bird's-eye polygon clipping times
// vertical overlap. Symmetric, in [0, 1]; zero-volume inputs give 0.
double iou3d(const OrientedBox3D& a, const OrientedBox3D& b);

// Bird's-eye footprint corners in counter-clockwise order over (x, z).
std::array<std::pair<double, double>, 4> bev_corners(const OrientedBox3D& box);

// 3D box whose center back-projects from (x_c, y_c) at the given depth.
OrientedBox3D oriented_box(double x_c, double y_c, double depth, double l3d,
                           double w3d, double h3d, double theta,
                           const Intrinsics& k);
OrientedBox3D oriented_box(const GroundTruthObject& gt, const Intrinsics& k);

bool satisfies_invariants(const GroundTruthObject& gt);
// Clamps every field into its valid range.
GroundTruthObject clamp_to_invariants(GroundTruthObject gt);

// DN-style corruption: center shift, lrtb scaling, label flipping, and
// 3D attribute jitter, re-clamped to the type invariants.
std::pair<AnchorBox6D, Noisy3D> apply_box_noise(const GroundTruthObject& gt,
                                                const NoiseConfig& cfg,
                                                int num_classes, Rng& rng);

}  // namespace vqd::geometry
