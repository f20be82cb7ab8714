#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "pvl/matrix.hpp"

namespace pvl::geom {

// Wraps an angle into [-pi, pi).
double normalize_angle(double radians);

// Oriented box: center, extents (l along heading, w across, h vertical) and
// yaw about +Z. The constructor rejects non-positive extents and normalizes
// theta.
struct Box3D {
  double cx = 0.0, cy = 0.0, cz = 0.0;
  double l = 1.0, w = 1.0, h = 1.0;
  double theta = 0.0;

  Box3D() = default;
  Box3D(double cx, double cy, double cz, double l, double w, double h, double theta);

  double volume() const { return l * w * h; }
  double bottom() const { return cz - 0.5 * h; }
  double top() const { return cz + 0.5 * h; }
  Vec3 center() const { return {cx, cy, cz}; }

  // Ground-plane corners, counter-clockwise.
  std::array<std::array<double, 2>, 4> bev_corners() const;

  bool operator==(const Box3D&) const = default;
};

struct Detection {
  Box3D box;
  double score = 0.0;
  int class_id = 0;
};

// Throws ValidationError when the score is not a finite value in [0,1].
Detection make_detection(const Box3D& box, double score, int class_id = 0);

struct LabeledBox {
  Box3D box;
  int class_id = 0;
};

enum class IouKind { Bev, ThreeD };

// Area of the overlap of the two yawed footprints (convex clipping).
double bev_intersection_area(const Box3D& a, const Box3D& b);
double bev_iou(const Box3D& a, const Box3D& b);
double iou_3d(const Box3D& a, const Box3D& b);
double iou(const Box3D& a, const Box3D& b, IouKind kind);

// Rotation about +Z through the origin.
Vec3 rotate_z(const Vec3& p, double angle);

// Closed-box containment in the box frame. A slack of 1e-9 m absorbs the
// rounding of the inverse rotation so boundary points stay inside.
bool point_in_box(const Vec3& p, const Box3D& box);
std::vector<char> points_in_box(std::span<const Vec3> points, const Box3D& box);

// Greedy NMS. Returns indices into `dets` in descending score order; equal
// scores are visited in ascending index order. A candidate is dropped when
// its IoU with any kept detection exceeds `iou_threshold`. Stops once
// `max_keep` detections are kept (0 = unlimited).
std::vector<std::size_t> nms(std::span<const Detection> dets, double iou_threshold,
                             IouKind kind = IouKind::ThreeD, std::size_t max_keep = 0);

// Cell centers of a resolution^3 lattice inside the box, (i, j, k) lexicographic
// with i along l, j along w, k along h.
std::vector<Vec3> roi_grid_points(const Box3D& box, int resolution = 6);

}  // namespace pvl::geom
