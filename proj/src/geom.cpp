#include "pvl/geom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "pvl/error.hpp"

namespace pvl::geom {

namespace {

using Point2 = std::array<double, 2>;

constexpr double kCollinearEps = 1e-9;
constexpr double kInsideSlack = 1e-9;

double cross(const Point2& o, const Point2& a, const Point2& b) {
  return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

double shoelace(const std::vector<Point2>& poly) {
  if (poly.size() < 3) return 0.0;
  double area = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Point2& p = poly[i];
    const Point2& q = poly[(i + 1) % poly.size()];
    area += p[0] * q[1] - q[0] * p[1];
  }
  return 0.5 * std::abs(area);
}

// Sutherland-Hodgman: keep the part of `subject` left of the directed edge a->b.
std::vector<Point2> clip_half_plane(const std::vector<Point2>& subject, const Point2& a,
                                    const Point2& b) {
  std::vector<Point2> out;
  out.reserve(subject.size() + 2);
  const double edge_len = std::hypot(b[0] - a[0], b[1] - a[1]);
  auto side = [&](const Point2& p) { return cross(a, b, p) / edge_len; };
  for (std::size_t i = 0; i < subject.size(); ++i) {
    const Point2& cur = subject[i];
    const Point2& nxt = subject[(i + 1) % subject.size()];
    const double sc = side(cur);
    const double sn = side(nxt);
    const bool cur_in = sc >= -kCollinearEps;
    const bool nxt_in = sn >= -kCollinearEps;
    if (cur_in) out.push_back(cur);
    if (cur_in != nxt_in && std::abs(sc - sn) > 0.0) {
      const double t = sc / (sc - sn);
      if (t > 0.0 && t < 1.0) {
        out.push_back({cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])});
      }
    }
  }
  return out;
}

}  // namespace

double normalize_angle(double radians) {
  if (radians >= -std::numbers::pi && radians < std::numbers::pi) return radians;
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double a = std::fmod(radians + std::numbers::pi, two_pi);
  if (a < 0.0) a += two_pi;
  a -= std::numbers::pi;
  if (a >= std::numbers::pi) a -= two_pi;
  if (a < -std::numbers::pi) a = -std::numbers::pi;
  return a;
}

Box3D::Box3D(double cx_, double cy_, double cz_, double l_, double w_, double h_, double theta_)
    : cx(cx_), cy(cy_), cz(cz_), l(l_), w(w_), h(h_), theta(normalize_angle(theta_)) {
  if (!(l > 0.0 && w > 0.0 && h > 0.0) || !std::isfinite(l) || !std::isfinite(w) ||
      !std::isfinite(h)) {
    throw ValidationError("box extents must be positive and finite");
  }
  if (!std::isfinite(cx) || !std::isfinite(cy) || !std::isfinite(cz) || !std::isfinite(theta)) {
    throw ValidationError("box center and yaw must be finite");
  }
}

std::array<std::array<double, 2>, 4> Box3D::bev_corners() const {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const double hl = 0.5 * l;
  const double hw = 0.5 * w;
  const std::array<Point2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Point2, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = {cx + c * local[i][0] - s * local[i][1], cy + s * local[i][0] + c * local[i][1]};
  }
  return out;
}

Detection make_detection(const Box3D& box, double score, int class_id) {
  if (!std::isfinite(score) || score < 0.0 || score > 1.0) {
    throw ValidationError("detection score must be finite and within [0,1], got " +
                          std::to_string(score));
  }
  return Detection{box, score, class_id};
}

double bev_intersection_area(const Box3D& a, const Box3D& b) {
  const double reach = 0.5 * (std::hypot(a.l, a.w) + std::hypot(b.l, b.w));
  const double dx = a.cx - b.cx;
  const double dy = a.cy - b.cy;
  if (dx * dx + dy * dy > reach * reach) return 0.0;

  const auto ca = a.bev_corners();
  const auto cb = b.bev_corners();
  std::vector<Point2> poly(ca.begin(), ca.end());
  for (std::size_t i = 0; i < 4 && !poly.empty(); ++i) {
    poly = clip_half_plane(poly, cb[i], cb[(i + 1) % 4]);
  }
  return shoelace(poly);
}

double bev_iou(const Box3D& a, const Box3D& b) {
  const double inter = bev_intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.l * a.w + b.l * b.w - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double iou_3d(const Box3D& a, const Box3D& b) {
  const double dz = std::min(a.top(), b.top()) - std::max(a.bottom(), b.bottom());
  if (dz <= 0.0) return 0.0;
  const double inter = bev_intersection_area(a, b) * dz;
  if (inter <= 0.0) return 0.0;
  const double uni = a.volume() + b.volume() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double iou(const Box3D& a, const Box3D& b, IouKind kind) {
  return kind == IouKind::Bev ? bev_iou(a, b) : iou_3d(a, b);
}

Vec3 rotate_z(const Vec3& p, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return {c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]};
}

bool point_in_box(const Vec3& p, const Box3D& box) {
  const double dz = p[2] - box.cz;
  if (std::abs(dz) > 0.5 * box.h + kInsideSlack) return false;
  const Vec3 local = rotate_z({p[0] - box.cx, p[1] - box.cy, 0.0}, -box.theta);
  return std::abs(local[0]) <= 0.5 * box.l + kInsideSlack &&
         std::abs(local[1]) <= 0.5 * box.w + kInsideSlack;
}

std::vector<char> points_in_box(std::span<const Vec3> points, const Box3D& box) {
  std::vector<char> mask(points.size(), 0);
  for (std::size_t i = 0; i < points.size(); ++i) mask[i] = point_in_box(points[i], box) ? 1 : 0;
  return mask;
}

std::vector<std::size_t> nms(std::span<const Detection> dets, double iou_threshold, IouKind kind,
                             std::size_t max_keep) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return dets[x].score > dets[y].score;
  });

  std::vector<std::size_t> keep;
  for (std::size_t idx : order) {
    bool suppressed = false;
    for (std::size_t k : keep) {
      if (iou(dets[idx].box, dets[k].box, kind) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (suppressed) continue;
    keep.push_back(idx);
    if (max_keep != 0 && keep.size() >= max_keep) break;
  }
  return keep;
}

std::vector<Vec3> roi_grid_points(const Box3D& box, int resolution) {
  if (resolution <= 0) throw ValidationError("grid resolution must be positive");
  std::vector<Vec3> pts;
  pts.reserve(static_cast<std::size_t>(resolution) * resolution * resolution);
  const double c = std::cos(box.theta);
  const double s = std::sin(box.theta);
  auto offset = [resolution](int i) { return (i + 0.5) / resolution - 0.5; };
  for (int i = 0; i < resolution; ++i) {
    for (int j = 0; j < resolution; ++j) {
      for (int k = 0; k < resolution; ++k) {
        const double lx = offset(i) * box.l;
        const double ly = offset(j) * box.w;
        const double lz = offset(k) * box.h;
        pts.push_back({box.cx + c * lx - s * ly, box.cy + s * lx + c * ly, box.cz + lz});
      }
    }
  }
  return pts;
}

}  // namespace pvl::geom
