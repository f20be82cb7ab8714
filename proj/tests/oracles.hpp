#pragma once

// Reference implementations used only by the tests. They are written
// independently of the library code they check: brute force, dense grids,
// sampling and finite differences.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "pvl/geom.hpp"
#include "pvl/sparsegrid.hpp"

namespace oracle {

using pvl::Vec3;
using pvl::geom::Box3D;

// Seeded generator for property tests (std engine, independent of pvl::Rng).
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : eng_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(eng_); }
  std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng_); }
  std::mt19937_64& engine() { return eng_; }

  Box3D box(double spread = 3.0) {
    return Box3D(uniform(-spread, spread), uniform(-spread, spread), uniform(-1.0, 1.0),
                 uniform(0.5, 5.0), uniform(0.5, 3.0), uniform(0.5, 2.5),
                 uniform(-std::numbers::pi, std::numbers::pi));
  }

 private:
  std::mt19937_64 eng_;
};

inline bool inside_bev(const Box3D& b, double x, double y) {
  const double dx = x - b.cx, dy = y - b.cy;
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  return std::abs(u) <= b.l / 2 && std::abs(v) <= b.w / 2;
}

// BEV IoU by sampling the joint bounding square. Stratified: one jittered
// sample per cell of a side x side lattice (side^2 samples in total).
inline double mc_bev_iou(const Box3D& a, const Box3D& b, int side, std::uint64_t seed) {
  const double ra = std::hypot(a.l, a.w) / 2, rb = std::hypot(b.l, b.w) / 2;
  const double x0 = std::min(a.cx - ra, b.cx - rb), x1 = std::max(a.cx + ra, b.cx + rb);
  const double y0 = std::min(a.cy - ra, b.cy - rb), y1 = std::max(a.cy + ra, b.cy + rb);
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double hx = (x1 - x0) / side, hy = (y1 - y0) / side;
  std::size_t in_a = 0, in_b = 0, both = 0;
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      const double x = x0 + (i + u(eng)) * hx;
      const double y = y0 + (j + u(eng)) * hy;
      const bool pa = inside_bev(a, x, y), pb = inside_bev(b, x, y);
      in_a += pa;
      in_b += pb;
      both += pa && pb;
    }
  }
  const std::size_t uni = in_a + in_b - both;
  return uni ? static_cast<double>(both) / static_cast<double>(uni) : 0.0;
}

// Dense zero-padded 3x3x3 convolution over the full grid of `t`. Returns a
// dense array indexed [(i*dy + j)*dz + k][cout] on the output lattice.
struct Dense {
  std::array<int, 3> dims{};
  std::size_t width = 0;
  std::vector<double> v;
  double& at(int i, int j, int k, std::size_t c) {
    return v[((static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k) * width + c];
  }
};

inline Dense densify(const pvl::sparse::SparseTensor& t) {
  Dense d;
  d.dims = t.grid().dims;
  d.width = t.width();
  d.v.assign(static_cast<std::size_t>(d.dims[0]) * d.dims[1] * d.dims[2] * d.width, 0.0);
  for (std::size_t r = 0; r < t.size(); ++r) {
    const auto& c = t.coords()[r];
    for (std::size_t ch = 0; ch < d.width; ++ch) d.at(c[0], c[1], c[2], ch) = t.features()(r, ch);
  }
  return d;
}

inline Dense dense_conv(const pvl::sparse::SparseTensor& t, const pvl::sparse::ConvWeights& w, int stride) {
  Dense in = densify(t);
  Dense out;
  for (int a = 0; a < 3; ++a) out.dims[a] = (in.dims[a] + stride - 1) / stride;
  out.width = w.cout;
  out.v.assign(static_cast<std::size_t>(out.dims[0]) * out.dims[1] * out.dims[2] * out.width, 0.0);
  for (int i = 0; i < out.dims[0]; ++i)
    for (int j = 0; j < out.dims[1]; ++j)
      for (int k = 0; k < out.dims[2]; ++k)
        for (int da = -1; da <= 1; ++da)
          for (int db = -1; db <= 1; ++db)
            for (int dc = -1; dc <= 1; ++dc) {
              const int si = i * stride + da, sj = j * stride + db, sk = k * stride + dc;
              if (si < 0 || sj < 0 || sk < 0 || si >= in.dims[0] || sj >= in.dims[1] || sk >= in.dims[2]) continue;
              const int tap = ((da + 1) * 3 + (db + 1)) * 3 + (dc + 1);
              for (std::size_t ci = 0; ci < w.cin; ++ci) {
                const double x = in.at(si, sj, sk, ci);
                if (x == 0.0) continue;
                for (std::size_t co = 0; co < w.cout; ++co) out.at(i, j, k, co) += x * w.taps[(tap * w.cin + ci) * w.cout + co];
              }
            }
  return out;
}

// Greedy farthest point sampling recomputing every distance at each step.
inline std::vector<std::size_t> brute_fps(const std::vector<Vec3>& pts, std::size_t n) {
  std::vector<std::size_t> sel{0};
  while (sel.size() < n && sel.size() < pts.size()) {
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (std::find(sel.begin(), sel.end(), i) != sel.end()) continue;
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t s : sel) {
        const double dx = pts[i][0] - pts[s][0], dy = pts[i][1] - pts[s][1], dz = pts[i][2] - pts[s][2];
        d = std::min(d, dx * dx + dy * dy + dz * dz);
      }
      if (d > best) {
        best = d;
        arg = i;
      }
    }
    sel.push_back(arg);
  }
  return sel;
}

// Central differences of f at x, one coordinate at a time.
inline std::vector<double> numeric_grad(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double eps = 1e-3) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + eps;
    const double fp = f(x);
    x[i] = x0 - eps;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), 1e-8}));
  }
  return worst;
}

}  // namespace oracle
