#include "pvl/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>

#include "pvl/error.hpp"
#include "pvl/evalkit.hpp"
#include "pvl/roihead.hpp"
#include "pvl/rng.hpp"
#include "pvl/rpn.hpp"
#include "pvl/sparsegrid.hpp"
#include "pvl/synth.hpp"
#include "pvl/vsa.hpp"

namespace pvl::checks {

namespace {

using geom::Box3D;

Box3D random_box(Rng& rng, double spread = 3.0) {
  return Box3D(rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-1.0, 1.0),
               rng.uniform(0.5, 5.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 2.5),
               rng.uniform(-std::numbers::pi, std::numbers::pi));
}

std::string fmt(const char* f, double v) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

CheckResult bev_iou_symmetric(const CheckOptions& o) {
  Rng rng(mix_seed(o.seed, 1));
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const Box3D a = random_box(rng), b = random_box(rng);
    const double ab = o.bev_iou(a, b), ba = o.bev_iou(b, a);
    if (!(ab >= 0.0 && ab <= 1.0)) return {"bev_iou_symmetric", false, fmt("value %.17g outside [0,1]", ab)};
    worst = std::max(worst, std::abs(ab - ba));
  }
  return {"bev_iou_symmetric", worst <= 1e-12, fmt("max |iou(a,b) - iou(b,a)| = %.3g", worst)};
}

CheckResult bev_iou_identity(const CheckOptions& o) {
  Rng rng(mix_seed(o.seed, 2));
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Box3D a = random_box(rng);
    worst = std::max(worst, std::abs(o.bev_iou(a, a) - 1.0));
  }
  return {"bev_iou_identity", worst <= 1e-12, fmt("max |iou(a,a) - 1| = %.3g", worst)};
}

CheckResult bev_iou_rectangles(const CheckOptions& o) {
  Rng rng(mix_seed(o.seed, 3));
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    Box3D a = random_box(rng), b = random_box(rng);
    a = Box3D(a.cx, a.cy, a.cz, a.l, a.w, a.h, 0.0);
    b = Box3D(b.cx, b.cy, b.cz, b.l, b.w, b.h, 0.0);
    const double ix = std::max(0.0, std::min(a.cx + a.l / 2, b.cx + b.l / 2) -
                                        std::max(a.cx - a.l / 2, b.cx - b.l / 2));
    const double iy = std::max(0.0, std::min(a.cy + a.w / 2, b.cy + b.w / 2) -
                                        std::max(a.cy - a.w / 2, b.cy - b.w / 2));
    const double inter = ix * iy;
    const double expect = inter / (a.l * a.w + b.l * b.w - inter);
    worst = std::max(worst, std::abs(o.bev_iou(a, b) - expect));
  }
  return {"bev_iou_rectangles", worst <= 1e-9, fmt("max deviation from rectangle arithmetic = %.3g", worst)};
}

CheckResult iou_3d_bounds(const CheckOptions& o) {
  Rng rng(mix_seed(o.seed, 4));
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const Box3D a = random_box(rng), b = random_box(rng);
    const double v = geom::iou_3d(a, b);
    if (!(v >= 0.0 && v <= 1.0)) {
      return {"iou_3d_bounds", false, fmt("value %.17g outside [0,1]", v)};
    }
    worst = std::max(worst, std::abs(v - geom::iou_3d(b, a)));
  }
  return {"iou_3d_bounds", worst <= 1e-12, fmt("max asymmetry %.3g", worst)};
}

CheckResult points_in_box_rigid(const CheckOptions& o) {
  Rng rng(mix_seed(o.seed, 5));
  std::size_t mismatches = 0;
  for (int i = 0; i < 50; ++i) {
    const Box3D box = random_box(rng);
    const double angle = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const Vec3 shift{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-1, 1)};
    const Vec3 c = geom::rotate_z({box.cx, box.cy, box.cz}, angle);
    const Box3D moved(c[0] + shift[0], c[1] + shift[1], c[2] + shift[2], box.l, box.w, box.h,
                      box.theta + angle);
    for (int k = 0; k < 200; ++k) {
      const Vec3 p{box.cx + rng.uniform(-3, 3), box.cy + rng.uniform(-3, 3), box.cz + rng.uniform(-2, 2)};
      // skip points within rounding distance of a face
      const Vec3 local = geom::rotate_z({p[0] - box.cx, p[1] - box.cy, p[2] - box.cz}, -box.theta);
      const double margin = std::min({std::abs(std::abs(local[0]) - box.l / 2),
                                      std::abs(std::abs(local[1]) - box.w / 2),
                                      std::abs(std::abs(local[2]) - box.h / 2)});
      if (margin < 1e-9) continue;
      const Vec3 q = geom::rotate_z(p, angle);
      const Vec3 pm{q[0] + shift[0], q[1] + shift[1], q[2] + shift[2]};
      if (geom::point_in_box(p, box) != geom::point_in_box(pm, moved)) ++mismatches;
    }
  }
  return {"points_in_box_rigid", mismatches == 0, std::to_string(mismatches) + " mismatches"};
}

CheckResult nms_permutation(const CheckOptions& o) {
  Rng rng(mix_seed(o.seed, 6));
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<geom::Detection> dets;
    for (int i = 0; i < 30; ++i) {
      dets.push_back(geom::make_detection(random_box(rng, 4.0), std::floor(rng.uniform() * 10) / 10));
    }
    auto boxes_of = [](const std::vector<geom::Detection>& d, const std::vector<std::size_t>& keep) {
      std::vector<std::array<double, 8>> out;
      for (std::size_t k : keep) {
        const Box3D& b = d[k].box;
        out.push_back({b.cx, b.cy, b.cz, b.l, b.w, b.h, b.theta, d[k].score});
      }
      std::sort(out.begin(), out.end());
      return out;
    };
    // distinct scores make the kept set permutation independent
    for (std::size_t i = 0; i < dets.size(); ++i) dets[i].score = (static_cast<double>(i) + 0.5) / 31.0;
    const auto base = boxes_of(dets, geom::nms(dets, 0.3));
    std::vector<geom::Detection> shuffled = dets;
    for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    if (boxes_of(shuffled, geom::nms(shuffled, 0.3)) != base) {
      return {"nms_permutation", false, "kept set changed under input permutation"};
    }
  }
  return {"nms_permutation", true, "20 shuffles"};
}

CheckResult roi_grid_inside(const CheckOptions& o) {
  Rng rng(mix_seed(o.seed, 7));
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const Box3D b = random_box(rng);
    const auto pts = geom::roi_grid_points(b);
    Vec3 mean{0, 0, 0};
    for (const Vec3& p : pts) {
      if (!geom::point_in_box(p, b)) return {"roi_grid_inside", false, "grid point outside its box"};
      for (int a = 0; a < 3; ++a) mean[a] += p[a] / static_cast<double>(pts.size());
    }
    worst = std::max({worst, std::abs(mean[0] - b.cx), std::abs(mean[1] - b.cy), std::abs(mean[2] - b.cz)});
  }
  return {"roi_grid_inside", worst <= 1e-9, fmt("max centroid offset %.3g", worst)};
}

CheckResult sparse_conv_sites(const CheckOptions& o) {
  Rng rng(mix_seed(o.seed, 8));
  sparse::GridSpec grid{{0, 0, 0}, {0.1, 0.1, 0.1}, {9, 9, 9}};
  std::vector<sparse::Coord> sites;
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 9; ++j)
      for (int k = 0; k < 9; ++k)
        if (rng.uniform() < 0.1) sites.push_back({i, j, k});
  Matrix f(sites.size(), 2);
  for (double& v : f.data()) v = rng.uniform(-1, 1);
  const auto t = sparse::SparseTensor::from_sites(1, grid, sites, f);
  sparse::ConvWeights w(2, 3);
  for (double& v : w.taps) v = rng.uniform(-1, 1);
  const auto sub = sparse::sparse_conv(t, w, 1, sparse::ConvMode::Submanifold);
  if (sub.coords() != t.coords()) return {"sparse_conv_sites", false, "submanifold changed the active set"};
  const auto down = sparse::sparse_conv(t, w, 2, sparse::ConvMode::Strided);
  const bool dims_ok = down.grid().dims == sparse::Coord{5, 5, 5} && down.level() == 2;
  return {"sparse_conv_sites", dims_ok, dims_ok ? "sites preserved, stride-2 dims 5^3" : "bad stride-2 lattice"};
}

CheckResult fps_monotone(const CheckOptions& o) {
  Rng rng(mix_seed(o.seed, 9));
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Vec3> pts(64 + rng.below(128));
    for (Vec3& p : pts) p = {rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 2)};
    const auto sel = vsa::fps(pts, 32);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t s = 1; s < sel.size(); ++s) {
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < s; ++t) {
        if (sel[t] == sel[s]) return {"fps_monotone", false, "duplicate selection"};
        const Vec3& a = pts[sel[s]];
        const Vec3& b = pts[sel[t]];
        d = std::min(d, std::hypot(a[0] - b[0], a[1] - b[1], a[2] - b[2]));
      }
      if (d > prev + 1e-12) return {"fps_monotone", false, "selection distance increased"};
      prev = d;
    }
  }
  return {"fps_monotone", true, "20 clouds"};
}

CheckResult codec_round_trip(const CheckOptions& o) {
  Rng rng(mix_seed(o.seed, 10));
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Box3D gt = random_box(rng), anchor = random_box(rng);
    const Box3D back = rpn::decode_residual(rpn::encode_residual(gt, anchor), anchor);
    const double dt = std::abs(geom::normalize_angle(back.theta - gt.theta));
    worst = std::max({worst, std::abs(back.cx - gt.cx), std::abs(back.cy - gt.cy), std::abs(back.cz - gt.cz),
                      std::abs(back.l - gt.l), std::abs(back.w - gt.w), std::abs(back.h - gt.h), dt});
  }
  return {"codec_round_trip", worst <= 1e-9, fmt("max error %.3g", worst)};
}

CheckResult set_abstraction_permutation(const CheckOptions& o) {
  Rng rng(mix_seed(o.seed, 11));
  const nn::MlpParams mlp = nn::init_params({4 + 3, 16, 16}, mix_seed(o.seed, 12));
  const std::size_t n = 20;
  Matrix f(n, 4);
  for (double& v : f.data()) v = rng.normal();
  std::vector<Vec3> pos(n);
  for (Vec3& p : pos) p = {rng.normal(), rng.normal(), rng.normal()};
  const Vec3 c{0.1, -0.2, 0.3};
  const auto base = vsa::set_abstraction(c, f, pos, mlp);
  for (int t = 0; t < 50; ++t) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    Matrix pf(n, 4);
    std::vector<Vec3> pp(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(f.row(perm[i]).begin(), f.row(perm[i]).end(), pf.row(i).begin());
      pp[i] = pos[perm[i]];
    }
    if (vsa::set_abstraction(c, pf, pp, mlp) != base) {
      return {"set_abstraction_permutation", false, "output changed under neighbor shuffle"};
    }
  }
  const auto empty = vsa::set_abstraction(c, Matrix(0, 4), {}, mlp);
  const bool zero = std::all_of(empty.begin(), empty.end(), [](double v) { return v == 0.0; });
  return {"set_abstraction_permutation", zero, zero ? "50 shuffles bitwise equal" : "empty set not zero"};
}

CheckResult confidence_target_exact(const CheckOptions&) {
  for (int i = 0; i <= 10; ++i) {
    const double iou = i / 10.0;
    const double expect = std::min(1.0, std::max(0.0, 2.0 * iou - 0.5));
    if (roi::confidence_target(iou) != expect) {
      return {"confidence_target_exact", false, fmt("mismatch at iou %.1f", iou)};
    }
  }
  const bool anchors = roi::confidence_target(0.25) == 0.0 && roi::confidence_target(0.5) == 0.5 &&
                       roi::confidence_target(0.75) == 1.0;
  return {"confidence_target_exact", anchors, anchors ? "11 grid values and anchors exact" : "anchor mismatch"};
}

CheckResult ap_hand_case(const CheckOptions&) {
  const std::vector<char> flags{1, 0};
  const std::vector<double> scores{0.9, 0.8};
  const double r11 = eval::average_precision(flags, scores, 2, eval::ApMode::R11);
  const double r40 = eval::average_precision(flags, scores, 2, eval::ApMode::R40);
  const bool ok = r11 == 6.0 / 11.0 && r40 == 0.5;
  return {"ap_hand_case", ok, fmt("R11 %.17g", r11) + fmt(", R40 %.17g", r40)};
}

synth::SceneConfig small_scene() {
  synth::SceneConfig cfg;
  cfg.range = {{0.0, -10.0, -3.0}, {20.0, 10.0, 1.0}};
  cfg.ground_points = 1000;
  cfg.classes.front().count = 3;
  return cfg;
}

CheckResult scene_round_trip(const CheckOptions& o) {
  const synth::SceneSample s = synth::gen_scene(small_scene(), o.seed);
  const std::string bytes = synth::encode_scene(s);
  const bool ok = synth::encode_scene(synth::decode_scene(bytes)) == bytes;
  return {"scene_round_trip", ok, std::to_string(bytes.size()) + " bytes"};
}

CheckResult augment_membership(const CheckOptions& o) {
  const synth::SceneSample s = synth::gen_scene(small_scene(), o.seed + 1);
  synth::AugmentParams p{true, 0.3, 1.03};
  const synth::SceneSample a = synth::augment(s, p);
  const auto before = s.positions();
  const auto after = a.positions();
  std::size_t changed = 0;
  for (std::size_t b = 0; b < s.gt_boxes.size(); ++b) {
    const auto m0 = geom::points_in_box(before, s.gt_boxes[b].box);
    const auto m1 = geom::points_in_box(after, a.gt_boxes[b].box);
    for (std::size_t i = 0; i < m0.size(); ++i) changed += m0[i] != m1[i] ? 1 : 0;
  }
  return {"augment_membership", changed == 0, std::to_string(changed) + " membership changes"};
}

CheckResult gt_paste_disjoint(const CheckOptions& o) {
  const synth::SceneSample s = synth::gen_scene(small_scene(), o.seed + 2);
  const std::vector<synth::SceneSample> donors{synth::gen_scene(small_scene(), o.seed + 3)};
  const synth::SceneSample p = synth::gt_paste(s, donors, 3, o.seed);
  const bool ok = synth::boxes_bev_disjoint(p.gt_boxes);
  return {"gt_paste_disjoint", ok, std::to_string(p.gt_boxes.size()) + " boxes after paste"};
}

}  // namespace

std::vector<std::string> fixtures() { return {"iou-perturb"}; }

void inject(CheckOptions& opts, const std::string& fixture) {
  if (fixture == "iou-perturb") {
    // asymmetric bias: only the first argument's position shifts the result
    opts.bev_iou = [](const geom::Box3D& a, const geom::Box3D& b) {
      const double v = geom::bev_iou(a, b);
      return a.cx > b.cx ? std::min(1.0, v + 1e-3) : v;
    };
    return;
  }
  throw ValidationError("unknown fixture '" + fixture + "'");
}

std::vector<CheckResult> run_checks(const CheckOptions& opts) {
  using Fn = CheckResult (*)(const CheckOptions&);
  const std::pair<const char*, Fn> all[] = {
      {"bev_iou_symmetric", bev_iou_symmetric},
      {"bev_iou_identity", bev_iou_identity},
      {"bev_iou_rectangles", bev_iou_rectangles},
      {"iou_3d_bounds", iou_3d_bounds},
      {"points_in_box_rigid", points_in_box_rigid},
      {"nms_permutation", nms_permutation},
      {"roi_grid_inside", roi_grid_inside},
      {"sparse_conv_sites", sparse_conv_sites},
      {"fps_monotone", fps_monotone},
      {"codec_round_trip", codec_round_trip},
      {"set_abstraction_permutation", set_abstraction_permutation},
      {"confidence_target_exact", confidence_target_exact},
      {"ap_hand_case", ap_hand_case},
      {"scene_round_trip", scene_round_trip},
      {"augment_membership", augment_membership},
      {"gt_paste_disjoint", gt_paste_disjoint},
  };
  std::vector<CheckResult> out;
  for (const auto& [name, fn] : all) {
    try {
      out.push_back(fn(opts));
    } catch (const std::exception& e) {
      out.push_back({name, false, std::string("threw: ") + e.what()});
    }
  }
  return out;
}

}  // namespace pvl::checks
