#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "pvl/error.hpp"
#include "pvl/rng.hpp"
#include "pvl/rpn.hpp"
#include "pvl/vsa.hpp"

using namespace pvl;
using namespace pvl::vsa;

namespace {

std::vector<Vec3> cloud(oracle::Gen& g, std::size_t n, double extent) {
  std::vector<Vec3> p(n);
  for (auto& v : p) v = {g.uniform(0, extent), g.uniform(0, extent), g.uniform(0, extent / 2)};
  return p;
}

double dist2(const Vec3& a, const Vec3& b) {
  return (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]);
}

struct Scene {
  std::vector<sparse::LidarPoint> raw;
  std::array<sparse::SparseTensor, 4> levels;
  sparse::BevMap bev;
};

Scene small_scene(std::uint64_t seed, std::size_t n) {
  oracle::Gen g(seed);
  Scene s;
  for (std::size_t i = 0; i < n; ++i) s.raw.push_back({g.uniform(0, 6.4), g.uniform(-3.2, 3.2), g.uniform(-2, 0.4), g.uniform(0, 1)});
  sparse::PointRange r;
  r.min = {0, -3.2, -2};
  r.max = {6.4, 3.2, 0.4};
  const auto l1 = sparse::voxelize(s.raw, r, {0.2, 0.2, 0.2});
  s.levels = sparse::run_backbone(l1, sparse::BackboneParams::random(4, sparse::kBackboneWidths, seed));
  s.bev = sparse::bev_collapse(s.levels[3]);
  return s;
}

}  // namespace

TEST_CASE("fps hand cases") {
  const std::vector<Vec3> square{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}};
  CHECK(fps(square, 2) == std::vector<std::size_t>{0, 3});
  const std::vector<Vec3> same(5, Vec3{1, 2, 3});
  const auto s = fps(same, 3);
  CHECK(s.size() == 3);
  for (auto i : s) CHECK(i < 5);
  // fewer points than requested: cycles
  CHECK(fps(square, 6).size() == 6);
  CHECK(fps(std::vector<Vec3>{{0, 0, 0}}, 3) == std::vector<std::size_t>{0, 0, 0});
  CHECK_THROWS_AS(fps(std::vector<Vec3>{}, 1), ValidationError);
}

TEST_CASE("fps matches the brute-force greedy oracle") {
  oracle::Gen g(51);
  for (int t = 0; t < 40; ++t) {
    const std::size_t n_pts = 1 + g.below(256), n = 1 + g.below(32);
    auto pts = cloud(g, n_pts, 4.0);
    // duplicates exercise the tie-break
    if (t % 4 == 0 && n_pts > 4) pts[n_pts - 1] = pts[1];
    const auto got = fps(pts, n);
    if (n_pts >= n) {
      CHECK(got == oracle::brute_fps(pts, n));
      std::vector<std::size_t> sorted(got);
      std::sort(sorted.begin(), sorted.end());
      CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    }
    // min distance from each new pick to the earlier picks never grows
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k < std::min(n, n_pts); ++k) {
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) d = std::min(d, dist2(pts[got[k]], pts[got[j]]));
      CHECK(d <= prev);
      prev = d;
    }
  }
}

TEST_CASE("radius_query") {
  const std::vector<Vec3> pts{{0, 0, 0}, {1, 0, 0}, {0, 0.5, 0}};
  const std::vector<Vec3> far{{10, 10, 10}};
  CHECK(radius_query_brute(far, pts, 1.0)[0].empty());
  const std::vector<Vec3> q{{0, 0, 0}};
  // strict inequality: the point at distance exactly 1 is excluded
  CHECK(radius_query_brute(q, pts, 1.0)[0] == std::vector<std::size_t>{0, 2});
  CHECK(radius_query_grid(q, pts, 1.0)[0] == std::vector<std::size_t>{0, 2});
  CHECK_THROWS_AS(radius_query_grid(q, pts, 0.0), ValidationError);

  oracle::Gen g(52);
  for (int t = 0; t < 100; ++t) {
    const auto p = cloud(g, 50 + g.below(300), 5.0);
    const auto qs = cloud(g, 20, 6.0);
    const double r = g.uniform(0.1, 2.0);
    CHECK(radius_query_grid(qs, p, r) == radius_query_brute(qs, p, r));
  }
}

TEST_CASE("radius_query cap and seeding") {
  oracle::Gen g(53);
  const auto p = cloud(g, 400, 2.0);
  const std::vector<Vec3> qs{{1, 1, 0.5}, {0.5, 0.5, 0.5}};
  const auto full = radius_query_brute(qs, p, 1.0);
  REQUIRE(full[0].size() > 16);
  const auto capped = radius_query(qs, p, 1.0, 16, 7);
  for (std::size_t q = 0; q < qs.size(); ++q) {
    CHECK(capped[q].size() == std::min<std::size_t>(16, full[q].size()));
    CHECK(std::is_sorted(capped[q].begin(), capped[q].end()));
    for (auto i : capped[q]) CHECK(std::binary_search(full[q].begin(), full[q].end(), i));
  }
  CHECK(radius_query(qs, p, 1.0, 16, 7) == capped);
  CHECK(radius_query(qs, p, 1.0, 16, 8) != capped);
  // one query alone draws the same subset as inside a batch
  const std::vector<Vec3> first{qs[0]};
  CHECK(radius_query(first, p, 1.0, 16, 7)[0] == capped[0]);

  // subsample keeps each index with equal frequency
  std::vector<std::size_t> idx(10);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<int> hits(10, 0);
  Rng rng(3);
  for (int t = 0; t < 20000; ++t)
    for (auto i : subsample(idx, 3, rng)) ++hits[i];
  for (int h : hits) CHECK(std::abs(h - 6000) < 300);
}

TEST_CASE("set_abstraction") {
  const auto mlp = nn::init_params({5, 8, 8}, 4);
  const Vec3 c{1, 2, 3};
  SUBCASE("empty neighborhood") {
    const auto out = set_abstraction(c, Matrix(0, 2), std::vector<Vec3>{}, mlp);
    CHECK(out == std::vector<double>(8, 0.0));
  }
  SUBCASE("single neighbor") {
    Matrix f(1, 2);
    f(0, 0) = 0.3;
    f(0, 1) = -0.7;
    const std::vector<Vec3> pos{{1.5, 1.0, 3.25}};
    const auto out = set_abstraction(c, f, pos, mlp);
    CHECK(out == nn::mlp_forward(mlp, std::vector<double>{0.3, -0.7, 0.5, -1.0, 0.25}));
  }
  SUBCASE("width mismatch") { CHECK_THROWS_AS(set_abstraction(c, Matrix(1, 3), std::vector<Vec3>{c}, mlp), ValidationError); }
}

TEST_CASE("set_abstraction is permutation invariant and translation covariant") {
  oracle::Gen g(54);
  const auto mlp = nn::init_params({7, 16, 16}, 5);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 1 + g.below(40);
    Matrix f(n, 4);
    for (auto& v : f.data()) v = g.uniform(-1, 1);
    const auto pos = cloud(g, n, 2.0);
    const Vec3 c{1, 1, 0.5};
    const auto ref = set_abstraction(c, f, pos, mlp);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), g.engine());
    Matrix pf(n, 4);
    std::vector<Vec3> pp(n);
    for (std::size_t i = 0; i < n; ++i) {
      pp[i] = pos[perm[i]];
      for (std::size_t k = 0; k < 4; ++k) pf(i, k) = f(perm[i], k);
    }
    CHECK(set_abstraction(c, pf, pp, mlp) == ref);
    const Vec3 s{g.uniform(-5, 5), g.uniform(-5, 5), g.uniform(-5, 5)};
    std::vector<Vec3> moved(pos);
    for (auto& p : moved)
      for (int a = 0; a < 3; ++a) p[a] += s[a];
    const auto tr = set_abstraction({c[0] + s[0], c[1] + s[1], c[2] + s[2]}, f, moved, mlp);
    for (std::size_t k = 0; k < ref.size(); ++k) CHECK(std::abs(tr[k] - ref[k]) < 1e-9);
  }
}

TEST_CASE("abstract_features agrees with set_abstraction") {
  oracle::Gen g(55);
  const auto mlp = nn::init_params({5, 8, 6}, 6);
  const auto src = cloud(g, 120, 3.0);
  Matrix f(src.size(), 2);
  for (auto& v : f.data()) v = g.uniform(-1, 1);
  const auto centers = cloud(g, 15, 3.0);
  const auto nb = radius_query(centers, src, 0.8, 16, 1);
  const Matrix batch = abstract_features(centers, src, f, nb, mlp);
  for (std::size_t q = 0; q < centers.size(); ++q) {
    Matrix nf(nb[q].size(), 2);
    std::vector<Vec3> np;
    for (std::size_t j = 0; j < nb[q].size(); ++j) {
      np.push_back(src[nb[q][j]]);
      for (std::size_t k = 0; k < 2; ++k) nf(j, k) = f(nb[q][j], k);
    }
    const auto one = set_abstraction(centers[q], nf, np, mlp);
    for (std::size_t k = 0; k < 6; ++k) CHECK(std::abs(batch(q, k) - one[k]) < 1e-12);
  }
}

TEST_CASE("vsa_multi_level and extended_vsa") {
  VsaConfig cfg;
  const auto mlps = VsaMlps::random(cfg, sparse::kBackboneWidths, 9);
  CHECK(cfg.pv_width() == 256);
  const auto s = small_scene(56, 1500);
  std::vector<Vec3> pts;
  for (const auto& p : s.raw) pts.push_back({p.x, p.y, p.z});
  std::vector<Vec3> kp;
  for (auto i : fps(pts, 64)) kp.push_back(pts[i]);
  kp.push_back({500, 500, 0});  // outside every map

  const auto f = extended_vsa(kp, s.raw, s.levels, s.bev, cfg, mlps, 3);
  CHECK(f.pv.cols() == 256);
  CHECK(f.raw.cols() == cfg.raw_width());
  CHECK(f.bev.cols() == s.bev.channels());
  CHECK(f.concat.cols() == 256 + cfg.raw_width() + s.bev.channels());
  CHECK(f.concat.rows() == kp.size());
  for (double v : f.concat.data()) CHECK(std::isfinite(v));
  // blocks are laid out pv, raw, bev
  for (std::size_t r = 0; r < kp.size(); ++r) {
    CHECK(f.concat(r, 0) == f.pv(r, 0));
    CHECK(f.concat(r, 256) == f.raw(r, 0));
    CHECK(f.concat(r, 256 + cfg.raw_width()) == f.bev(r, 0));
  }
  const std::size_t last = kp.size() - 1;
  for (std::size_t c = 0; c < f.concat.cols(); ++c) CHECK(f.concat(last, c) == 0.0);
  CHECK(vsa_multi_level(kp, s.levels, cfg, mlps, 3) == f.pv);

  // doubling level features doubles f^(pv) with bias-free rectifier branches
  std::array<sparse::SparseTensor, 4> doubled;
  for (int k = 0; k < 4; ++k) {
    Matrix m = s.levels[k].features();
    for (auto& v : m.data()) v *= 2;
    doubled[k] = s.levels[k].with_features(m);
  }
  // G also sees relative positions, so homogeneity only holds once the
  // offset rows of the first layer are zeroed
  VsaMlps flat = mlps;
  for (auto& lvl : flat.levels)
    for (auto& br : lvl) {
      auto& w = br.layers[0].weight;
      for (std::size_t r = w.rows() - 3; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) w(r, c) = 0.0;
    }
  const Matrix a = vsa_multi_level(kp, s.levels, cfg, flat, 3);
  const Matrix b = vsa_multi_level(kp, doubled, cfg, flat, 3);
  for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(std::abs(b.data()[i] - 2 * a.data()[i]) < 1e-9);

  // empty scene
  std::array<sparse::SparseTensor, 4> empty;
  for (int k = 0; k < 4; ++k) empty[k] = sparse::SparseTensor(k + 1, s.levels[k].grid(), sparse::kBackboneWidths[k]);
  for (double v : vsa_multi_level(kp, empty, cfg, mlps, 3).data()) CHECK(v == 0.0);
}

TEST_CASE("segmentation labels and pkw") {
  const std::vector<geom::LabeledBox> gts{{geom::Box3D(2, 0, 0, 2, 1, 1, 0.4), 0}};
  oracle::Gen g(57);
  std::vector<Vec3> kp;
  for (int i = 0; i < 300; ++i) kp.push_back({g.uniform(0, 4), g.uniform(-2, 2), g.uniform(-1, 1)});
  const auto labels = segmentation_labels(kp, gts);
  for (std::size_t i = 0; i < kp.size(); ++i) {
    const bool in = oracle::inside_bev(gts[0].box, kp[i][0], kp[i][1]) && std::abs(kp[i][2]) <= 0.5;
    CHECK(labels[i] == (in ? 1 : 0));
  }

  Matrix ones(kp.size(), 3, 1.0);
  // a scorer that outputs exactly 0.5: all weights zero
  const auto half = nn::zero_params({3, 4, 4, 1}, nn::OutputActivation::Sigmoid);
  const auto r = pkw(ones, kp, gts, half);
  for (double v : r.weighted.data()) CHECK(v == 0.5);
  CHECK(r.labels == labels);
  // a saturating scorer
  auto sat = nn::zero_params({3, 4, 4, 1}, nn::OutputActivation::Sigmoid);
  sat.layers[2].bias[0] = 1000;
  const auto rs = pkw(ones, kp, gts, sat);
  for (double s : rs.scores) {
    CHECK(s > 0.0);
    CHECK(s < 1.0);
  }
  for (double v : rs.weighted.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_THROWS_AS(pkw(ones, kp, gts, nn::zero_params({3, 2}, nn::OutputActivation::Sigmoid)), ValidationError);
}

TEST_CASE("seg_loss") {
  CHECK(seg_loss(std::vector<double>{1.0, 0.0}, std::vector<int>{1, 0}) < 1e-9);
  const std::vector<double> half(10, 0.5);
  const std::vector<int> bg(10, 0);
  CHECK(seg_loss(half, bg) == doctest::Approx(10 * rpn::focal_loss(std::vector<double>{0.5}, std::vector<int>{0})));
  oracle::Gen g(58);
  std::vector<double> s(20);
  std::vector<int> l(20);
  for (std::size_t i = 0; i < 20; ++i) {
    s[i] = g.uniform(0.05, 0.95);
    l[i] = static_cast<int>(g.below(2));
  }
  std::vector<double> grad;
  seg_loss(s, l, &grad);
  const auto fd = oracle::numeric_grad([&](const std::vector<double>& v) { return seg_loss(v, l); }, s, 1e-5);
  CHECK(oracle::max_rel_err(grad, fd) < 1e-4);
}
