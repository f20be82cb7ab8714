#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "oracles.hpp"
#include "pvl/error.hpp"
#include "pvl/sparsegrid.hpp"

using namespace pvl;
using namespace pvl::sparse;

namespace {

PointRange unit_range(double extent) {
  PointRange r;
  r.min = {0, 0, 0};
  r.max = {extent, extent, extent};
  return r;
}

SparseTensor random_tensor(oracle::Gen& g, int side, double occupancy, std::size_t width) {
  GridSpec grid{{0, 0, 0}, {1, 1, 1}, {side, side, side}};
  std::vector<Coord> coords;
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j)
      for (int k = 0; k < side; ++k)
        if (g.uniform(0, 1) < occupancy) coords.push_back({i, j, k});
  Matrix f(coords.size(), width);
  for (auto& v : f.data()) v = g.uniform(-1, 1);
  return SparseTensor::from_sites(1, grid, coords, f);
}

ConvWeights random_weights(oracle::Gen& g, std::size_t cin, std::size_t cout) {
  ConvWeights w(cin, cout);
  for (auto& v : w.taps) v = g.uniform(-1, 1);
  return w;
}

// Max deviation between the sparse result and the dense oracle, plus a check
// that active sites match the expected support.
double conv_error(const SparseTensor& in, const ConvWeights& w, int stride, ConvMode mode) {
  const SparseTensor out = sparse_conv(in, w, stride, mode);
  oracle::Dense ref = oracle::dense_conv(in, w, stride);
  if (mode == ConvMode::Submanifold) CHECK(out.coords() == in.coords());
  CHECK(out.grid().dims == ref.dims);
  double err = 0.0;
  for (std::size_t r = 0; r < out.size(); ++r) {
    const auto& c = out.coords()[r];
    for (std::size_t ch = 0; ch < w.cout; ++ch) {
      err = std::max(err, std::abs(out.features()(r, ch) - ref.at(c[0], c[1], c[2], ch)));
    }
  }
  // sites absent from the output must be zero in the dense result
  oracle::Dense copy = ref;
  for (const auto& c : out.coords())
    for (std::size_t ch = 0; ch < w.cout; ++ch) copy.at(c[0], c[1], c[2], ch) = 0.0;
  if (mode == ConvMode::Strided) {
    for (double v : copy.v) err = std::max(err, std::abs(v));
  }
  return err;
}

}  // namespace

TEST_CASE("voxelize") {
  const Vec3 vs{0.5, 0.5, 0.5};
  SUBCASE("single point") {
    const std::vector<LidarPoint> pts{{0.3, 0.7, 1.2, 0.4}};
    const auto t = voxelize(pts, unit_range(2), vs);
    REQUIRE(t.size() == 1);
    CHECK(t.coords()[0] == Coord{0, 1, 2});
    CHECK(t.features()(0, 0) == 0.3);
    CHECK(t.features()(0, 3) == 0.4);
    CHECK(t.grid().dims == Coord{4, 4, 4});
  }
  SUBCASE("mean of two points") {
    const std::vector<LidarPoint> pts{{0.1, 0.1, 0.1, 0.0}, {0.2, 0.3, 0.4, 1.0}};
    const auto t = voxelize(pts, unit_range(2), vs);
    REQUIRE(t.size() == 1);
    CHECK(t.features()(0, 3) == 0.5);
    CHECK(t.features()(0, 0) == doctest::Approx(0.15));
  }
  SUBCASE("range max is excluded, range min included") {
    const std::vector<LidarPoint> pts{{2.0, 1.0, 1.0, 0}, {1.0, 1.0, 2.0, 0}, {0.0, 0.0, 0.0, 0}};
    const auto t = voxelize(pts, unit_range(2), vs);
    REQUIRE(t.size() == 1);
    CHECK(t.coords()[0] == Coord{0, 0, 0});
  }
  SUBCASE("empty") { CHECK(voxelize(std::vector<LidarPoint>{}, unit_range(2), vs).empty()); }
  SUBCASE("non-positive voxel size") {
    CHECK_THROWS_AS(voxelize(std::vector<LidarPoint>{}, unit_range(2), {0, 1, 1}), ValidationError);
  }
}

TEST_CASE("voxelize is bitwise independent of point order") {
  oracle::Gen g(21);
  std::vector<LidarPoint> pts;
  for (int i = 0; i < 3000; ++i) pts.push_back({g.uniform(0, 4), g.uniform(0, 4), g.uniform(0, 4), g.uniform(0, 1)});
  const auto a = voxelize(pts, unit_range(4), {0.5, 0.5, 0.5});
  for (int t = 0; t < 5; ++t) {
    std::shuffle(pts.begin(), pts.end(), g.engine());
    const auto b = voxelize(pts, unit_range(4), {0.5, 0.5, 0.5});
    CHECK(a.coords() == b.coords());
    CHECK(a.features() == b.features());
  }
}

TEST_CASE("SparseTensor construction") {
  GridSpec grid{{0, 0, 0}, {1, 1, 1}, {4, 4, 4}};
  Matrix f(2, 1);
  f(0, 0) = 1;
  f(1, 0) = 2;
  const auto t = SparseTensor::from_sites(1, grid, {{3, 0, 0}, {0, 1, 2}}, f);
  // sorted by coordinate, features follow their sites
  CHECK(t.coords()[0] == Coord{0, 1, 2});
  CHECK(t.features()(0, 0) == 2);
  CHECK(t.find({3, 0, 0}).value() == 1);
  CHECK_FALSE(t.find({1, 1, 1}).has_value());
  CHECK_THROWS_AS(SparseTensor::from_sites(1, grid, {{0, 0, 0}, {0, 0, 0}}, f), ValidationError);
  CHECK_THROWS_AS(SparseTensor::from_sites(1, grid, {{4, 0, 0}, {0, 0, 0}}, f), ValidationError);
  CHECK_THROWS_AS(SparseTensor::from_sites(1, grid, {{0, 0, 0}}, f), ValidationError);
}

TEST_CASE("sparse_conv identity kernel and empty input") {
  oracle::Gen g(22);
  const auto t = random_tensor(g, 8, 0.1, 3);
  ConvWeights id(3, 3);
  for (std::size_t c = 0; c < 3; ++c) id.at(ConvWeights::tap_index(0, 0, 0), c, c) = 1.0;
  const auto out = sparse_conv(t, id, 1, ConvMode::Submanifold);
  CHECK(out.coords() == t.coords());
  CHECK(out.features() == t.features());

  const SparseTensor empty(1, t.grid(), 3);
  CHECK(sparse_conv(empty, id, 1, ConvMode::Submanifold).empty());
  CHECK(sparse_conv(empty, id, 2, ConvMode::Strided).empty());
  CHECK_THROWS_AS(sparse_conv(t, ConvWeights(2, 3), 1, ConvMode::Submanifold), ValidationError);
  CHECK_THROWS_AS(sparse_conv(t, id, 2, ConvMode::Submanifold), ValidationError);
}

TEST_CASE("sparse_conv matches a dense convolution") {
  oracle::Gen g(23);
  for (int t = 0; t < 6; ++t) {
    const auto in = random_tensor(g, 16, 0.05, 2);
    const auto w = random_weights(g, 2, 3);
    CHECK(conv_error(in, w, 1, ConvMode::Submanifold) < 1e-6);
    CHECK(conv_error(in, w, 1, ConvMode::Strided) < 1e-6);
    CHECK(conv_error(in, w, 2, ConvMode::Strided) < 1e-6);
  }
}

TEST_CASE("sparse_conv is linear in its input") {
  oracle::Gen g(24);
  const auto in = random_tensor(g, 10, 0.1, 2);
  const auto w = random_weights(g, 2, 4);
  Matrix scaled = in.features();
  for (auto& v : scaled.data()) v *= -2.5;
  for (int stride : {1, 2}) {
    const auto mode = stride == 1 ? ConvMode::Submanifold : ConvMode::Strided;
    const auto a = sparse_conv(in, w, stride, mode);
    const auto b = sparse_conv(in.with_features(scaled), w, stride, mode);
    REQUIRE(a.coords() == b.coords());
    for (std::size_t i = 0; i < a.features().data().size(); ++i)
      CHECK(std::abs(b.features().data()[i] + 2.5 * a.features().data()[i]) < 1e-9);
  }
}

TEST_CASE("strided conv halves the lattice") {
  GridSpec grid{{1, 2, 3}, {0.1, 0.1, 0.2}, {5, 4, 3}};
  Matrix f(1, 1, 1.0);
  const auto t = SparseTensor::from_sites(1, grid, {{4, 3, 2}}, f);
  const auto out = sparse_conv(t, ConvWeights(1, 1), 2, ConvMode::Strided);
  CHECK(out.level() == 2);
  CHECK(out.grid().dims == Coord{3, 2, 2});
  CHECK(out.grid().voxel_size[2] == doctest::Approx(0.4));
  CHECK(out.grid().origin == grid.origin);
}

TEST_CASE("run_backbone") {
  const auto params = BackboneParams::random(4, kBackboneWidths, 5);
  GridSpec grid{{0, 0, 0}, {0.1, 0.1, 0.1}, {32, 32, 16}};
  SUBCASE("empty scene") {
    const auto lv = run_backbone(SparseTensor(1, grid, 4), params);
    for (const auto& l : lv) CHECK(l.empty());
  }
  SUBCASE("widths and reachable sites from one voxel") {
    Matrix f(1, 4, 0.5);
    const Coord c{13, 9, 7};
    const auto lv = run_backbone(SparseTensor::from_sites(1, grid, {c}, f), params);
    for (int k = 0; k < 4; ++k) {
      CHECK(lv[k].width() == kBackboneWidths[k]);
      CHECK(lv[k].level() == k + 1);
    }
    // level 1 is submanifold: only the input site
    for (const auto& s : lv[0].coords()) CHECK(s == c);
    // level 2 sites o satisfy |2o - c| <= 1 per axis
    std::set<Coord> reach2;
    for (int a = -1; a <= 1; ++a)
      for (int b = -1; b <= 1; ++b)
        for (int d = -1; d <= 1; ++d) {
          const Coord n{c[0] + a, c[1] + b, c[2] + d};
          if (n[0] % 2 == 0 && n[1] % 2 == 0 && n[2] % 2 == 0) reach2.insert({n[0] / 2, n[1] / 2, n[2] / 2});
        }
    CHECK_FALSE(lv[1].empty());
    for (const auto& s : lv[1].coords()) CHECK(reach2.count(s) == 1);
    // later levels: every site is reachable from some site one level down
    for (int k = 2; k < 4; ++k)
      for (const auto& s : lv[k].coords()) {
        bool ok = false;
        for (const auto& p : lv[k - 1].coords())
          ok = ok || (std::abs(2 * s[0] - p[0]) <= 1 && std::abs(2 * s[1] - p[1]) <= 1 && std::abs(2 * s[2] - p[2]) <= 1);
        CHECK(ok);
      }
  }
  SUBCASE("params are deterministic in the seed") {
    const auto again = BackboneParams::random(4, kBackboneWidths, 5);
    const auto other = BackboneParams::random(4, kBackboneWidths, 6);
    CHECK(again.down[2].taps == params.down[2].taps);
    CHECK(other.down[2].taps != params.down[2].taps);
  }
}

TEST_CASE("voxel_centers") {
  GridSpec grid{{0, 0, 0}, {0.05, 0.05, 0.1}, {4, 4, 4}};
  Matrix f(2, 1);
  const auto t = SparseTensor::from_sites(1, grid, {{0, 0, 0}, {3, 3, 3}}, f);
  const auto c = voxel_centers(t);
  CHECK(c[0][0] == doctest::Approx(0.025));
  CHECK(c[0][1] == doctest::Approx(0.025));
  CHECK(c[0][2] == doctest::Approx(0.05));
  CHECK(voxel_centers(SparseTensor(1, grid, 1)).empty());

  GridSpec sym{{-1, -1, -1}, {0.5, 0.5, 0.5}, {4, 4, 4}};
  const auto s = voxel_centers(SparseTensor::from_sites(1, sym, {{0, 1, 2}, {3, 2, 1}}, f));
  for (int a = 0; a < 3; ++a) CHECK(s[0][a] == doctest::Approx(-s[1][a]));
}

TEST_CASE("bev_collapse") {
  GridSpec grid{{0, 0, 0}, {0.8, 0.8, 0.8}, {3, 2, 5}};
  SUBCASE("channel count") {
    const auto map = bev_collapse(SparseTensor(4, grid, 64));
    CHECK(map.channels() == 320);
    CHECK(map.nx() == 3);
    CHECK(map.ny() == 2);
    for (double v : map.values()) CHECK(v == 0.0);
  }
  SUBCASE("one voxel fills one block") {
    Matrix f(1, 2);
    f(0, 0) = 1.5;
    f(0, 1) = -2.0;
    const auto map = bev_collapse(SparseTensor::from_sites(4, grid, {{2, 1, 3}}, f));
    const auto cell = map.cell(2, 1);
    for (std::size_t ch = 0; ch < map.channels(); ++ch) {
      const double want = ch == 6 ? 1.5 : ch == 7 ? -2.0 : 0.0;
      CHECK(cell[ch] == want);
    }
    double total = 0.0;
    for (double v : map.values()) total += std::abs(v);
    CHECK(total == 3.5);
  }
}

TEST_CASE("bilinear_sample") {
  BevMap map(0, 0, 1, 1, 4, 3, 1);
  map.cell(1, 1)[0] = 0.0;
  map.cell(2, 1)[0] = 2.0;
  map.cell(0, 0)[0] = 5.0;
  CHECK(bilinear_sample(map, 2.5, 1.5)[0] == doctest::Approx(2.0));
  CHECK(bilinear_sample(map, 2.0, 1.5)[0] == doctest::Approx(1.0));
  CHECK(bilinear_sample(map, -3.0, 1.0)[0] == 0.0);
  CHECK(bilinear_sample(map, 1.0, 30.0)[0] == 0.0);

  oracle::Gen g(25);
  BevMap rnd(-2, -1, 0.4, 0.4, 10, 8, 3);
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      for (auto& v : rnd.cell(i, j)) v = g.uniform(-1, 1);
  // continuity across interior cell boundaries
  for (int t = 0; t < 200; ++t) {
    const double x = -2 + 0.4 * static_cast<double>(1 + g.below(8));
    const double y = g.uniform(-0.8, 2.0);
    const auto lo = bilinear_sample(rnd, x - 1e-6, y), hi = bilinear_sample(rnd, x + 1e-6, y);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(lo[c] - hi[c]) < 1e-4);
  }
}
