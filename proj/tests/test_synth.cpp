#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "pvl/error.hpp"
#include "pvl/synth.hpp"

using namespace pvl;
using namespace pvl::synth;

namespace {

SceneConfig small_cfg(std::size_t objects) {
  SceneConfig c;
  c.range.min = {0, -16, -3};
  c.range.max = {32, 16, 1};
  c.ground_points = 2000;
  c.classes[0].count = objects;
  c.surface_points = 200;
  return c;
}

std::vector<std::vector<std::size_t>> members(const SceneSample& s) {
  std::vector<std::vector<std::size_t>> out;
  const auto pos = s.positions();
  for (const auto& b : s.gt_boxes) {
    const auto mask = geom::points_in_box(pos, b.box);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) idx.push_back(i);
    out.push_back(idx);
  }
  return out;
}

}  // namespace

TEST_CASE("gen_scene") {
  SUBCASE("ground only") {
    const auto s = gen_scene(small_cfg(0), 1);
    CHECK(s.gt_boxes.empty());
    CHECK(s.points.size() == 2000);
  }
  SUBCASE("deterministic in the seed") {
    const auto a = gen_scene(small_cfg(4), 7), b = gen_scene(small_cfg(4), 7), c = gen_scene(small_cfg(4), 8);
    CHECK(a.points == b.points);
    CHECK(a.gt_boxes.size() == b.gt_boxes.size());
    CHECK(encode_scene(a) == encode_scene(b));
    CHECK(encode_scene(a) != encode_scene(c));
  }
  SUBCASE("scene invariants hold over many seeds") {
    const auto cfg = small_cfg(5);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto s = gen_scene(cfg, seed);
      CHECK(s.gt_boxes.size() == 5);
      for (const auto& p : s.points) {
        CHECK(cfg.range.contains(p.x, p.y, p.z));
        CHECK(p.intensity >= 0.0);
        CHECK(p.intensity <= 1.0);
      }
      CHECK(boxes_bev_disjoint(s.gt_boxes));
      // independent inside count, via the oracle footprint test
      const auto counts = inside_counts(s);
      for (std::size_t k = 0; k < s.gt_boxes.size(); ++k) {
        const auto& b = s.gt_boxes[k].box;
        std::size_t n = 0;
        for (const auto& p : s.points)
          n += oracle::inside_bev(b, p.x, p.y) && std::abs(p.z - b.cz) <= b.h / 2;
        CHECK(n == counts[k]);
        CHECK(n >= cfg.min_inside_points);
      }
    }
  }
  SUBCASE("infeasible placement") {
    auto cfg = small_cfg(400);
    cfg.max_retries = 20;
    CHECK_THROWS_AS(gen_scene(cfg, 1), RuntimeError);
  }
}

TEST_CASE("augment") {
  const auto s = gen_scene(small_cfg(4), 3);
  const auto same = augment(s, AugmentParams{});
  CHECK(same.points == s.points);
  for (std::size_t i = 0; i < s.gt_boxes.size(); ++i) CHECK(same.gt_boxes[i].box == s.gt_boxes[i].box);

  AugmentParams flip;
  flip.flip = true;
  const auto twice = augment(augment(s, flip), flip);
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    CHECK(std::abs(twice.points[i].y - s.points[i].y) < 1e-12);
    CHECK(twice.points[i].x == s.points[i].x);
  }
  for (std::size_t i = 0; i < s.gt_boxes.size(); ++i)
    CHECK(std::abs(geom::normalize_angle(twice.gt_boxes[i].box.theta - s.gt_boxes[i].box.theta)) < 1e-12);

  const auto before = members(s);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = AugmentParams::sample(seed);
    CHECK(p.rotation >= -std::numbers::pi / 4);
    CHECK(p.rotation <= std::numbers::pi / 4);
    CHECK(p.scale >= 0.95);
    CHECK(p.scale <= 1.05);
    const auto a = augment(s, p);
    CHECK(members(a) == before);
  }
  // flips happen about half the time
  int flips = 0;
  for (std::uint64_t seed = 0; seed < 400; ++seed) flips += AugmentParams::sample(seed).flip;
  CHECK(flips > 150);
  CHECK(flips < 250);

  AugmentParams rot;
  rot.rotation = 0.3;
  rot.scale = 1.02;
  const auto r = augment(s, rot);
  const auto c = geom::rotate_z(s.gt_boxes[0].box.center(), 0.3);
  CHECK(r.gt_boxes[0].box.cx == doctest::Approx(c[0] * 1.02));
  CHECK(r.gt_boxes[0].box.l == doctest::Approx(s.gt_boxes[0].box.l * 1.02));
  CHECK(r.gt_boxes[0].box.theta == doctest::Approx(geom::normalize_angle(s.gt_boxes[0].box.theta + 0.3)));
}

TEST_CASE("gt_paste") {
  const auto s = gen_scene(small_cfg(2), 11);
  const std::vector<SceneSample> donors{gen_scene(small_cfg(3), 12), gen_scene(small_cfg(3), 13)};
  const auto none = gt_paste(s, donors, 0, 1);
  CHECK(none.points == s.points);
  CHECK(none.gt_boxes.size() == s.gt_boxes.size());

  const auto pasted = gt_paste(s, donors, 3, 5);
  CHECK(pasted.gt_boxes.size() > s.gt_boxes.size());
  CHECK(boxes_bev_disjoint(pasted.gt_boxes));
  // pasted boxes hold exactly the donor's inside points
  std::vector<std::size_t> donor_counts;
  for (const auto& d : donors)
    for (auto n : inside_counts(d)) donor_counts.push_back(n);
  const auto counts = inside_counts(pasted);
  for (std::size_t k = s.gt_boxes.size(); k < pasted.gt_boxes.size(); ++k)
    CHECK(std::find(donor_counts.begin(), donor_counts.end(), counts[k]) != donor_counts.end());
  // original boxes keep their points
  const auto orig = inside_counts(s);
  for (std::size_t k = 0; k < s.gt_boxes.size(); ++k) CHECK(counts[k] == orig[k]);
}

TEST_CASE("scene files") {
  const auto dir = std::filesystem::temp_directory_path() / "pvl_test_synth";
  std::filesystem::create_directories(dir);
  const auto s = gen_scene(small_cfg(3), 21);
  const auto path = dir / "a.pvscn";
  save_scene(path, s);
  const auto back = load_scene(path);
  CHECK(back.points == s.points);
  CHECK(back.seed == s.seed);
  CHECK(back.range == s.range);
  REQUIRE(back.gt_boxes.size() == s.gt_boxes.size());
  for (std::size_t i = 0; i < s.gt_boxes.size(); ++i) {
    CHECK(back.gt_boxes[i].box == s.gt_boxes[i].box);
    CHECK(back.gt_boxes[i].class_id == s.gt_boxes[i].class_id);
  }
  CHECK(encode_scene(back) == encode_scene(s));

  std::string bytes = encode_scene(s);
  CHECK_THROWS_AS(decode_scene(bytes.substr(0, bytes.size() - 5)), ParseError);
  std::string v2 = bytes;
  v2[5] = '2';
  CHECK_THROWS_AS(decode_scene(v2), VersionError);
  CHECK_THROWS_AS(decode_scene("garbage"), ParseError);
  CHECK_THROWS_AS(load_scene(dir / "missing.pvscn"), RuntimeError);
  std::filesystem::remove_all(dir);
}
