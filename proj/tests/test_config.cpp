#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "pvl/config.hpp"
#include "pvl/error.hpp"
#include "tiny.hpp"

using namespace pvl;

TEST_CASE("defaults are the full-scale settings") {
  const Config c;
  CHECK_NOTHROW(validate(c));
  CHECK(c.keypoints == 2048);
  CHECK(c.voxel_size == Vec3{0.05, 0.05, 0.1});
  CHECK(c.proposal_top_k == 100);
  CHECK(c.proposal_nms == 0.7);
  CHECK(c.final_nms == 0.01);
  CHECK(c.roi_samples == 128);
  CHECK(c.roi_positive_iou == 0.55);
  // 40 z voxels halve three times to 5 bins of width 64
  CHECK(c.bev_channels() == 320);
  CHECK(c.keypoint_width() == 256 + 32 + 320);
  CHECK(c.vsa().pv_width() == 256);
  CHECK(c.roi_grid().grid_count() == 216);
}

TEST_CASE("parse_config") {
  const Config c = parse_config("keypoints = 64  # comment\n\n# full line\nvoxel_size = 0.1 0.1 0.2\nnms_kind = bev\n");
  CHECK(c.keypoints == 64);
  CHECK(c.voxel_size == Vec3{0.1, 0.1, 0.2});
  CHECK(c.nms_kind == geom::IouKind::Bev);
  CHECK_THROWS_AS(parse_config("keypionts = 3\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("keypoints = 3\nkeypoints = 4\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("keypoints = many\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("voxel_size = 0.1 0.1\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("keypoints 3\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("keypoints = 0\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("vsa_radii = 0.8 0.4 0.8 1.2 1.2 2.4 2.4 4.8\n"), ValidationError);
  // voxel size must divide the range
  CHECK_THROWS_AS(parse_config("voxel_size = 0.3 0.05 0.1\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("nms_kind = 2d\n"), ValidationError);
}

TEST_CASE("format_config round trips") {
  Config c = tiny_config();
  c.seed = 77;
  const Config back = parse_config(format_config(c));
  CHECK(format_config(back) == format_config(c));
  CHECK(back.seed == 77);
  CHECK(config_keys().size() > 40);
}

TEST_CASE("env overrides") {
  const Config base = tiny_config();
  const Config c = apply_env_overrides(base, {{"PVL_KEYPOINTS", "64"}, {"HOME", "/x"}});
  CHECK(c.keypoints == 64);
  CHECK_THROWS_AS(apply_env_overrides(base, {{"PVL_NOPE", "1"}}), ValidationError);
  CHECK_THROWS_AS(apply_env_overrides(base, {{"PVL_KEYPOINTS", "-3"}}), ValidationError);
}

TEST_CASE("shipped profiles load") {
  const std::filesystem::path dir = PVL_SOURCE_DIR "/configs";
  for (const char* name : {"kitti.cfg", "waymo.cfg", "desk.cfg"}) {
    CAPTURE(name);
    CHECK_NOTHROW(load_config(dir / name));
  }
  const Config w = load_config(dir / "waymo.cfg");
  CHECK(w.keypoints == 4096);
  CHECK(w.voxel_size == Vec3{0.1, 0.1, 0.15});
  CHECK_THROWS_AS(load_config(dir / "missing.cfg"), ValidationError);
}
