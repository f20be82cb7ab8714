#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pvl/geom.hpp"
#include "pvl/sparsegrid.hpp"

namespace pvl::synth {

using geom::Box3D;
using geom::LabeledBox;
using sparse::LidarPoint;
using sparse::PointRange;

struct ObjectClass {
  std::string name = "car";
  int class_id = 0;
  Vec3 mean_size{3.9, 1.6, 1.56};  // l, w, h
  Vec3 std_size{0.2, 0.1, 0.1};
  std::size_t count = 0;
};

struct SceneConfig {
  PointRange range;
  double ground_z = -1.6;
  std::size_t ground_points = 12000;
  std::vector<ObjectClass> classes{ObjectClass{"car", 0, {3.9, 1.6, 1.56}, {0.2, 0.1, 0.1}, 6}};
  // Object surface points at `reference_distance`; falls off with the square
  // of the distance beyond it.
  std::size_t surface_points = 400;
  double reference_distance = 10.0;
  std::size_t min_inside_points = 20;
  double noise_sigma = 0.02;
  double clearance = 0.5;  // minimum BEV gap enforced between boxes, meters
  std::size_t max_retries = 200;
};

struct SceneSample {
  std::vector<LidarPoint> points;
  std::vector<LabeledBox> gt_boxes;
  std::uint64_t seed = 0;
  PointRange range;

  std::vector<Vec3> positions() const;
};

// Ground points plus surface-sampled objects. Noise is applied in the box
// frame and reflected back inside, so every object point lies in its box;
// ground points that fall inside a box are dropped. All values are rounded
// to float32 so scenes survive the file format unchanged. Throws
// RuntimeError when objects cannot be placed within the retry budget.
SceneSample gen_scene(const SceneConfig& cfg, std::uint64_t seed);

struct AugmentParams {
  bool flip = false;       // mirror across the X axis (y -> -y, theta -> -theta)
  double rotation = 0.0;   // about +Z, radians
  double scale = 1.0;

  // flip with probability 1/2, rotation in [-pi/4, pi/4], scale in [0.95, 1.05]
  static AugmentParams sample(std::uint64_t seed);
};

// Applies flip, then rotation, then scaling to points and boxes alike. Points
// are not cropped to the range.
SceneSample augment(const SceneSample& scene, const AugmentParams& params);
SceneSample augment(const SceneSample& scene, std::uint64_t seed);

// Copies up to `count` donor objects (box plus its inside points) into the
// scene at random collision-free BEV positions, translating only. Scene
// points inside a pasted box are removed first.
SceneSample gt_paste(const SceneSample& scene, std::span<const SceneSample> donors,
                     std::size_t count, std::uint64_t seed, double clearance = 0.5);

// Number of points inside each box.
std::vector<std::size_t> inside_counts(const SceneSample& scene);

// True when every pair of boxes has zero BEV overlap.
bool boxes_bev_disjoint(std::span<const LabeledBox> boxes);

// "PVSCN1" text header, then float32 LE point records (x, y, z, intensity),
// then box records (7 float32 + int32 class).
void save_scene(const std::filesystem::path& path, const SceneSample& scene);
SceneSample load_scene(const std::filesystem::path& path);

std::string encode_scene(const SceneSample& scene);
SceneSample decode_scene(const std::string& bytes);

}  // namespace pvl::synth
