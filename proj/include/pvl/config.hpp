#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pvl/geom.hpp"
#include "pvl/matrix.hpp"
#include "pvl/roihead.hpp"
#include "pvl/rpn.hpp"
#include "pvl/sparsegrid.hpp"
#include "pvl/synth.hpp"
#include "pvl/vsa.hpp"

namespace pvl {

// Every tunable of the pipeline. Defaults are the KITTI-scale settings;
// configs/ holds the Waymo-scale and desk profiles.
struct Config {
  Vec3 voxel_size{0.05, 0.05, 0.1};
  Vec3 range_min{0.0, -40.0, -3.0};
  Vec3 range_max{70.4, 40.0, 1.0};
  std::size_t keypoints = 2048;
  std::array<std::size_t, 4> backbone_widths{16, 32, 64, 64};

  std::array<double, 8> vsa_radii{0.4, 0.8, 0.8, 1.2, 1.2, 2.4, 2.4, 4.8};
  std::array<std::size_t, 4> vsa_caps{16, 16, 32, 32};
  std::array<double, 2> raw_radii{0.4, 0.8};
  std::size_t raw_cap = 16;
  std::size_t vsa_width = 32;
  std::size_t raw_vsa_width = 16;
  std::size_t pkw_hidden = 64;

  std::array<double, 2> roi_radii{0.8, 1.6};
  std::size_t roi_cap = 32;
  std::size_t roi_branch_width = 32;
  std::size_t roi_pooled_width = 256;
  int grid_resolution = 6;

  Vec3 anchor_size{3.9, 1.6, 1.56};
  double anchor_z = -1.0;
  double rpn_positive_iou = 0.6;
  double rpn_negative_iou = 0.45;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double reg_beta = 2.0;

  std::size_t proposal_top_k = 100;
  double proposal_nms = 0.7;
  double final_nms = 0.01;
  geom::IouKind nms_kind = geom::IouKind::ThreeD;

  std::size_t roi_samples = 128;
  double roi_positive_fraction = 0.5;
  double roi_positive_iou = 0.55;
  double eval_iou = 0.7;

  std::uint64_t seed = 0;

  std::size_t scene_ground_points = 12000;
  std::size_t scene_objects = 6;
  std::size_t scene_surface_points = 400;
  std::size_t scene_min_inside = 20;
  double scene_noise = 0.02;
  double scene_ground_z = -1.6;
  Vec3 object_size{3.9, 1.6, 1.56};
  Vec3 object_size_std{0.2, 0.1, 0.1};

  std::size_t train_iters = 500;
  double pkw_lr = 0.05;
  double refine_lr = 0.1;
  std::size_t refine_proposals = 48;  // jittered proposals per gt for refine training
  double refine_jitter = 0.5;         // meters, center jitter scale

  sparse::PointRange range() const { return {range_min, range_max}; }
  vsa::VsaConfig vsa() const;
  roi::RoiGridConfig roi_grid() const;
  roi::SamplingConfig sampling() const;
  rpn::AnchorClass anchor_class() const;
  rpn::FocalParams focal() const { return {focal_alpha, focal_gamma}; }
  synth::SceneConfig scene() const;
  // Widths of f^(p): pv + raw + bev channels.
  std::size_t keypoint_width() const;
  std::size_t bev_channels() const;
};

// Throws ValidationError naming the first offending field.
void validate(const Config& cfg);

// Flat "key = value" text; '#' starts a comment; vectors are whitespace
// separated. Unknown or repeated keys are rejected.
Config parse_config(const std::string& text, const Config& base = {});
Config load_config(const std::filesystem::path& path);

// PVL_<KEY> (upper case) overrides the key, e.g. PVL_KEYPOINTS=512.
Config apply_env_overrides(const Config& cfg, const std::map<std::string, std::string>& env);
std::map<std::string, std::string> pvl_environment();

void set_key(Config& cfg, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();
std::string format_config(const Config& cfg);

}  // namespace pvl
