#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pvl/geom.hpp"
#include "pvl/matrix.hpp"
#include "pvl/nn.hpp"
#include "pvl/rng.hpp"
#include "pvl/sparsegrid.hpp"

namespace pvl::vsa {

// Farthest point sampling from index 0. Each step picks the unselected point
// with the largest distance to the selected set, lowest index on ties. When
// fewer than n points exist the selection repeats cyclically.
std::vector<std::size_t> fps(std::span<const Vec3> points, std::size_t n);

using NeighborLists = std::vector<std::vector<std::size_t>>;

// All points with squared distance strictly below radius^2, ascending index.
NeighborLists radius_query_brute(std::span<const Vec3> queries, std::span<const Vec3> points,
                                 double radius);
// Same result through a uniform hash grid with cell size = radius.
NeighborLists radius_query_grid(std::span<const Vec3> queries, std::span<const Vec3> points,
                                double radius);

// Keeps a uniform random subset of exactly `cap` indices when the list is
// longer (ascending order preserved).
std::vector<std::size_t> subsample(std::span<const std::size_t> indices, std::size_t cap, Rng& rng);

// Grid query followed by the per-query cap. Query q draws from the stream
// mix_seed(seed, q) so results do not depend on evaluation order.
NeighborLists radius_query(std::span<const Vec3> queries, std::span<const Vec3> points,
                           double radius, std::size_t cap, std::uint64_t seed);

// Channel-wise max of G([f_j; x_j - center]) over the neighbors; zero vector
// for an empty neighborhood.
std::vector<double> set_abstraction(const Vec3& center, const Matrix& neighbor_features,
                                    std::span<const Vec3> neighbor_positions,
                                    const nn::MlpParams& mlp);

// Batched set abstraction for many centers over one source set. The source
// part of the first layer is computed once per source point, so rows differ
// from set_abstraction() only by rounding.
Matrix abstract_features(std::span<const Vec3> centers, std::span<const Vec3> source_positions,
                         const Matrix& source_features, const NeighborLists& neighbors,
                         const nn::MlpParams& mlp);

struct RadiusPair {
  double inner = 0.4;
  double outer = 0.8;
};

struct VsaConfig {
  std::array<RadiusPair, 4> level_radii{{{0.4, 0.8}, {0.8, 1.2}, {1.2, 2.4}, {2.4, 4.8}}};
  std::array<std::size_t, 4> level_caps{16, 16, 32, 32};
  RadiusPair raw_radii{0.4, 0.8};
  std::size_t raw_cap = 16;
  std::size_t level_out_width = 32;
  std::size_t raw_out_width = 16;

  std::size_t pv_width() const { return 4 * 2 * level_out_width; }
  std::size_t raw_width() const { return 2 * raw_out_width; }
};

// One two-layer G per (level, radius) branch and per raw radius.
struct VsaMlps {
  std::array<std::array<nn::MlpParams, 2>, 4> levels;
  std::array<nn::MlpParams, 2> raw;

  static VsaMlps random(const VsaConfig& cfg, std::array<std::size_t, 4> level_widths,
                        std::uint64_t seed);
};

// f^(pv): per level and radius, query voxel centers, abstract, concatenate
// (level-major, inner radius first).
Matrix vsa_multi_level(std::span<const Vec3> keypoints,
                       const std::array<sparse::SparseTensor, 4>& levels, const VsaConfig& cfg,
                       const VsaMlps& mlps, std::uint64_t seed);

struct KeypointFeatures {
  Matrix pv;
  Matrix raw;
  Matrix bev;
  Matrix concat;  // [pv, raw, bev]
};

// f^(p) = [f^(pv), f^(raw), f^(bev)]. Raw points contribute their intensity as
// the single feature channel; BEV features are bilinear samples at (x, y).
KeypointFeatures extended_vsa(std::span<const Vec3> keypoints,
                              std::span<const sparse::LidarPoint> raw_points,
                              const std::array<sparse::SparseTensor, 4>& levels,
                              const sparse::BevMap& bev, const VsaConfig& cfg, const VsaMlps& mlps,
                              std::uint64_t seed);

// 1 when the keypoint lies inside any ground-truth box.
std::vector<int> segmentation_labels(std::span<const Vec3> keypoints,
                                     std::span<const geom::LabeledBox> gts);

struct PkwResult {
  Matrix weighted;
  std::vector<double> scores;
  std::vector<int> labels;
};

// Foreground score A(f) per keypoint (A ends in a sigmoid, width 1; scores
// clamped to [1e-7, 1 - 1e-7]) and row-wise reweighting of the features.
PkwResult pkw(const Matrix& features, std::span<const Vec3> keypoints,
              std::span<const geom::LabeledBox> gts, const nn::MlpParams& scorer);

Matrix scale_rows(const Matrix& features, std::span<const double> scores);

// Focal loss (alpha 0.25, gamma 2) normalized by the positive count.
double seg_loss(std::span<const double> scores, std::span<const int> labels,
                std::vector<double>* grad = nullptr);

}  // namespace pvl::vsa
