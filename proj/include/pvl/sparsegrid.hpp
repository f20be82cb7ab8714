#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "pvl/matrix.hpp"

namespace pvl::sparse {

using Coord = std::array<int, 3>;

struct LidarPoint {
  double x = 0.0, y = 0.0, z = 0.0, intensity = 0.0;
  bool operator==(const LidarPoint&) const = default;
};

// Half-open metric box [min, max) per axis.
struct PointRange {
  Vec3 min{0.0, -40.0, -3.0};
  Vec3 max{70.4, 40.0, 1.0};
  bool contains(double x, double y, double z) const;
  bool operator==(const PointRange&) const = default;
};

// Lattice of one backbone level. Voxel (i,j,k) spans
// origin + [index, index+1) * voxel_size on each axis.
struct GridSpec {
  Vec3 origin{0.0, 0.0, 0.0};
  Vec3 voxel_size{1.0, 1.0, 1.0};
  Coord dims{1, 1, 1};

  bool in_bounds(const Coord& c) const;
  bool operator==(const GridSpec&) const = default;
};

// Active voxel coordinates plus one feature row per coordinate. Coordinates are
// unique and stored in ascending lexicographic order; a hash index maps packed
// coordinates back to rows. Immutable once built.
class SparseTensor {
 public:
  SparseTensor() = default;
  SparseTensor(int level, GridSpec grid, std::size_t width);

  // Sorts the sites and validates uniqueness, bounds and feature shape.
  static SparseTensor from_sites(int level, GridSpec grid, std::vector<Coord> coords,
                                 const Matrix& features);

  int level() const { return level_; }
  const GridSpec& grid() const { return grid_; }
  std::size_t size() const { return coords_.size(); }
  std::size_t width() const { return features_.cols(); }
  bool empty() const { return coords_.empty(); }
  const std::vector<Coord>& coords() const { return coords_; }
  const Matrix& features() const { return features_; }

  std::optional<std::size_t> find(const Coord& c) const;

  // Same sites and grid, new feature matrix (row count must match).
  SparseTensor with_features(Matrix features) const;

 private:
  int level_ = 1;
  GridSpec grid_{};
  std::vector<Coord> coords_;
  Matrix features_;
  std::unordered_map<std::uint64_t, std::uint32_t> index_;
};

std::uint64_t pack_coord(const Coord& c);

// Mean (x, y, z, intensity) per occupied voxel. Points outside the half-open
// range are dropped. Per-voxel sums run over points in a canonical order so
// the result does not depend on input order.
SparseTensor voxelize(std::span<const LidarPoint> points, const PointRange& range,
                      const Vec3& voxel_size);

// 3x3x3 kernel stored as taps[t][cin][cout], where tap t belongs to the offset
// (a, b, c) in {-1,0,1}^3 along (i, j, k) with t = ((a+1)*3 + (b+1))*3 + (c+1).
struct ConvWeights {
  std::size_t cin = 0;
  std::size_t cout = 0;
  std::vector<double> taps;

  ConvWeights() = default;
  ConvWeights(std::size_t in, std::size_t out) : cin(in), cout(out), taps(27 * in * out, 0.0) {}

  double& at(int tap, std::size_t i, std::size_t o) { return taps[(tap * cin + i) * cout + o]; }
  double at(int tap, std::size_t i, std::size_t o) const { return taps[(tap * cin + i) * cout + o]; }

  static int tap_index(int da, int db, int dc) { return ((da + 1) * 3 + (db + 1)) * 3 + (dc + 1); }
};

enum class ConvMode { Submanifold, Strided };

// Sparse 3x3x3 convolution with zero padding 1 and no bias.
//  Submanifold: stride must be 1; outputs exactly at the input sites.
//  Strided: stride 1 or 2; outputs at every in-bounds site whose receptive
//  field holds at least one active input. Stride 2 halves the lattice
//  (dims -> ceil(dims/2), voxel size doubled, origin unchanged) and advances
//  the level index.
SparseTensor sparse_conv(const SparseTensor& input, const ConvWeights& weights, int stride,
                         ConvMode mode);

SparseTensor relu(const SparseTensor& t);

inline constexpr std::array<std::size_t, 4> kBackboneWidths{16, 32, 64, 64};

// Per level: one downsampling conv (level 1: submanifold stride 1, levels 2-4:
// strided stride 2) and one submanifold conv, each followed by max(0, x).
struct BackboneParams {
  std::array<ConvWeights, 4> down;
  std::array<ConvWeights, 4> refine;

  // Uniform He-style init, deterministic in the seed.
  static BackboneParams random(std::size_t input_width, std::array<std::size_t, 4> widths,
                               std::uint64_t seed);
};

std::array<SparseTensor, 4> run_backbone(const SparseTensor& level1, const BackboneParams& params);

std::vector<Vec3> voxel_centers(const SparseTensor& t);

// Dense bird's-eye grid. Cell (ix, iy) covers origin + [index, index+1) * cell.
class BevMap {
 public:
  BevMap() = default;
  BevMap(double origin_x, double origin_y, double cell_x, double cell_y, std::size_t nx,
         std::size_t ny, std::size_t channels);

  std::size_t nx() const { return nx_; }
  std::size_t ny() const { return ny_; }
  std::size_t channels() const { return channels_; }
  double origin_x() const { return origin_x_; }
  double origin_y() const { return origin_y_; }
  double cell_x() const { return cell_x_; }
  double cell_y() const { return cell_y_; }

  std::span<double> cell(std::size_t ix, std::size_t iy);
  std::span<const double> cell(std::size_t ix, std::size_t iy) const;
  std::span<const double> values() const { return values_; }

 private:
  double origin_x_ = 0.0, origin_y_ = 0.0, cell_x_ = 1.0, cell_y_ = 1.0;
  std::size_t nx_ = 0, ny_ = 0, channels_ = 0;
  std::vector<double> values_;
};

// Stacks the z-bins of the 8x level: channel b * width + c holds feature c of
// voxel (i, j, b).
BevMap bev_collapse(const SparseTensor& t8);

// Bilinear blend of the four surrounding cell centers; corners beyond the
// grid contribute zeros and queries outside the map extent return zeros.
std::vector<double> bilinear_sample(const BevMap& map, double x, double y);

}  // namespace pvl::sparse
