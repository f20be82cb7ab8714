#include "pvl/sparsegrid.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <tuple>

#include "pvl/error.hpp"
#include "pvl/rng.hpp"

namespace pvl::sparse {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

// Floor division for a possibly negative numerator.
int floor_div(int a, int s) { return a >= 0 ? a / s : -((-a + s - 1) / s); }

}  // namespace

bool PointRange::contains(double x, double y, double z) const {
  return x >= min[0] && x < max[0] && y >= min[1] && y < max[1] && z >= min[2] && z < max[2];
}

bool GridSpec::in_bounds(const Coord& c) const {
  return c[0] >= 0 && c[1] >= 0 && c[2] >= 0 && c[0] < dims[0] && c[1] < dims[1] &&
         c[2] < dims[2];
}

std::uint64_t pack_coord(const Coord& c) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c[0]) & 0x1fffffu) << 42) |
         (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c[1]) & 0x1fffffu) << 21) |
         static_cast<std::uint64_t>(static_cast<std::uint32_t>(c[2]) & 0x1fffffu);
}

SparseTensor::SparseTensor(int level, GridSpec grid, std::size_t width)
    : level_(level), grid_(grid), features_(0, width) {}

SparseTensor SparseTensor::from_sites(int level, GridSpec grid, std::vector<Coord> coords,
                                      const Matrix& features) {
  if (features.rows() != coords.size()) {
    throw ValidationError("sparse tensor: " + std::to_string(coords.size()) + " sites but " +
                          std::to_string(features.rows()) + " feature rows");
  }
  std::vector<std::size_t> order(coords.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return coords[a] < coords[b]; });

  SparseTensor t(level, grid, features.cols());
  t.coords_.reserve(coords.size());
  t.features_ = Matrix(coords.size(), features.cols());
  t.index_.reserve(coords.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    const Coord& c = coords[order[r]];
    if (!grid.in_bounds(c)) throw ValidationError("sparse tensor: site outside the grid");
    if (r > 0 && t.coords_.back() == c) throw ValidationError("sparse tensor: duplicate site");
    t.coords_.push_back(c);
    std::copy_n(features.row(order[r]).begin(), features.cols(), t.features_.row(r).begin());
    t.index_.emplace(pack_coord(c), static_cast<std::uint32_t>(r));
  }
  return t;
}

std::optional<std::size_t> SparseTensor::find(const Coord& c) const {
  if (!grid_.in_bounds(c)) return std::nullopt;
  auto it = index_.find(pack_coord(c));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

SparseTensor SparseTensor::with_features(Matrix features) const {
  if (features.rows() != coords_.size()) {
    throw ValidationError("sparse tensor: feature rows do not match site count");
  }
  SparseTensor t = *this;
  t.features_ = std::move(features);
  return t;
}

SparseTensor voxelize(std::span<const LidarPoint> points, const PointRange& range,
                      const Vec3& voxel_size) {
  GridSpec grid;
  grid.origin = range.min;
  grid.voxel_size = voxel_size;
  for (int a = 0; a < 3; ++a) {
    if (!(voxel_size[a] > 0.0)) throw ValidationError("voxel size must be positive on every axis");
    if (!(range.max[a] > range.min[a])) throw ValidationError("point range must be non-empty");
    grid.dims[a] = static_cast<int>(std::llround((range.max[a] - range.min[a]) / voxel_size[a]));
    grid.dims[a] = std::max(grid.dims[a], 1);
  }

  struct Binned {
    std::uint64_t key;
    Coord coord;
    LidarPoint p;
  };
  std::vector<Binned> binned;
  binned.reserve(points.size());
  for (const LidarPoint& p : points) {
    if (!range.contains(p.x, p.y, p.z)) continue;
    const Coord c{static_cast<int>(std::floor((p.x - grid.origin[0]) / voxel_size[0])),
                  static_cast<int>(std::floor((p.y - grid.origin[1]) / voxel_size[1])),
                  static_cast<int>(std::floor((p.z - grid.origin[2]) / voxel_size[2]))};
    if (!grid.in_bounds(c)) continue;
    binned.push_back({pack_coord(c), c, p});
  }
  std::sort(binned.begin(), binned.end(), [](const Binned& a, const Binned& b) {
    if (a.key != b.key) return a.key < b.key;
    return std::tie(a.p.x, a.p.y, a.p.z, a.p.intensity) <
           std::tie(b.p.x, b.p.y, b.p.z, b.p.intensity);
  });

  std::vector<Coord> coords;
  std::vector<std::array<double, 5>> sums;  // x, y, z, intensity, count
  for (const Binned& b : binned) {
    if (coords.empty() || coords.back() != b.coord) {
      coords.push_back(b.coord);
      sums.push_back({0, 0, 0, 0, 0});
    }
    auto& s = sums.back();
    s[0] += b.p.x;
    s[1] += b.p.y;
    s[2] += b.p.z;
    s[3] += b.p.intensity;
    s[4] += 1.0;
  }
  Matrix feats(coords.size(), 4);
  for (std::size_t r = 0; r < coords.size(); ++r) {
    for (std::size_t c = 0; c < 4; ++c) feats(r, c) = sums[r][c] / sums[r][4];
  }
  return SparseTensor::from_sites(1, grid, std::move(coords), feats);
}

SparseTensor sparse_conv(const SparseTensor& input, const ConvWeights& weights, int stride,
                         ConvMode mode) {
  if (weights.cin != input.width()) {
    throw ValidationError("sparse_conv: kernel expects " + std::to_string(weights.cin) +
                          " input channels, tensor has " + std::to_string(input.width()));
  }
  if (weights.taps.size() != 27 * weights.cin * weights.cout) {
    throw ValidationError("sparse_conv: kernel storage does not match 3x3x3xCinxCout");
  }
  if (stride != 1 && stride != 2) throw ValidationError("sparse_conv: stride must be 1 or 2");
  if (mode == ConvMode::Submanifold && stride != 1) {
    throw ValidationError("sparse_conv: submanifold mode requires stride 1");
  }

  GridSpec out_grid = input.grid();
  int out_level = input.level();
  if (stride == 2) {
    for (int a = 0; a < 3; ++a) {
      out_grid.dims[a] = ceil_div(input.grid().dims[a], 2);
      out_grid.voxel_size[a] = input.grid().voxel_size[a] * 2.0;
    }
    ++out_level;
  }

  std::vector<Coord> out_sites;
  if (mode == ConvMode::Submanifold) {
    out_sites = input.coords();
  } else {
    out_sites.reserve(input.size() * (stride == 1 ? 27 : 8));
    for (const Coord& in : input.coords()) {
      for (int da = -1; da <= 1; ++da) {
        for (int db = -1; db <= 1; ++db) {
          for (int dc = -1; dc <= 1; ++dc) {
            const Coord num{in[0] - da, in[1] - db, in[2] - dc};
            if (num[0] % stride != 0 || num[1] % stride != 0 || num[2] % stride != 0) continue;
            const Coord o{floor_div(num[0], stride), floor_div(num[1], stride),
                          floor_div(num[2], stride)};
            if (out_grid.in_bounds(o)) out_sites.push_back(o);
          }
        }
      }
    }
    std::sort(out_sites.begin(), out_sites.end());
    out_sites.erase(std::unique(out_sites.begin(), out_sites.end()), out_sites.end());
  }

  const std::size_t cin = weights.cin;
  const std::size_t cout = weights.cout;
  Matrix out(out_sites.size(), cout);
  for (std::size_t r = 0; r < out_sites.size(); ++r) {
    const Coord& o = out_sites[r];
    std::span<double> acc = out.row(r);
    for (int da = -1; da <= 1; ++da) {
      for (int db = -1; db <= 1; ++db) {
        for (int dc = -1; dc <= 1; ++dc) {
          const Coord src{o[0] * stride + da, o[1] * stride + db, o[2] * stride + dc};
          const auto row = input.find(src);
          if (!row) continue;
          const int tap = ConvWeights::tap_index(da, db, dc);
          std::span<const double> x = input.features().row(*row);
          const double* w = weights.taps.data() + static_cast<std::size_t>(tap) * cin * cout;
          for (std::size_t i = 0; i < cin; ++i) {
            const double xi = x[i];
            if (xi == 0.0) continue;
            const double* wr = w + i * cout;
            for (std::size_t c = 0; c < cout; ++c) acc[c] += xi * wr[c];
          }
        }
      }
    }
  }
  return SparseTensor::from_sites(out_level, out_grid, std::move(out_sites), out);
}

SparseTensor relu(const SparseTensor& t) {
  Matrix f = t.features();
  for (double& v : f.data()) v = std::max(v, 0.0);
  return t.with_features(std::move(f));
}

BackboneParams BackboneParams::random(std::size_t input_width, std::array<std::size_t, 4> widths,
                                      std::uint64_t seed) {
  BackboneParams p;
  Rng rng(mix_seed(seed, 0xbacb0e));
  auto fill = [&rng](ConvWeights& w) {
    const double bound = std::sqrt(6.0 / (27.0 * static_cast<double>(w.cin)));
    for (double& v : w.taps) v = rng.uniform(-bound, bound);
  };
  std::size_t in = input_width;
  for (std::size_t k = 0; k < 4; ++k) {
    p.down[k] = ConvWeights(in, widths[k]);
    p.refine[k] = ConvWeights(widths[k], widths[k]);
    fill(p.down[k]);
    fill(p.refine[k]);
    in = widths[k];
  }
  return p;
}

std::array<SparseTensor, 4> run_backbone(const SparseTensor& level1, const BackboneParams& params) {
  std::array<SparseTensor, 4> levels;
  SparseTensor x = level1;
  for (std::size_t k = 0; k < 4; ++k) {
    if (k == 0) {
      x = relu(sparse_conv(x, params.down[k], 1, ConvMode::Submanifold));
    } else {
      x = relu(sparse_conv(x, params.down[k], 2, ConvMode::Strided));
    }
    x = relu(sparse_conv(x, params.refine[k], 1, ConvMode::Submanifold));
    levels[k] = x;
  }
  return levels;
}

std::vector<Vec3> voxel_centers(const SparseTensor& t) {
  std::vector<Vec3> centers;
  centers.reserve(t.size());
  const GridSpec& g = t.grid();
  for (const Coord& c : t.coords()) {
    centers.push_back({g.origin[0] + (c[0] + 0.5) * g.voxel_size[0],
                       g.origin[1] + (c[1] + 0.5) * g.voxel_size[1],
                       g.origin[2] + (c[2] + 0.5) * g.voxel_size[2]});
  }
  return centers;
}

BevMap::BevMap(double origin_x, double origin_y, double cell_x, double cell_y, std::size_t nx,
               std::size_t ny, std::size_t channels)
    : origin_x_(origin_x),
      origin_y_(origin_y),
      cell_x_(cell_x),
      cell_y_(cell_y),
      nx_(nx),
      ny_(ny),
      channels_(channels),
      values_(nx * ny * channels, 0.0) {}

std::span<double> BevMap::cell(std::size_t ix, std::size_t iy) {
  return {values_.data() + (iy * nx_ + ix) * channels_, channels_};
}

std::span<const double> BevMap::cell(std::size_t ix, std::size_t iy) const {
  return {values_.data() + (iy * nx_ + ix) * channels_, channels_};
}

BevMap bev_collapse(const SparseTensor& t8) {
  const GridSpec& g = t8.grid();
  const std::size_t width = t8.width();
  const std::size_t bins = static_cast<std::size_t>(g.dims[2]);
  BevMap map(g.origin[0], g.origin[1], g.voxel_size[0], g.voxel_size[1],
             static_cast<std::size_t>(g.dims[0]), static_cast<std::size_t>(g.dims[1]),
             bins * width);
  for (std::size_t r = 0; r < t8.size(); ++r) {
    const Coord& c = t8.coords()[r];
    std::span<double> cell = map.cell(static_cast<std::size_t>(c[0]), static_cast<std::size_t>(c[1]));
    std::span<const double> f = t8.features().row(r);
    std::copy(f.begin(), f.end(), cell.begin() + static_cast<std::ptrdiff_t>(c[2] * width));
  }
  return map;
}

std::vector<double> bilinear_sample(const BevMap& map, double x, double y) {
  std::vector<double> out(map.channels(), 0.0);
  const double extent_x = map.origin_x() + map.cell_x() * static_cast<double>(map.nx());
  const double extent_y = map.origin_y() + map.cell_y() * static_cast<double>(map.ny());
  if (!(x >= map.origin_x() && x < extent_x && y >= map.origin_y() && y < extent_y)) return out;

  const double u = (x - map.origin_x()) / map.cell_x() - 0.5;
  const double v = (y - map.origin_y()) / map.cell_y() - 0.5;
  const double fu = std::floor(u);
  const double fv = std::floor(v);
  const long ix0 = static_cast<long>(fu);
  const long iy0 = static_cast<long>(fv);
  const double tx = u - fu;
  const double ty = v - fv;
  const std::array<std::array<long, 2>, 4> corners{{{ix0, iy0}, {ix0 + 1, iy0}, {ix0, iy0 + 1},
                                                    {ix0 + 1, iy0 + 1}}};
  const std::array<double, 4> weights{(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
  for (std::size_t k = 0; k < 4; ++k) {
    const long cx = corners[k][0];
    const long cy = corners[k][1];
    if (weights[k] == 0.0 || cx < 0 || cy < 0 || cx >= static_cast<long>(map.nx()) ||
        cy >= static_cast<long>(map.ny())) {
      continue;
    }
    std::span<const double> cell = map.cell(static_cast<std::size_t>(cx), static_cast<std::size_t>(cy));
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += weights[k] * cell[c];
  }
  return out;
}

}  // namespace pvl::sparse
