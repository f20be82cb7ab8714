#include "pvl/vsa.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "pvl/error.hpp"
#include "pvl/rpn.hpp"

namespace pvl::vsa {

namespace {

double dist2(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

using CellKey = std::array<long, 3>;

CellKey cell_of(const Vec3& p, double cell) {
  return {static_cast<long>(std::floor(p[0] / cell)), static_cast<long>(std::floor(p[1] / cell)),
          static_cast<long>(std::floor(p[2] / cell))};
}

struct CellHash {
  std::size_t operator()(const CellKey& k) const {
    std::uint64_t h = static_cast<std::uint64_t>(k[0]) * 0x9e3779b97f4a7c15ULL;
    h ^= static_cast<std::uint64_t>(k[1]) * 0xc2b2ae3d27d4eb4fULL + (h << 6) + (h >> 2);
    h ^= static_cast<std::uint64_t>(k[2]) * 0x165667b19e3779f9ULL + (h << 6) + (h >> 2);
    return static_cast<std::size_t>(h);
  }
};

void copy_block(const Matrix& src, Matrix& dst, std::size_t col_offset) {
  for (std::size_t r = 0; r < src.rows(); ++r) {
    std::span<const double> s = src.row(r);
    std::copy(s.begin(), s.end(), dst.row(r).begin() + static_cast<std::ptrdiff_t>(col_offset));
  }
}

}  // namespace

std::vector<std::size_t> fps(std::span<const Vec3> points, std::size_t n) {
  if (points.empty()) throw ValidationError("fps: empty point set");
  std::vector<std::size_t> picked;
  if (n == 0) return picked;
  const std::size_t distinct = std::min(n, points.size());
  picked.reserve(n);

  // -1 marks selected points; others hold the squared distance to the selected set
  std::vector<double> min_d(points.size(), std::numeric_limits<double>::infinity());
  std::size_t last = 0;
  picked.push_back(0);
  min_d[0] = -1.0;
  while (picked.size() < distinct) {
    std::size_t best = points.size();
    double best_d = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (min_d[i] < 0.0) continue;
      const double d = dist2(points[i], points[last]);
      if (d < min_d[i]) min_d[i] = d;
      if (min_d[i] > best_d) {
        best_d = min_d[i];
        best = i;
      }
    }
    last = best;
    min_d[best] = -1.0;
    picked.push_back(best);
  }
  for (std::size_t i = distinct; i < n; ++i) picked.push_back(picked[i % distinct]);
  return picked;
}

NeighborLists radius_query_brute(std::span<const Vec3> queries, std::span<const Vec3> points,
                                 double radius) {
  if (!(radius > 0.0)) throw ValidationError("radius_query: radius must be positive");
  const double r2 = radius * radius;
  NeighborLists out(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    for (std::size_t j = 0; j < points.size(); ++j) {
      if (dist2(points[j], queries[q]) < r2) out[q].push_back(j);
    }
  }
  return out;
}

NeighborLists radius_query_grid(std::span<const Vec3> queries, std::span<const Vec3> points,
                                double radius) {
  if (!(radius > 0.0)) throw ValidationError("radius_query: radius must be positive");
  const double r2 = radius * radius;
  std::unordered_map<CellKey, std::vector<std::size_t>, CellHash> cells;
  cells.reserve(points.size());
  for (std::size_t j = 0; j < points.size(); ++j) cells[cell_of(points[j], radius)].push_back(j);

  NeighborLists out(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const CellKey c = cell_of(queries[q], radius);
    std::vector<std::size_t>& hits = out[q];
    for (long dx = -1; dx <= 1; ++dx) {
      for (long dy = -1; dy <= 1; ++dy) {
        for (long dz = -1; dz <= 1; ++dz) {
          auto it = cells.find({c[0] + dx, c[1] + dy, c[2] + dz});
          if (it == cells.end()) continue;
          for (std::size_t j : it->second) {
            if (dist2(points[j], queries[q]) < r2) hits.push_back(j);
          }
        }
      }
    }
    std::sort(hits.begin(), hits.end());
  }
  return out;
}

std::vector<std::size_t> subsample(std::span<const std::size_t> indices, std::size_t cap, Rng& rng) {
  std::vector<std::size_t> v(indices.begin(), indices.end());
  if (v.size() <= cap) return v;
  for (std::size_t i = 0; i < cap; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(v.size() - i));
    std::swap(v[i], v[j]);
  }
  v.resize(cap);
  std::sort(v.begin(), v.end());
  return v;
}

NeighborLists radius_query(std::span<const Vec3> queries, std::span<const Vec3> points,
                           double radius, std::size_t cap, std::uint64_t seed) {
  NeighborLists lists = radius_query_grid(queries, points, radius);
  for (std::size_t q = 0; q < lists.size(); ++q) {
    if (lists[q].size() <= cap) continue;
    Rng rng(mix_seed(seed, q));
    lists[q] = subsample(lists[q], cap, rng);
  }
  return lists;
}

std::vector<double> set_abstraction(const Vec3& center, const Matrix& neighbor_features,
                                    std::span<const Vec3> neighbor_positions,
                                    const nn::MlpParams& mlp) {
  const std::size_t c = neighbor_features.cols();
  if (neighbor_features.rows() != neighbor_positions.size()) {
    throw ValidationError("set_abstraction: feature rows and positions differ");
  }
  if (mlp.in_width() != c + 3) {
    throw ValidationError("set_abstraction: MLP input width must be feature width + 3");
  }
  std::vector<double> out(mlp.out_width(), 0.0);
  std::vector<double> input(c + 3);
  for (std::size_t j = 0; j < neighbor_positions.size(); ++j) {
    std::span<const double> f = neighbor_features.row(j);
    std::copy(f.begin(), f.end(), input.begin());
    for (std::size_t a = 0; a < 3; ++a) input[c + a] = neighbor_positions[j][a] - center[a];
    const std::vector<double> y = nn::mlp_forward(mlp, input);
    if (j == 0) {
      out = y;
    } else {
      for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::max(out[k], y[k]);
    }
  }
  return out;
}

Matrix abstract_features(std::span<const Vec3> centers, std::span<const Vec3> source_positions,
                         const Matrix& source_features, const NeighborLists& neighbors,
                         const nn::MlpParams& mlp) {
  const std::size_t c = source_features.cols();
  if (mlp.in_width() != c + 3) {
    throw ValidationError("set_abstraction: MLP input width must be feature width + 3");
  }
  if (source_features.rows() != source_positions.size() || neighbors.size() != centers.size()) {
    throw ValidationError("set_abstraction: inconsistent batch shapes");
  }
  const nn::Layer& first = mlp.layers.front();
  const std::size_t hidden = first.weight.cols();
  const bool single_layer = mlp.layers.size() == 1;

  // Feature part of the first layer, computed once per referenced source.
  Matrix partial(source_positions.size(), hidden);
  std::vector<char> ready(source_positions.size(), 0);
  nn::Layer feature_part{Matrix(c, hidden), first.bias};
  std::copy_n(first.weight.data().begin(), c * hidden, feature_part.weight.data().begin());

  Matrix out(centers.size(), mlp.out_width());
  std::vector<double> z(hidden);
  std::vector<double> cur;
  std::vector<double> next;
  for (std::size_t q = 0; q < centers.size(); ++q) {
    std::span<double> acc = out.row(q);
    bool first_neighbor = true;
    for (std::size_t j : neighbors[q]) {
      if (!ready[j]) {
        nn::layer_forward(feature_part, source_features.row(j), partial.row(j));
        ready[j] = 1;
      }
      std::span<const double> base = partial.row(j);
      std::copy(base.begin(), base.end(), z.begin());
      for (std::size_t a = 0; a < 3; ++a) {
        const double rel = source_positions[j][a] - centers[q][a];
        const double* wr = first.weight.data().data() + (c + a) * hidden;
        for (std::size_t o = 0; o < hidden; ++o) z[o] += rel * wr[o];
      }
      if (single_layer) {
        cur = z;
        if (mlp.output == nn::OutputActivation::Sigmoid) {
          for (double& v : cur) v = nn::sigmoid(v);
        }
      } else {
        cur.resize(hidden);
        for (std::size_t o = 0; o < hidden; ++o) cur[o] = nn::relu(z[o]);
        for (std::size_t l = 1; l < mlp.layers.size(); ++l) {
          next.assign(mlp.dims[l + 1], 0.0);
          nn::layer_forward(mlp.layers[l], cur, next);
          const bool last = l + 1 == mlp.layers.size();
          for (double& v : next) {
            v = last ? (mlp.output == nn::OutputActivation::Sigmoid ? nn::sigmoid(v) : v)
                     : nn::relu(v);
          }
          cur.swap(next);
        }
      }
      if (first_neighbor) {
        std::copy(cur.begin(), cur.end(), acc.begin());
        first_neighbor = false;
      } else {
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] = std::max(acc[k], cur[k]);
      }
    }
  }
  return out;
}

VsaMlps VsaMlps::random(const VsaConfig& cfg, std::array<std::size_t, 4> level_widths,
                        std::uint64_t seed) {
  VsaMlps m;
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t r = 0; r < 2; ++r) {
      m.levels[k][r] = nn::init_params(
          {level_widths[k] + 3, cfg.level_out_width, cfg.level_out_width}, mix_seed(seed, k * 2 + r));
    }
  }
  for (std::size_t r = 0; r < 2; ++r) {
    m.raw[r] = nn::init_params({1 + 3, cfg.raw_out_width, cfg.raw_out_width},
                               mix_seed(seed, 100 + r));
  }
  return m;
}

Matrix vsa_multi_level(std::span<const Vec3> keypoints,
                       const std::array<sparse::SparseTensor, 4>& levels, const VsaConfig& cfg,
                       const VsaMlps& mlps, std::uint64_t seed) {
  Matrix pv(keypoints.size(), cfg.pv_width());
  std::size_t offset = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    const std::vector<Vec3> centers = sparse::voxel_centers(levels[k]);
    const std::array<double, 2> radii{cfg.level_radii[k].inner, cfg.level_radii[k].outer};
    for (std::size_t r = 0; r < 2; ++r) {
      const nn::MlpParams& g = mlps.levels[k][r];
      if (g.out_width() != cfg.level_out_width) {
        throw ValidationError("vsa: branch output width differs from the configuration");
      }
      const NeighborLists nb =
          radius_query(keypoints, centers, radii[r], cfg.level_caps[k], mix_seed(seed, k * 2 + r));
      copy_block(abstract_features(keypoints, centers, levels[k].features(), nb, g), pv, offset);
      offset += cfg.level_out_width;
    }
  }
  return pv;
}

KeypointFeatures extended_vsa(std::span<const Vec3> keypoints,
                              std::span<const sparse::LidarPoint> raw_points,
                              const std::array<sparse::SparseTensor, 4>& levels,
                              const sparse::BevMap& bev, const VsaConfig& cfg, const VsaMlps& mlps,
                              std::uint64_t seed) {
  KeypointFeatures f;
  f.pv = vsa_multi_level(keypoints, levels, cfg, mlps, seed);

  std::vector<Vec3> raw_pos;
  Matrix raw_feat(raw_points.size(), 1);
  raw_pos.reserve(raw_points.size());
  for (std::size_t i = 0; i < raw_points.size(); ++i) {
    raw_pos.push_back({raw_points[i].x, raw_points[i].y, raw_points[i].z});
    raw_feat(i, 0) = raw_points[i].intensity;
  }
  f.raw = Matrix(keypoints.size(), cfg.raw_width());
  const std::array<double, 2> radii{cfg.raw_radii.inner, cfg.raw_radii.outer};
  for (std::size_t r = 0; r < 2; ++r) {
    const NeighborLists nb =
        radius_query(keypoints, raw_pos, radii[r], cfg.raw_cap, mix_seed(seed, 100 + r));
    copy_block(abstract_features(keypoints, raw_pos, raw_feat, nb, mlps.raw[r]), f.raw,
               r * cfg.raw_out_width);
  }

  f.bev = Matrix(keypoints.size(), bev.channels());
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    const std::vector<double> s = sparse::bilinear_sample(bev, keypoints[i][0], keypoints[i][1]);
    std::copy(s.begin(), s.end(), f.bev.row(i).begin());
  }

  f.concat = Matrix(keypoints.size(), f.pv.cols() + f.raw.cols() + f.bev.cols());
  copy_block(f.pv, f.concat, 0);
  copy_block(f.raw, f.concat, f.pv.cols());
  copy_block(f.bev, f.concat, f.pv.cols() + f.raw.cols());
  return f;
}

std::vector<int> segmentation_labels(std::span<const Vec3> keypoints,
                                     std::span<const geom::LabeledBox> gts) {
  std::vector<int> labels(keypoints.size(), 0);
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    for (const geom::LabeledBox& g : gts) {
      if (geom::point_in_box(keypoints[i], g.box)) {
        labels[i] = 1;
        break;
      }
    }
  }
  return labels;
}

Matrix scale_rows(const Matrix& features, std::span<const double> scores) {
  if (scores.size() != features.rows()) throw ValidationError("scale_rows: size mismatch");
  Matrix out = features;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (double& v : out.row(r)) v *= scores[r];
  }
  return out;
}

PkwResult pkw(const Matrix& features, std::span<const Vec3> keypoints,
              std::span<const geom::LabeledBox> gts, const nn::MlpParams& scorer) {
  if (scorer.out_width() != 1 || scorer.output != nn::OutputActivation::Sigmoid) {
    throw ValidationError("pkw: scorer must end in a single sigmoid unit");
  }
  if (keypoints.size() != features.rows()) throw ValidationError("pkw: keypoint count mismatch");
  PkwResult res;
  const Matrix s = nn::mlp_forward(scorer, features);
  res.scores.resize(features.rows());
  for (std::size_t r = 0; r < features.rows(); ++r) {
    res.scores[r] = std::clamp(s(r, 0), rpn::kProbClamp, 1.0 - rpn::kProbClamp);
  }
  res.weighted = scale_rows(features, res.scores);
  res.labels = segmentation_labels(keypoints, gts);
  return res;
}

double seg_loss(std::span<const double> scores, std::span<const int> labels,
                std::vector<double>* grad) {
  return rpn::focal_loss(scores, labels, grad);
}

}  // namespace pvl::vsa
