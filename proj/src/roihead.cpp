#include "pvl/roihead.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pvl/error.hpp"
#include "pvl/rng.hpp"

namespace pvl::roi {

RoiPoolMlps RoiPoolMlps::random(const RoiGridConfig& cfg, std::size_t keypoint_width,
                                std::uint64_t seed) {
  RoiPoolMlps m;
  for (std::size_t r = 0; r < 2; ++r) {
    m.grid[r] = nn::init_params({keypoint_width + 3, cfg.branch_width, cfg.branch_width},
                                mix_seed(seed, r));
  }
  m.pooled = nn::init_params({cfg.grid_count() * cfg.grid_width(), cfg.pooled_width, cfg.pooled_width},
                             mix_seed(seed, 7), nn::OutputActivation::Relu);
  return m;
}

RoiGrid roi_grid_pool(const Box3D& roi, std::span<const Vec3> keypoints,
                      const Matrix& keypoint_features, const RoiGridConfig& cfg,
                      const RoiPoolMlps& mlps, std::uint64_t seed) {
  const std::array<Box3D, 1> one{roi};
  return std::move(roi_grid_pool(one, keypoints, keypoint_features, cfg, mlps, seed).front());
}

std::vector<RoiGrid> roi_grid_pool(std::span<const Box3D> rois, std::span<const Vec3> keypoints,
                                   const Matrix& keypoint_features, const RoiGridConfig& cfg,
                                   const RoiPoolMlps& mlps, std::uint64_t seed) {
  if (keypoint_features.rows() != keypoints.size()) {
    throw ValidationError("roi_grid_pool: keypoint positions and features differ in count");
  }
  const std::size_t per_roi = cfg.grid_count();
  std::vector<Vec3> all_points;
  all_points.reserve(rois.size() * per_roi);
  for (const Box3D& roi : rois) {
    const std::vector<Vec3> g = geom::roi_grid_points(roi, cfg.resolution);
    all_points.insert(all_points.end(), g.begin(), g.end());
  }

  const std::array<double, 2> radii{cfg.radii.inner, cfg.radii.outer};
  std::array<Matrix, 2> branch;
  for (std::size_t r = 0; r < 2; ++r) {
    vsa::NeighborLists lists;
    lists.reserve(all_points.size());
    for (std::size_t i = 0; i < rois.size(); ++i) {
      const std::span<const Vec3> grid(all_points.data() + i * per_roi, per_roi);
      vsa::NeighborLists nb = vsa::radius_query(grid, keypoints, radii[r], cfg.cap, mix_seed(seed, r));
      for (auto& l : nb) lists.push_back(std::move(l));
    }
    branch[r] = vsa::abstract_features(all_points, keypoints, keypoint_features, lists, mlps.grid[r]);
  }

  std::vector<RoiGrid> out(rois.size());
  const std::size_t bw = cfg.branch_width;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    RoiGrid& g = out[i];
    g.roi = rois[i];
    g.grid_points.assign(all_points.begin() + static_cast<std::ptrdiff_t>(i * per_roi),
                         all_points.begin() + static_cast<std::ptrdiff_t>((i + 1) * per_roi));
    g.grid_features = Matrix(per_roi, cfg.grid_width());
    for (std::size_t p = 0; p < per_roi; ++p) {
      std::span<double> dst = g.grid_features.row(p);
      for (std::size_t r = 0; r < 2; ++r) {
        std::span<const double> src = branch[r].row(i * per_roi + p);
        std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(r * bw));
      }
    }
    g.pooled = nn::mlp_forward(mlps.pooled, g.grid_features.data());
  }
  return out;
}

std::vector<double> average_pool(const Box3D& roi, std::span<const Vec3> keypoints,
                                 const Matrix& keypoint_features) {
  std::vector<double> mean(keypoint_features.cols(), 0.0);
  std::size_t n = 0;
  for (std::size_t j = 0; j < keypoints.size(); ++j) {
    if (!geom::point_in_box(keypoints[j], roi)) continue;
    std::span<const double> f = keypoint_features.row(j);
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += f[c];
    ++n;
  }
  if (n > 0) {
    for (double& v : mean) v /= static_cast<double>(n);
  }
  return mean;
}

Matrix average_pool_cells(const Box3D& roi, std::span<const Vec3> keypoints,
                          const Matrix& keypoint_features, int resolution) {
  const std::size_t res = static_cast<std::size_t>(resolution);
  Matrix cells(res * res * res, keypoint_features.cols());
  std::vector<std::size_t> counts(cells.rows(), 0);
  auto bin = [res](double local, double dim) {
    const double u = (local / dim + 0.5) * static_cast<double>(res);
    return std::min(res - 1, static_cast<std::size_t>(std::max(0.0, std::floor(u))));
  };
  for (std::size_t j = 0; j < keypoints.size(); ++j) {
    if (!geom::point_in_box(keypoints[j], roi)) continue;
    const Vec3 local = geom::rotate_z(
        {keypoints[j][0] - roi.cx, keypoints[j][1] - roi.cy, keypoints[j][2] - roi.cz}, -roi.theta);
    const std::size_t cell =
        (bin(local[0], roi.l) * res + bin(local[1], roi.w)) * res + bin(local[2], roi.h);
    std::span<const double> f = keypoint_features.row(j);
    std::span<double> acc = cells.row(cell);
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += f[c];
    ++counts[cell];
  }
  for (std::size_t c = 0; c < cells.rows(); ++c) {
    if (counts[c] == 0) continue;
    for (double& v : cells.row(c)) v /= static_cast<double>(counts[c]);
  }
  return cells;
}

double nonzero_row_fraction(const Matrix& m) {
  if (m.rows() == 0) return 0.0;
  std::size_t nonzero = 0;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    if (std::any_of(row.begin(), row.end(), [](double v) { return v != 0.0; })) ++nonzero;
  }
  return static_cast<double>(nonzero) / static_cast<double>(m.rows());
}

double confidence_target(double iou) { return std::min(1.0, std::max(0.0, 2.0 * iou - 0.5)); }

double iou_bce_loss(std::span<const double> pred, std::span<const double> target,
                    std::vector<double>* grad) {
  if (pred.size() != target.size()) throw ValidationError("iou_bce_loss: size mismatch");
  if (grad) grad->assign(pred.size(), 0.0);
  if (pred.empty()) return 0.0;
  const double n = static_cast<double>(pred.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(pred[i], rpn::kProbClamp, 1.0 - rpn::kProbClamp);
    const double y = target[i];
    total += -y * std::log(p) - (1.0 - y) * std::log(1.0 - p);
    if (grad && p == pred[i]) (*grad)[i] = (-y / p + (1.0 - y) / (1.0 - p)) / n;
  }
  return total / n;
}

std::size_t RefineTargets::num_positive() const {
  return static_cast<std::size_t>(std::count(positive.begin(), positive.end(), 1));
}

SampledRois sample_proposals(std::span<const Detection> proposals, std::span<const LabeledBox> gts,
                             std::uint64_t seed, const SamplingConfig& cfg) {
  const std::size_t n = proposals.size();
  std::vector<double> best(n, 0.0);
  std::vector<int> match(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id != proposals[i].class_id) continue;
      const double v = geom::iou_3d(proposals[i].box, gts[g].box);
      if (match[i] < 0 || v > best[i]) {
        best[i] = v;
        match[i] = static_cast<int>(g);
      }
    }
  }

  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < n; ++i) (best[i] >= cfg.positive_iou ? pos : neg).push_back(i);

  const auto want_pos = static_cast<std::size_t>(
      std::llround(static_cast<double>(cfg.count) * cfg.positive_fraction));
  std::size_t n_pos = std::min(pos.size(), want_pos);
  const std::size_t n_neg = std::min(neg.size(), cfg.count - n_pos);
  n_pos = std::min(pos.size(), cfg.count - n_neg);

  Rng rng(mix_seed(seed, 0x5a3));
  const std::vector<std::size_t> take_pos = vsa::subsample(pos, n_pos, rng);
  const std::vector<std::size_t> take_neg = vsa::subsample(neg, n_neg, rng);

  SampledRois out;
  auto add = [&](std::size_t i, bool positive) {
    out.rois.push_back(proposals[i].box);
    out.source_index.push_back(i);
    out.targets.confidence.push_back(confidence_target(best[i]));
    out.targets.iou.push_back(best[i]);
    out.targets.positive.push_back(positive ? 1 : 0);
    out.targets.matched_gt.push_back(match[i]);
    out.targets.residuals.push_back(
        positive ? rpn::encode_residual(gts[static_cast<std::size_t>(match[i])].box, proposals[i].box)
                 : Residual{});
  };
  for (std::size_t i : take_pos) add(i, true);
  for (std::size_t i : take_neg) add(i, false);
  return out;
}

RefineHead RefineHead::random(std::size_t pooled_width, std::uint64_t seed) {
  RefineHead h;
  h.shared = nn::init_params({pooled_width, 256, 256}, mix_seed(seed, 1), nn::OutputActivation::Relu);
  h.confidence = nn::init_params({256, 128, 1}, mix_seed(seed, 2), nn::OutputActivation::Sigmoid);
  h.residual = nn::init_params({256, 128, 7}, mix_seed(seed, 3));
  nn::Layer& last = h.residual.layers.back();
  std::fill(last.weight.data().begin(), last.weight.data().end(), 0.0);
  return h;
}

RefineHead RefineHead::zero_branches(std::size_t pooled_width, std::uint64_t seed) {
  RefineHead h;
  h.shared = nn::init_params({pooled_width, 256, 256}, mix_seed(seed, 1), nn::OutputActivation::Relu);
  h.confidence = nn::zero_params({256, 128, 1}, nn::OutputActivation::Sigmoid);
  h.residual = nn::zero_params({256, 128, 7});
  return h;
}

RefineOutput refine(std::span<const double> roi_feature, const Box3D& roi, const RefineHead& head) {
  const std::vector<double> s =
      head.input.layers.empty()
          ? nn::mlp_forward(head.shared, roi_feature)
          : nn::mlp_forward(head.shared, nn::mlp_forward(head.input, roi_feature));
  RefineOutput out;
  out.confidence = nn::mlp_forward(head.confidence, s).front();
  const std::vector<double> r = nn::mlp_forward(head.residual, s);
  if (r.size() != 7) throw ValidationError("refine: residual branch must output 7 values");
  std::copy(r.begin(), r.end(), out.residual.begin());
  out.refined = rpn::decode_residual(out.residual, roi);
  return out;
}

RcnnLoss rcnn_loss(std::span<const double> confidences, std::span<const Residual> residual_preds,
                   const RefineTargets& targets, std::vector<double>* conf_grad,
                   std::vector<Residual>* residual_grad) {
  if (confidences.size() != targets.size() || residual_preds.size() != targets.size()) {
    throw ValidationError("rcnn_loss: predictions do not match the sampled RoIs");
  }
  RcnnLoss out;
  out.iou = iou_bce_loss(confidences, targets.confidence, conf_grad);

  std::vector<Residual> pred, target;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!targets.positive[i]) continue;
    pred.push_back(residual_preds[i]);
    target.push_back(targets.residuals[i]);
    rows.push_back(i);
  }
  std::vector<Residual> g;
  out.reg = rpn::smooth_l1_loss(pred, target, residual_grad ? &g : nullptr);
  if (residual_grad) {
    residual_grad->assign(targets.size(), Residual{});
    for (std::size_t k = 0; k < rows.size(); ++k) (*residual_grad)[rows[k]] = g[k];
  }
  out.total = out.iou + out.reg;
  return out;
}

RcnnLoss refine_loss(const RefineHead& head, const Matrix& roi_features,
                     const RefineTargets& targets, RefineGrads* grads) {
  const Matrix x = head.input.layers.empty() ? roi_features : nn::mlp_forward(head.input, roi_features);
  const Matrix shared = nn::mlp_forward(head.shared, x);
  const Matrix conf = nn::mlp_forward(head.confidence, shared);
  const Matrix res = nn::mlp_forward(head.residual, shared);
  std::vector<double> conf_v(conf.rows());
  std::vector<Residual> res_v(res.rows());
  for (std::size_t i = 0; i < conf.rows(); ++i) {
    conf_v[i] = conf(i, 0);
    for (std::size_t k = 0; k < 7; ++k) res_v[i][k] = res(i, k);
  }
  if (!grads) return rcnn_loss(conf_v, res_v, targets);

  std::vector<double> gc;
  std::vector<Residual> gr;
  const RcnnLoss loss = rcnn_loss(conf_v, res_v, targets, &gc, &gr);
  Matrix up_conf(conf.rows(), 1);
  Matrix up_res(res.rows(), 7);
  for (std::size_t i = 0; i < conf.rows(); ++i) {
    up_conf(i, 0) = gc[i];
    for (std::size_t k = 0; k < 7; ++k) up_res(i, k) = gr[i][k];
  }
  grads->confidence = nn::mlp_backward(head.confidence, shared, up_conf);
  grads->residual = nn::mlp_backward(head.residual, shared, up_res);
  Matrix up_shared = grads->confidence.input;
  auto dst = up_shared.data();
  auto add = grads->residual.input.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += add[i];
  grads->shared = nn::mlp_backward(head.shared, x, up_shared);
  return loss;
}

void sgd_step(RefineHead& head, const RefineGrads& grads, double lr) {
  nn::sgd_step(head.shared, grads.shared, lr);
  nn::sgd_step(head.confidence, grads.confidence, lr);
  nn::sgd_step(head.residual, grads.residual, lr);
}

void fit_input_standardization(RefineHead& head, const Matrix& features) {
  const std::size_t c = features.cols();
  const std::size_t n = features.rows();
  if (n == 0) throw ValidationError("fit_input_standardization: no rows");
  head.input = nn::zero_params({c, c});
  nn::Layer& layer = head.input.layers.front();
  for (std::size_t j = 0; j < c; ++j) {
    double mean = 0.0;
    for (std::size_t r = 0; r < n; ++r) mean += features(r, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t r = 0; r < n; ++r) var += (features(r, j) - mean) * (features(r, j) - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    const double scale = sd > 1e-12 ? 1.0 / sd : 1.0;
    layer.weight(j, j) = scale;
    layer.bias[j] = -mean * scale;
  }
}

std::vector<Detection> final_select(std::span<const Detection> refined, double nms_iou,
                                    geom::IouKind kind) {
  const auto keep = geom::nms(refined, nms_iou, kind);
  std::vector<Detection> out;
  out.reserve(keep.size());
  for (std::size_t k : keep) out.push_back(refined[k]);
  return out;
}

}  // namespace pvl::roi
