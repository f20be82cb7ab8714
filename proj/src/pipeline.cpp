#include "pvl/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "pvl/error.hpp"
#include "pvl/rng.hpp"

namespace pvl::pipeline {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::array<std::size_t, 4> level_widths(const Config& cfg) { return cfg.backbone_widths; }

nn::MlpParams make_pkw(const Config& cfg, std::uint64_t seed) {
  return nn::init_params({cfg.keypoint_width(), cfg.pkw_hidden, cfg.pkw_hidden, 1}, seed,
                         nn::OutputActivation::Sigmoid);
}

void append_rows(Matrix& dst, const Matrix& src) {
  if (src.rows() == 0) return;
  if (dst.rows() == 0) {
    dst = src;
    return;
  }
  Matrix merged(dst.rows() + src.rows(), dst.cols());
  std::copy(dst.data().begin(), dst.data().end(), merged.data().begin());
  std::copy(src.data().begin(), src.data().end(),
            merged.data().begin() + static_cast<std::ptrdiff_t>(dst.data().size()));
  dst = std::move(merged);
}

Matrix select_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = m.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

roi::RefineTargets select_targets(const roi::RefineTargets& t, std::span<const std::size_t> rows) {
  roi::RefineTargets out;
  for (std::size_t r : rows) {
    out.confidence.push_back(t.confidence[r]);
    out.iou.push_back(t.iou[r]);
    out.positive.push_back(t.positive[r]);
    out.residuals.push_back(t.residuals[r]);
    out.matched_gt.push_back(t.matched_gt[r]);
  }
  return out;
}

double l2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

Model Model::random(const Config& cfg, std::uint64_t seed) {
  validate(cfg);
  Model m;
  m.backbone = sparse::BackboneParams::random(4, level_widths(cfg), mix_seed(seed, 1));
  m.rpn = rpn::RpnHead::random(cfg.bev_channels(), 2, mix_seed(seed, 2));
  m.vsa = vsa::VsaMlps::random(cfg.vsa(), level_widths(cfg), mix_seed(seed, 3));
  m.pkw = make_pkw(cfg, mix_seed(seed, 4));
  m.roi = roi::RoiPoolMlps::random(cfg.roi_grid(), cfg.keypoint_width(), mix_seed(seed, 5));
  m.refine = roi::RefineHead::random(cfg.roi_pooled_width, mix_seed(seed, 6));
  return m;
}

std::vector<nn::NamedMlp> trained_heads(const Model& model) {
  std::vector<nn::NamedMlp> nets{{"pkw", model.pkw}};
  if (!model.refine.input.layers.empty()) nets.push_back({"refine.input", model.refine.input});
  for (nn::NamedMlp n : std::vector<nn::NamedMlp>{{"refine.shared", model.refine.shared},
          {"refine.confidence", model.refine.confidence},
          {"refine.residual", model.refine.residual}}) {
    nets.push_back(std::move(n));
  }
  return nets;
}

void load_heads(Model& model, std::span<const nn::NamedMlp> nets) {
  for (const nn::NamedMlp& net : nets) {
    if (net.name == "refine.input") {
      const std::size_t w = model.refine.shared.in_width();
      if (net.params.dims != std::vector<std::size_t>{w, w}) {
        throw ValidationError("params: head 'refine.input' does not match the configured shape");
      }
      model.refine.input = net.params;
      continue;
    }
    nn::MlpParams* dst = net.name == "pkw"                 ? &model.pkw
                         : net.name == "refine.shared"     ? &model.refine.shared
                         : net.name == "refine.confidence" ? &model.refine.confidence
                         : net.name == "refine.residual"   ? &model.refine.residual
                                                           : nullptr;
    if (!dst) throw ValidationError("params: unknown head '" + net.name + "'");
    if (dst->dims != net.params.dims || dst->output != net.params.output) {
      throw ValidationError("params: head '" + net.name + "' does not match the configured shape");
    }
    *dst = net.params;
  }
}

std::vector<Vec3> in_range_positions(const SceneSample& scene, const sparse::PointRange& range) {
  std::vector<Vec3> out;
  out.reserve(scene.points.size());
  for (const auto& p : scene.points) {
    if (range.contains(p.x, p.y, p.z)) out.push_back({p.x, p.y, p.z});
  }
  return out;
}

Encoded encode(const SceneSample& scene, const Config& cfg, const Model& model,
               std::uint64_t seed, StageTimes* times) {
  StageTimes local;
  StageTimes& t = times ? *times : local;
  Encoded enc;

  auto t0 = Clock::now();
  const sparse::SparseTensor voxels = sparse::voxelize(scene.points, cfg.range(), cfg.voxel_size);
  t.voxelize_ms = ms_since(t0);

  t0 = Clock::now();
  enc.levels = sparse::run_backbone(voxels, model.backbone);
  enc.bev = sparse::bev_collapse(enc.levels[3]);
  t.backbone_ms = ms_since(t0);

  const std::vector<Vec3> positions = in_range_positions(scene, cfg.range());
  enc.empty = positions.empty();
  if (enc.empty) return enc;

  t0 = Clock::now();
  std::vector<sparse::LidarPoint> raw;
  raw.reserve(positions.size());
  for (const auto& p : scene.points) {
    if (cfg.range().contains(p.x, p.y, p.z)) raw.push_back(p);
  }
  for (std::size_t i : vsa::fps(positions, cfg.keypoints)) enc.keypoints.push_back(positions[i]);
  enc.features = vsa::extended_vsa(enc.keypoints, raw, enc.levels, enc.bev, cfg.vsa(), model.vsa,
                                   mix_seed(seed, 11));
  t.keypoint_ms = ms_since(t0);
  return enc;
}

std::vector<Detection> propose(const Encoded& enc, const Config& cfg, const Model& model) {
  if (enc.empty) return {};
  const std::array<rpn::AnchorClass, 1> classes{cfg.anchor_class()};
  const rpn::AnchorSet anchors = rpn::generate_anchors(classes, rpn::BevLattice::of(enc.bev));
  rpn::RpnOutput out = rpn::run_rpn_head(model.rpn, enc.bev, anchors);
  for (rpn::Residual& r : out.residuals) {
    for (std::size_t k = 3; k < 6; ++k) r[k] = std::clamp(r[k], -1.0, 1.0);
  }
  return rpn::extract_proposals(out.scores, out.residuals, anchors, cfg.proposal_top_k,
                                cfg.proposal_nms, cfg.nms_kind);
}

SceneResult run_scene(const SceneSample& scene, const Config& cfg, const Model& model,
                      std::uint64_t seed) {
  SceneResult res;
  const auto start = Clock::now();
  const Encoded enc = encode(scene, cfg, model, seed, &res.times);
  if (enc.empty) {
    res.times.total_ms = ms_since(start);
    return res;
  }

  auto t0 = Clock::now();
  res.proposals = propose(enc, cfg, model);
  res.times.rpn_ms = ms_since(t0);

  t0 = Clock::now();
  const vsa::PkwResult weighted = vsa::pkw(enc.features.concat, enc.keypoints, {}, model.pkw);
  std::vector<Box3D> rois;
  rois.reserve(res.proposals.size());
  for (const Detection& d : res.proposals) rois.push_back(d.box);
  const std::vector<roi::RoiGrid> grids = roi::roi_grid_pool(
      rois, enc.keypoints, weighted.weighted, cfg.roi_grid(), model.roi, mix_seed(seed, 12));
  res.times.roi_ms = ms_since(t0);

  t0 = Clock::now();
  std::vector<Detection> refined;
  refined.reserve(grids.size());
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const roi::RefineOutput o = roi::refine(grids[i].pooled, rois[i], model.refine);
    refined.push_back(geom::make_detection(o.refined, o.confidence, res.proposals[i].class_id));
  }
  res.detections = roi::final_select(refined, cfg.final_nms, cfg.nms_kind);
  res.times.refine_ms = ms_since(t0);
  res.times.total_ms = ms_since(start);
  return res;
}

PkwSet pkw_dataset(std::span<const SceneSample> scenes, const Config& cfg, const Model& model,
                   std::uint64_t seed) {
  PkwSet set;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const Encoded enc = encode(scenes[s], cfg, model, mix_seed(seed, s));
    if (enc.empty) continue;
    append_rows(set.features, enc.features.concat);
    const std::vector<int> labels = vsa::segmentation_labels(enc.keypoints, scenes[s].gt_boxes);
    set.labels.insert(set.labels.end(), labels.begin(), labels.end());
  }
  return set;
}

double pkw_accuracy(const nn::MlpParams& scorer, const PkwSet& set) {
  if (set.labels.empty()) return 0.0;
  const Matrix s = nn::mlp_forward(scorer, set.features);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.labels.size(); ++i) {
    correct += (s(i, 0) >= 0.5) == (set.labels[i] == 1) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(set.labels.size());
}

TrainCurve train_pkw(nn::MlpParams& scorer, const PkwSet& set, std::size_t iters, double lr,
                     const rpn::FocalParams& focal) {
  TrainCurve curve;
  const std::size_t n = set.labels.size();
  if (n == 0) throw ValidationError("train_pkw: no keypoints to train on");
  Matrix upstream(n, 1);
  std::vector<double> grad;
  std::vector<double> probs(n);
  for (std::size_t it = 0; it <= iters; ++it) {
    const Matrix s = nn::mlp_forward(scorer, set.features);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
      probs[i] = s(i, 0);
      correct += (probs[i] >= 0.5) == (set.labels[i] == 1) ? 1 : 0;
    }
    curve.loss.push_back(rpn::focal_loss(probs, set.labels, &grad, focal));
    curve.metric.push_back(static_cast<double>(correct) / static_cast<double>(n));
    curve.iteration.push_back(it);
    if (it == iters) break;
    for (std::size_t i = 0; i < n; ++i) upstream(i, 0) = grad[i];
    nn::sgd_step(scorer, nn::mlp_backward(scorer, set.features, upstream), lr);
  }
  return curve;
}

std::vector<Detection> jitter_proposals(std::span<const LabeledBox> gts, const Config& cfg,
                                        std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x7e7));
  std::vector<Detection> out;
  const double j = cfg.refine_jitter;
  for (const LabeledBox& g : gts) {
    const Box3D& b = g.box;
    for (std::size_t k = 0; k < cfg.refine_proposals; ++k) {
      const double dx = rng.uniform(-j, j);
      const double dy = rng.uniform(-j, j);
      const double dz = rng.uniform(-0.4 * j, 0.4 * j);
      const double sl = std::exp(rng.uniform(-0.15, 0.15));
      const double sw = std::exp(rng.uniform(-0.15, 0.15));
      const double sh = std::exp(rng.uniform(-0.15, 0.15));
      const double dt = rng.uniform(-0.3, 0.3);
      out.push_back(geom::make_detection(
          Box3D(b.cx + dx, b.cy + dy, b.cz + dz, b.l * sl, b.w * sw, b.h * sh, b.theta + dt),
          rng.uniform(), g.class_id));
    }
  }
  const rpn::AnchorClass a = cfg.anchor_class();
  const std::size_t background = gts.size() * cfg.refine_proposals;
  for (std::size_t k = 0; k < background; ++k) {
    const double x = rng.uniform(cfg.range_min[0], cfg.range_max[0]);
    const double y = rng.uniform(cfg.range_min[1], cfg.range_max[1]);
    const double t = rng.uniform(-std::numbers::pi, std::numbers::pi);
    out.push_back(geom::make_detection(Box3D(x, y, a.z_center, a.l, a.w, a.h, t), rng.uniform(),
                                       a.class_id));
  }
  return out;
}

RefineSet refine_dataset(std::span<const SceneSample> scenes, const Config& cfg, const Model& model,
                         std::uint64_t seed) {
  RefineSet set;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const std::uint64_t sseed = mix_seed(seed, s);
    const Encoded enc = encode(scenes[s], cfg, model, sseed);
    if (enc.empty) continue;
    const vsa::PkwResult weighted =
        vsa::pkw(enc.features.concat, enc.keypoints, scenes[s].gt_boxes, model.pkw);
    const std::vector<Detection> proposals = jitter_proposals(scenes[s].gt_boxes, cfg, sseed);
    const roi::SampledRois sampled =
        roi::sample_proposals(proposals, scenes[s].gt_boxes, mix_seed(sseed, 1), cfg.sampling());
    const std::vector<roi::RoiGrid> grids = roi::roi_grid_pool(
        sampled.rois, enc.keypoints, weighted.weighted, cfg.roi_grid(), model.roi, mix_seed(sseed, 2));

    Matrix pooled(grids.size(), cfg.roi_pooled_width);
    for (std::size_t i = 0; i < grids.size(); ++i) {
      std::copy(grids[i].pooled.begin(), grids[i].pooled.end(), pooled.row(i).begin());
      const roi::RefineTargets& t = sampled.targets;
      set.rois.push_back(sampled.rois[i]);
      set.targets.confidence.push_back(t.confidence[i]);
      set.targets.iou.push_back(t.iou[i]);
      set.targets.positive.push_back(t.positive[i]);
      set.targets.residuals.push_back(t.residuals[i]);
      set.targets.matched_gt.push_back(t.matched_gt[i]);
      set.matched.push_back(t.matched_gt[i] >= 0
                                ? scenes[s].gt_boxes[static_cast<std::size_t>(t.matched_gt[i])].box
                                : sampled.rois[i]);
      set.scene_of.push_back(s);
    }
    append_rows(set.features, pooled);
  }
  return set;
}

IouPair matched_iou(const roi::RefineHead& head, const RefineSet& set) {
  IouPair p;
  for (std::size_t i = 0; i < set.rois.size(); ++i) {
    if (!set.targets.positive[i]) continue;
    const roi::RefineOutput o = roi::refine(set.features.row(i), set.rois[i], head);
    p.raw += geom::iou_3d(set.rois[i], set.matched[i]);
    p.refined += geom::iou_3d(o.refined, set.matched[i]);
    ++p.count;
  }
  if (p.count > 0) {
    p.raw /= static_cast<double>(p.count);
    p.refined /= static_cast<double>(p.count);
  }
  return p;
}

TrainCurve train_refine(roi::RefineHead& head, const RefineSet& set, std::size_t iters, double lr) {
  if (set.rois.empty()) throw ValidationError("train_refine: no sampled RoIs to train on");
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < set.scene_of.size(); ++i) {
    if (i == 0 || set.scene_of[i] != set.scene_of[i - 1]) batches.emplace_back();
    batches.back().push_back(i);
  }
  std::vector<Matrix> feats;
  std::vector<roi::RefineTargets> targets;
  for (const auto& rows : batches) {
    feats.push_back(select_rows(set.features, rows));
    targets.push_back(select_targets(set.targets, rows));
  }

  // One entry before training, then the mean minibatch loss of every
  // completed pass over the scenes.
  TrainCurve curve;
  double pass = 0.0;
  for (std::size_t b = 0; b < batches.size(); ++b) pass += roi::refine_loss(head, feats[b], targets[b]).total;
  curve.loss.push_back(pass / static_cast<double>(batches.size()));
  curve.iteration.push_back(0);
  pass = 0.0;
  for (std::size_t it = 0; it < iters; ++it) {
    const std::size_t b = it % batches.size();
    roi::RefineGrads grads;
    pass += roi::refine_loss(head, feats[b], targets[b], &grads).total;
    roi::sgd_step(head, grads, lr);
    if (b + 1 == batches.size()) {
      curve.loss.push_back(pass / static_cast<double>(batches.size()));
      curve.iteration.push_back(it + 1);
      pass = 0.0;
    }
  }
  curve.metric.push_back(matched_iou(head, set).refined);
  return curve;
}

std::vector<BenchRow> bench_pooling(std::span<const SceneSample> scenes, const Config& cfg,
                                    const Model& model, std::uint64_t seed,
                                    std::span<const std::string> strategies) {
  for (const std::string& s : strategies) {
    if (s != "roi_grid" && s != "average_pool") {
      throw ValidationError("bench: unknown strategy '" + s + "' (expected roi_grid or average_pool)");
    }
  }
  struct Prepared {
    Encoded enc;
    Matrix weighted;
    std::vector<Box3D> rois;
  };
  std::vector<Prepared> prepared;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const std::uint64_t sseed = mix_seed(seed, s);
    Prepared p;
    p.enc = encode(scenes[s], cfg, model, sseed);
    if (p.enc.empty) continue;
    p.weighted = vsa::pkw(p.enc.features.concat, p.enc.keypoints, {}, model.pkw).weighted;
    Rng rng(mix_seed(sseed, 3));
    for (const LabeledBox& g : scenes[s].gt_boxes) {
      const Box3D& b = g.box;
      p.rois.emplace_back(b.cx + rng.uniform(-0.2, 0.2), b.cy + rng.uniform(-0.2, 0.2), b.cz, b.l, b.w,
                          b.h, b.theta + rng.uniform(-0.1, 0.1));
    }
    prepared.push_back(std::move(p));
  }

  const roi::RoiGridConfig gcfg = cfg.roi_grid();
  const std::size_t cells = gcfg.grid_count();
  const std::size_t kw = cfg.keypoint_width();
  std::vector<BenchRow> rows;
  for (const std::string& strategy : strategies) {
    BenchRow row;
    row.strategy = strategy;
    std::size_t nonzero_cells = 0;
    double norm_sum = 0.0;
    const auto t0 = Clock::now();
    for (std::size_t s = 0; s < prepared.size(); ++s) {
      const Prepared& p = prepared[s];
      const std::size_t r = p.rois.size();
      const std::size_t k = p.enc.keypoints.size();
      row.rois += r;
      if (strategy == "roi_grid") {
        row.output_width = gcfg.pooled_width;
        const auto grids = roi::roi_grid_pool(p.rois, p.enc.keypoints, p.weighted, gcfg, model.roi,
                                              mix_seed(seed, 100 + s));
        for (const roi::RoiGrid& g : grids) {
          nonzero_cells += static_cast<std::size_t>(
              std::llround(roi::nonzero_row_fraction(g.grid_features) * static_cast<double>(cells)));
          norm_sum += l2(g.pooled);
        }
        // grid points, neighbor lists, both branch outputs, the per-source
        // first-layer cache and the flattened grid features
        const std::size_t bytes = r * cells * 3 * sizeof(double) +
                                  r * cells * gcfg.cap * sizeof(std::size_t) +
                                  2 * r * cells * gcfg.branch_width * sizeof(double) +
                                  k * gcfg.branch_width * sizeof(double) +
                                  r * cells * gcfg.grid_width() * sizeof(double) +
                                  r * gcfg.pooled_width * sizeof(double);
        row.peak_bytes = std::max(row.peak_bytes, bytes);
      } else {
        row.output_width = kw;
        for (const Box3D& b : p.rois) {
          const std::vector<double> v = roi::average_pool(b, p.enc.keypoints, p.weighted);
          const Matrix per_cell =
              roi::average_pool_cells(b, p.enc.keypoints, p.weighted, gcfg.resolution);
          nonzero_cells += static_cast<std::size_t>(
              std::llround(roi::nonzero_row_fraction(per_cell) * static_cast<double>(cells)));
          norm_sum += l2(v);
        }
        const std::size_t bytes = r * kw * sizeof(double) + cells * kw * sizeof(double);
        row.peak_bytes = std::max(row.peak_bytes, bytes);
      }
    }
    row.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (row.rois > 0) {
      row.nonzero_fraction =
          static_cast<double>(nonzero_cells) / static_cast<double>(row.rois * cells);
      row.mean_norm = norm_sum / static_cast<double>(row.rois);
    }
    rows.push_back(row);
  }
  return rows;
}

std::string format_bench(std::span<const BenchRow> rows) {
  std::string out = "strategy,rois,output_width,seconds,peak_bytes,nonzero_fraction,mean_norm\n";
  char line[256];
  for (const BenchRow& r : rows) {
    std::snprintf(line, sizeof line, "%s,%zu,%zu,%.6f,%zu,%.17g,%.17g\n", r.strategy.c_str(), r.rois,
                  r.output_width, r.seconds, r.peak_bytes, r.nonzero_fraction, r.mean_norm);
    out += line;
  }
  return out;
}

}  // namespace pvl::pipeline
