#include "pvl/rpn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "pvl/error.hpp"

namespace pvl::rpn {

BevLattice BevLattice::of(const sparse::BevMap& map) {
  return {map.origin_x(), map.origin_y(), map.cell_x(), map.cell_y(), map.nx(), map.ny()};
}

AnchorSet generate_anchors(std::span<const AnchorClass> classes, const BevLattice& lattice) {
  AnchorSet set;
  set.lattice = lattice;
  set.per_cell = 2 * classes.size();
  set.boxes.reserve(lattice.nx * lattice.ny * set.per_cell);
  set.class_ids.reserve(set.boxes.capacity());
  for (std::size_t iy = 0; iy < lattice.ny; ++iy) {
    const double y = lattice.origin_y + (static_cast<double>(iy) + 0.5) * lattice.cell_y;
    for (std::size_t ix = 0; ix < lattice.nx; ++ix) {
      const double x = lattice.origin_x + (static_cast<double>(ix) + 0.5) * lattice.cell_x;
      for (const AnchorClass& c : classes) {
        for (double yaw : {0.0, std::numbers::pi / 2.0}) {
          set.boxes.emplace_back(x, y, c.z_center, c.l, c.w, c.h, yaw);
          set.class_ids.push_back(c.class_id);
        }
      }
    }
  }
  return set;
}

Residual encode_residual(const Box3D& gt, const Box3D& anchor) {
  const double diag = std::hypot(anchor.l, anchor.w);
  return {(gt.cx - anchor.cx) / diag,
          (gt.cy - anchor.cy) / diag,
          (gt.cz - anchor.cz) / anchor.h,
          std::log(gt.l / anchor.l),
          std::log(gt.w / anchor.w),
          std::log(gt.h / anchor.h),
          geom::normalize_angle(gt.theta - anchor.theta)};
}

Box3D decode_residual(const Residual& d, const Box3D& anchor) {
  const double diag = std::hypot(anchor.l, anchor.w);
  return Box3D(anchor.cx + d[0] * diag, anchor.cy + d[1] * diag, anchor.cz + d[2] * anchor.h,
               anchor.l * std::exp(d[3]), anchor.w * std::exp(d[4]), anchor.h * std::exp(d[5]),
               anchor.theta + d[6]);
}

std::size_t RpnTargets::num_positive() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), AnchorLabel::Positive));
}

std::vector<int> RpnTargets::label_codes() const {
  std::vector<int> codes(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) codes[i] = static_cast<int>(labels[i]);
  return codes;
}

RpnTargets assign_targets(const AnchorSet& anchors, std::span<const LabeledBox> gts,
                          const MatchThresholds& thresholds) {
  const std::size_t n = anchors.size();
  RpnTargets t;
  t.labels.assign(n, AnchorLabel::Negative);
  t.matched_gt.assign(n, -1);
  t.residuals.assign(n, Residual{});
  if (gts.empty()) return t;

  std::vector<double> best_iou(n, 0.0);
  std::vector<int> best_gt(n, -1);
  std::vector<double> gt_best_iou(gts.size(), 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id != anchors.class_ids[a]) continue;
      const double v = geom::bev_iou(anchors.boxes[a], gts[g].box);
      if (v > best_iou[a]) {
        best_iou[a] = v;
        best_gt[a] = static_cast<int>(g);
      }
      gt_best_iou[g] = std::max(gt_best_iou[g], v);
    }
  }

  for (std::size_t a = 0; a < n; ++a) {
    if (best_iou[a] >= thresholds.positive) {
      t.labels[a] = AnchorLabel::Positive;
      t.matched_gt[a] = best_gt[a];
    } else if (best_iou[a] >= thresholds.negative) {
      t.labels[a] = AnchorLabel::Ignore;
    }
  }
  // best-match promotion: every anchor tied at a gt's best IoU becomes positive for it
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gt_best_iou[g] <= 0.0) continue;
    for (std::size_t a = 0; a < n; ++a) {
      if (gts[g].class_id != anchors.class_ids[a]) continue;
      if (t.labels[a] == AnchorLabel::Positive) continue;
      if (geom::bev_iou(anchors.boxes[a], gts[g].box) == gt_best_iou[g]) {
        t.labels[a] = AnchorLabel::Positive;
        t.matched_gt[a] = static_cast<int>(g);
      }
    }
  }
  for (std::size_t a = 0; a < n; ++a) {
    if (t.labels[a] == AnchorLabel::Positive) {
      t.residuals[a] = encode_residual(gts[static_cast<std::size_t>(t.matched_gt[a])].box,
                                       anchors.boxes[a]);
    }
  }
  return t;
}

double focal_loss(std::span<const double> probs, std::span<const int> targets,
                  std::vector<double>* grad, const FocalParams& params) {
  if (probs.size() != targets.size()) throw ValidationError("focal_loss: size mismatch");
  const double a = params.alpha;
  const double gm = params.gamma;
  std::size_t positives = 0;
  for (int t : targets) positives += t == 1 ? 1 : 0;
  const double norm = static_cast<double>(std::max<std::size_t>(1, positives));
  if (grad) grad->assign(probs.size(), 0.0);

  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (targets[i] < 0) continue;
    const double raw = probs[i];
    const double p = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
    const bool clamped = p != raw;
    double loss = 0.0;
    double dp = 0.0;
    if (targets[i] == 1) {
      const double q = 1.0 - p;
      loss = -a * std::pow(q, gm) * std::log(p);
      dp = a * (gm * std::pow(q, gm - 1.0) * std::log(p) - std::pow(q, gm) / p);
    } else {
      loss = -(1.0 - a) * std::pow(p, gm) * std::log(1.0 - p);
      dp = -(1.0 - a) * (gm * std::pow(p, gm - 1.0) * std::log(1.0 - p) - std::pow(p, gm) / (1.0 - p));
    }
    total += loss;
    if (grad && !clamped) (*grad)[i] = dp / norm;
  }
  return total / norm;
}

double smooth_l1(double diff) {
  const double ad = std::abs(diff);
  return ad < 1.0 ? 0.5 * diff * diff : ad - 0.5;
}

double smooth_l1_loss(std::span<const Residual> pred, std::span<const Residual> target,
                      std::vector<Residual>* grad) {
  if (pred.size() != target.size()) throw ValidationError("smooth_l1_loss: size mismatch");
  if (grad) grad->assign(pred.size(), Residual{});
  if (pred.empty()) return 0.0;
  const double n = static_cast<double>(pred.size());
  double total = 0.0;
  for (std::size_t r = 0; r < pred.size(); ++r) {
    for (std::size_t k = 0; k < 7; ++k) {
      const double d = pred[r][k] - target[r][k];
      total += smooth_l1(d);
      if (grad) (*grad)[r][k] = (std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0)) / n;
    }
  }
  return total / n;
}

RpnLoss rpn_loss(std::span<const double> cls_logits, std::span<const Residual> reg_preds,
                 const RpnTargets& targets, double beta) {
  if (cls_logits.size() != targets.labels.size() || reg_preds.size() != targets.labels.size()) {
    throw ValidationError("rpn_loss: predictions do not match anchor count");
  }
  std::vector<double> probs(cls_logits.size());
  for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = nn::sigmoid(cls_logits[i]);
  RpnLoss out;
  out.cls = focal_loss(probs, targets.label_codes());

  std::vector<Residual> pred;
  std::vector<Residual> target;
  for (std::size_t i = 0; i < targets.labels.size(); ++i) {
    if (targets.labels[i] != AnchorLabel::Positive) continue;
    pred.push_back(reg_preds[i]);
    target.push_back(targets.residuals[i]);
  }
  out.reg = smooth_l1_loss(pred, target);
  out.total = out.cls + beta * out.reg;
  return out;
}

std::vector<Detection> extract_proposals(std::span<const double> scores,
                                         std::span<const Residual> residuals,
                                         const AnchorSet& anchors, std::size_t top_k,
                                         double nms_iou, geom::IouKind kind) {
  if (scores.size() != anchors.size() || residuals.size() != anchors.size()) {
    throw ValidationError("extract_proposals: map shapes do not match the anchors");
  }
  std::vector<Detection> decoded;
  decoded.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    decoded.push_back(geom::make_detection(decode_residual(residuals[i], anchors.boxes[i]),
                                           scores[i], anchors.class_ids[i]));
  }
  const auto keep = geom::nms(decoded, nms_iou, kind, top_k);
  std::vector<Detection> out;
  out.reserve(keep.size());
  for (std::size_t k : keep) out.push_back(decoded[k]);
  return out;
}

double recall(std::span<const Box3D> proposals, std::span<const Box3D> gts, double thresh) {
  if (gts.empty()) return 0.0;
  std::size_t covered = 0;
  for (const Box3D& g : gts) {
    for (const Box3D& p : proposals) {
      if (geom::iou_3d(p, g) >= thresh) {
        ++covered;
        break;
      }
    }
  }
  return static_cast<double>(covered) / static_cast<double>(gts.size());
}

RpnHead RpnHead::random(std::size_t bev_channels, std::size_t anchors_per_cell,
                        std::uint64_t seed) {
  return {nn::init_params({bev_channels, anchors_per_cell * 8}, seed)};
}

RpnOutput run_rpn_head(const RpnHead& head, const sparse::BevMap& bev, const AnchorSet& anchors) {
  const std::size_t per_cell = anchors.per_cell;
  if (head.conv.in_width() != bev.channels() || head.conv.out_width() != per_cell * 8 ||
      anchors.size() != bev.nx() * bev.ny() * per_cell) {
    throw ValidationError("rpn head: BEV map, head and anchors disagree in shape");
  }
  RpnOutput out;
  out.scores.resize(anchors.size());
  out.residuals.resize(anchors.size());
  for (std::size_t iy = 0; iy < bev.ny(); ++iy) {
    for (std::size_t ix = 0; ix < bev.nx(); ++ix) {
      const std::vector<double> y = nn::mlp_forward(head.conv, bev.cell(ix, iy));
      const std::size_t base = (iy * bev.nx() + ix) * per_cell;
      for (std::size_t a = 0; a < per_cell; ++a) {
        out.scores[base + a] = nn::sigmoid(y[a * 8]);
        for (std::size_t k = 0; k < 7; ++k) out.residuals[base + a][k] = y[a * 8 + 1 + k];
      }
    }
  }
  return out;
}

}  // namespace pvl::rpn
