#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pvl/geom.hpp"
#include "pvl/nn.hpp"
#include "pvl/sparsegrid.hpp"

namespace pvl::rpn {

using geom::Box3D;
using geom::Detection;
using geom::LabeledBox;

struct AnchorClass {
  std::string name;
  int class_id = 0;
  double l = 3.9, w = 1.6, h = 1.56;
  double z_center = -1.0;
};

// The BEV lattice anchors sit on; matches the 8x backbone level.
struct BevLattice {
  double origin_x = 0.0, origin_y = 0.0;
  double cell_x = 0.4, cell_y = 0.4;
  std::size_t nx = 0, ny = 0;

  static BevLattice of(const sparse::BevMap& map);
};

// Anchors are stored cell-major: cell (ix, iy) owns the contiguous block
// [(iy * nx + ix) * per_cell, ... + per_cell), ordered by class then yaw
// {0, pi/2}.
struct AnchorSet {
  std::vector<Box3D> boxes;
  std::vector<int> class_ids;
  std::size_t per_cell = 0;
  BevLattice lattice;

  std::size_t size() const { return boxes.size(); }
};

AnchorSet generate_anchors(std::span<const AnchorClass> classes, const BevLattice& lattice);

// Residual order: x, y, z, l, w, h, theta.
using Residual = std::array<double, 7>;

Residual encode_residual(const Box3D& gt, const Box3D& anchor);
Box3D decode_residual(const Residual& delta, const Box3D& anchor);

enum class AnchorLabel : std::int8_t { Ignore = -1, Negative = 0, Positive = 1 };

struct MatchThresholds {
  double positive = 0.6;
  double negative = 0.45;
};

struct RpnTargets {
  std::vector<AnchorLabel> labels;
  std::vector<int> matched_gt;     // -1 unless positive
  std::vector<Residual> residuals; // zero unless positive

  std::size_t num_positive() const;
  // 1 / 0 / -1 per anchor, the encoding the loss functions take.
  std::vector<int> label_codes() const;
};

// BEV-IoU matching against ground truth of the same class. Positive when
// IoU >= positive threshold or the anchor is a ground truth's best match,
// negative when the best IoU is below the negative threshold, ignored
// otherwise.
RpnTargets assign_targets(const AnchorSet& anchors, std::span<const LabeledBox> gts,
                          const MatchThresholds& thresholds = {});

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

inline constexpr double kProbClamp = 1e-7;

// Focal loss over probabilities. targets: 1 positive, 0 negative, -1 ignored.
// Sum over non-ignored entries divided by max(1, #positives). When `grad` is
// non-null it receives dL/dp (zero for ignored or clamped entries).
double focal_loss(std::span<const double> probs, std::span<const int> targets,
                  std::vector<double>* grad = nullptr, const FocalParams& params = {});

double smooth_l1(double diff);

// Smooth-L1 summed over the 7 residual coordinates, averaged over rows.
double smooth_l1_loss(std::span<const Residual> pred, std::span<const Residual> target,
                      std::vector<Residual>* grad = nullptr);

struct RpnLoss {
  double cls = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

// cls_logits: one logit per anchor, mapped to probabilities with a sigmoid.
RpnLoss rpn_loss(std::span<const double> cls_logits, std::span<const Residual> reg_preds,
                 const RpnTargets& targets, double beta = 2.0);

// Decodes every anchor, ranks by score, applies greedy NMS and keeps at most
// top_k. Scores are probabilities.
std::vector<Detection> extract_proposals(std::span<const double> scores,
                                         std::span<const Residual> residuals,
                                         const AnchorSet& anchors, std::size_t top_k = 100,
                                         double nms_iou = 0.7,
                                         geom::IouKind kind = geom::IouKind::ThreeD);

// Fraction of ground-truth boxes covered by some proposal at 3D IoU >= thresh.
double recall(std::span<const Box3D> proposals, std::span<const Box3D> gts, double thresh = 0.7);

// 1x1 convolution over the BEV map: one linear layer producing, per anchor of
// the cell, a classification logit followed by 7 residuals.
struct RpnHead {
  nn::MlpParams conv;

  static RpnHead random(std::size_t bev_channels, std::size_t anchors_per_cell, std::uint64_t seed);
};

struct RpnOutput {
  std::vector<double> scores;  // sigmoid probabilities
  std::vector<Residual> residuals;
};

RpnOutput run_rpn_head(const RpnHead& head, const sparse::BevMap& bev, const AnchorSet& anchors);

}  // namespace pvl::rpn
