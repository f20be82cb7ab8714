#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pvl/geom.hpp"
#include "pvl/matrix.hpp"
#include "pvl/nn.hpp"
#include "pvl/rpn.hpp"
#include "pvl/vsa.hpp"

namespace pvl::roi {

using geom::Box3D;
using geom::Detection;
using geom::LabeledBox;
using rpn::Residual;

struct RoiGridConfig {
  vsa::RadiusPair radii{0.8, 1.6};
  std::size_t cap = 32;
  std::size_t branch_width = 32;
  std::size_t pooled_width = 256;
  int resolution = 6;

  std::size_t grid_count() const {
    return static_cast<std::size_t>(resolution) * resolution * resolution;
  }
  std::size_t grid_width() const { return 2 * branch_width; }
};

// One G per grid radius plus the two-layer MLP applied to the flattened grid.
struct RoiPoolMlps {
  std::array<nn::MlpParams, 2> grid;
  nn::MlpParams pooled;

  static RoiPoolMlps random(const RoiGridConfig& cfg, std::size_t keypoint_width,
                            std::uint64_t seed);
};

struct RoiGrid {
  Box3D roi;
  std::vector<Vec3> grid_points;
  Matrix grid_features;  // grid_count x grid_width, inner radius block first
  std::vector<double> pooled;
};

// Aggregates (weighted) keypoint features onto the RoI grid points with the
// two radii, then flattens the grid and maps it to the pooled RoI feature.
// Offsets p_j - g_i are in world axes. Results for one RoI depend only on
// (roi, keypoints, seed), not on its position in a batch.
RoiGrid roi_grid_pool(const Box3D& roi, std::span<const Vec3> keypoints,
                      const Matrix& keypoint_features, const RoiGridConfig& cfg,
                      const RoiPoolMlps& mlps, std::uint64_t seed);

std::vector<RoiGrid> roi_grid_pool(std::span<const Box3D> rois, std::span<const Vec3> keypoints,
                                   const Matrix& keypoint_features, const RoiGridConfig& cfg,
                                   const RoiPoolMlps& mlps, std::uint64_t seed);

// Baseline: mean of the keypoint features inside the proposal (width equals
// the keypoint feature width), zeros when none fall inside.
std::vector<double> average_pool(const Box3D& roi, std::span<const Vec3> keypoints,
                                 const Matrix& keypoint_features);

// Per-cell view of the averaging baseline: each of the resolution^3 cells
// holds the mean of the keypoints inside that cell.
Matrix average_pool_cells(const Box3D& roi, std::span<const Vec3> keypoints,
                          const Matrix& keypoint_features, int resolution);

// Fraction of rows with at least one nonzero entry.
double nonzero_row_fraction(const Matrix& m);

// min(1, max(0, 2 * iou - 0.5))
double confidence_target(double iou);

// Mean binary cross-entropy between predicted confidence and soft targets.
// Predictions are clamped to [1e-7, 1 - 1e-7]; `grad` receives dL/dpred.
double iou_bce_loss(std::span<const double> pred, std::span<const double> target,
                    std::vector<double>* grad = nullptr);

struct RefineTargets {
  std::vector<double> confidence;  // y_k
  std::vector<double> iou;
  std::vector<char> positive;
  std::vector<Residual> residuals;  // zero for negatives
  std::vector<int> matched_gt;      // best same-class gt, -1 when none

  std::size_t size() const { return confidence.size(); }
  std::size_t num_positive() const;
};

struct SamplingConfig {
  std::size_t count = 128;
  double positive_fraction = 0.5;
  double positive_iou = 0.55;
};

struct SampledRois {
  std::vector<Box3D> rois;
  std::vector<std::size_t> source_index;
  RefineTargets targets;
};

// Seeded 1:1 sampling of positives (3D IoU >= positive_iou with a same-class
// gt) and negatives. A short side is filled from the other; with fewer
// proposals than `count` every proposal is used once. Positives come first,
// each side in ascending proposal index.
SampledRois sample_proposals(std::span<const Detection> proposals, std::span<const LabeledBox> gts,
                             std::uint64_t seed, const SamplingConfig& cfg = {});

struct RefineHead {
  // Frozen single affine layer applied to the pooled feature before `shared`
  // (per-channel standardization); no layers means identity.
  nn::MlpParams input;
  nn::MlpParams shared;      // 2 layers on the pooled feature
  nn::MlpParams confidence;  // sigmoid output, width 1
  nn::MlpParams residual;    // identity output, width 7

  // The residual branch starts with a zero output layer, so an untrained head
  // returns its RoI unchanged.
  static RefineHead random(std::size_t pooled_width, std::uint64_t seed);
  static RefineHead zero_branches(std::size_t pooled_width, std::uint64_t seed);
};

struct RefineOutput {
  double confidence = 0.5;
  Residual residual{};
  Box3D refined;
};

RefineOutput refine(std::span<const double> roi_feature, const Box3D& roi, const RefineHead& head);

struct RcnnLoss {
  double iou = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

// L_iou (mean over sampled RoIs) plus smooth-L1 averaged over positives.
RcnnLoss rcnn_loss(std::span<const double> confidences, std::span<const Residual> residual_preds,
                   const RefineTargets& targets, std::vector<double>* conf_grad = nullptr,
                   std::vector<Residual>* residual_grad = nullptr);

struct RefineGrads {
  nn::MlpGrads shared;
  nn::MlpGrads confidence;
  nn::MlpGrads residual;
};

// Forward over a batch of pooled RoI features (one row per sampled RoI), loss,
// and gradients for every head parameter when `grads` is non-null.
RcnnLoss refine_loss(const RefineHead& head, const Matrix& roi_features,
                     const RefineTargets& targets, RefineGrads* grads = nullptr);

void sgd_step(RefineHead& head, const RefineGrads& grads, double lr);

// Sets head.input to map every column of `features` to zero mean and unit
// variance (columns with no spread are only centered).
void fit_input_standardization(RefineHead& head, const Matrix& features);

// Greedy NMS on refined boxes scored by predicted confidence.
std::vector<Detection> final_select(std::span<const Detection> refined, double nms_iou = 0.01,
                                    geom::IouKind kind = geom::IouKind::ThreeD);

}  // namespace pvl::roi
