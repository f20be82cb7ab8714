#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pvl/config.hpp"
#include "pvl/geom.hpp"
#include "pvl/matrix.hpp"
#include "pvl/nn.hpp"
#include "pvl/roihead.hpp"
#include "pvl/rpn.hpp"
#include "pvl/sparsegrid.hpp"
#include "pvl/synth.hpp"
#include "pvl/vsa.hpp"

namespace pvl::pipeline {

using geom::Box3D;
using geom::Detection;
using geom::LabeledBox;
using synth::SceneSample;

// All network parameters. The backbone, RPN head, VSA and RoI pooling MLPs
// stay at their seeded initialization; only the PKW scorer and the refine
// head are trained.
struct Model {
  sparse::BackboneParams backbone;
  rpn::RpnHead rpn;
  vsa::VsaMlps vsa;
  nn::MlpParams pkw;  // [C_p, h, h, 1], sigmoid
  roi::RoiPoolMlps roi;
  roi::RefineHead refine;

  static Model random(const Config& cfg, std::uint64_t seed);
};

// Trainable heads as named networks ("pkw", "refine.shared",
// "refine.confidence", "refine.residual").
std::vector<nn::NamedMlp> trained_heads(const Model& model);
// Replaces the heads named in `nets`; shapes must match the model.
void load_heads(Model& model, std::span<const nn::NamedMlp> nets);

struct StageTimes {
  double voxelize_ms = 0.0;
  double backbone_ms = 0.0;
  double rpn_ms = 0.0;
  double keypoint_ms = 0.0;
  double roi_ms = 0.0;
  double refine_ms = 0.0;
  double total_ms = 0.0;
};

// Scene points inside the configured range, as positions.
std::vector<Vec3> in_range_positions(const SceneSample& scene, const sparse::PointRange& range);

struct Encoded {
  std::array<sparse::SparseTensor, 4> levels;
  sparse::BevMap bev;
  std::vector<Vec3> keypoints;
  vsa::KeypointFeatures features;
  bool empty = true;  // no in-range points
};

// Voxelization, backbone, BEV collapse, FPS keypoints and f^(p).
Encoded encode(const SceneSample& scene, const Config& cfg, const Model& model,
               std::uint64_t seed, StageTimes* times = nullptr);

// RPN head over the BEV map followed by top-k proposal NMS. Size residuals
// of the (untrained) head are clamped to +-1 before decoding.
std::vector<Detection> propose(const Encoded& enc, const Config& cfg, const Model& model);

struct SceneResult {
  std::vector<Detection> proposals;
  std::vector<Detection> detections;
  StageTimes times;
};

SceneResult run_scene(const SceneSample& scene, const Config& cfg, const Model& model,
                      std::uint64_t seed);

// --- head-only training -----------------------------------------------------

struct PkwSet {
  Matrix features;
  std::vector<int> labels;
};

PkwSet pkw_dataset(std::span<const SceneSample> scenes, const Config& cfg, const Model& model,
                   std::uint64_t seed);

double pkw_accuracy(const nn::MlpParams& scorer, const PkwSet& set);

struct TrainCurve {
  std::vector<std::size_t> iteration;  // step count at which each loss was taken
  std::vector<double> loss;
  // pkw: accuracy per entry; refine: one value, the final mean matched IoU
  std::vector<double> metric;
};

// Full-batch gradient descent on the focal segmentation loss.
TrainCurve train_pkw(nn::MlpParams& scorer, const PkwSet& set, std::size_t iters, double lr,
                     const rpn::FocalParams& focal = {});

// Proposals around each gt (center, size and yaw jitter) plus the same number
// of anchor-sized boxes placed anywhere in the range. Scores are uniform.
std::vector<Detection> jitter_proposals(std::span<const LabeledBox> gts, const Config& cfg,
                                        std::uint64_t seed);

struct RefineSet {
  Matrix features;               // pooled RoI features, one row per sampled RoI
  std::vector<Box3D> rois;
  roi::RefineTargets targets;
  std::vector<Box3D> matched;    // best same-class gt (the RoI itself when none)
  std::vector<std::size_t> scene_of;
};

RefineSet refine_dataset(std::span<const SceneSample> scenes, const Config& cfg, const Model& model,
                         std::uint64_t seed);

struct IouPair {
  double raw = 0.0;      // mean 3D IoU of positive RoIs with their gt
  double refined = 0.0;  // same after decoding the predicted residuals
  std::size_t count = 0;
};

IouPair matched_iou(const roi::RefineHead& head, const RefineSet& set);

// Minibatch SGD, one scene's sampled RoIs per step in round-robin order. The
// curve holds the loss before training and the mean loss of each completed
// pass over the scenes.
TrainCurve train_refine(roi::RefineHead& head, const RefineSet& set, std::size_t iters, double lr);

// --- pooling benchmark --------------------------------------------------------

struct BenchRow {
  std::string strategy;
  std::size_t rois = 0;
  std::size_t output_width = 0;
  double seconds = 0.0;
  std::size_t peak_bytes = 0;      // analytic estimate of the largest live buffers
  double nonzero_fraction = 0.0;   // nonzero grid cells over all RoIs
  double mean_norm = 0.0;          // mean L2 norm of the per-RoI output
};

// Runs RoI-grid pooling and the in-box averaging baseline over the same
// RoIs (one lightly jittered box per gt) and keypoint features.
std::vector<BenchRow> bench_pooling(std::span<const SceneSample> scenes, const Config& cfg,
                                    const Model& model, std::uint64_t seed,
                                    std::span<const std::string> strategies);

std::string format_bench(std::span<const BenchRow> rows);

}  // namespace pvl::pipeline
