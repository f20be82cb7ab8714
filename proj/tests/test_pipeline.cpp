#include <doctest.h>

#include "pvl/error.hpp"
#include "pvl/pipeline.hpp"
#include "tiny.hpp"

using namespace pvl;
using namespace pvl::pipeline;

namespace {

std::vector<SceneSample> scenes(const Config& cfg, std::size_t n) {
  std::vector<SceneSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth::gen_scene(cfg.scene(), 100 + i));
  return out;
}

}  // namespace

TEST_CASE("encode and run_scene") {
  const Config cfg = tiny_config();
  const Model m = Model::random(cfg, 1);
  const auto s = scenes(cfg, 1)[0];
  const Encoded e = encode(s, cfg, m, 3);
  CHECK_FALSE(e.empty);
  CHECK(e.keypoints.size() == cfg.keypoints);
  CHECK(e.features.concat.cols() == cfg.keypoint_width());
  CHECK(e.bev.channels() == cfg.bev_channels());

  const auto r = run_scene(s, cfg, m, 3);
  CHECK(r.proposals.size() <= cfg.proposal_top_k);
  CHECK(r.detections.size() <= r.proposals.size());
  for (std::size_t i = 0; i < r.detections.size(); ++i)
    for (std::size_t j = i + 1; j < r.detections.size(); ++j)
      CHECK(geom::iou_3d(r.detections[i].box, r.detections[j].box) <= cfg.final_nms);
  const auto again = run_scene(s, cfg, Model::random(cfg, 1), 3);
  REQUIRE(again.detections.size() == r.detections.size());
  for (std::size_t i = 0; i < r.detections.size(); ++i) {
    CHECK(again.detections[i].box == r.detections[i].box);
    CHECK(again.detections[i].score == r.detections[i].score);
  }

  SceneSample empty;
  empty.range = s.range;
  const auto none = run_scene(empty, cfg, m, 3);
  CHECK(none.proposals.empty());
  CHECK(none.detections.empty());
}

TEST_CASE("trained heads round trip") {
  const Config cfg = tiny_config();
  Model a = Model::random(cfg, 1);
  const Model b = Model::random(cfg, 2);
  load_heads(a, trained_heads(b));
  CHECK(nn::flatten(a.pkw) == nn::flatten(b.pkw));
  CHECK(nn::flatten(a.refine.residual) == nn::flatten(b.refine.residual));
  auto wrong = trained_heads(b);
  wrong[0].params = nn::init_params({3, 1}, 0, nn::OutputActivation::Sigmoid);
  CHECK_THROWS_AS(load_heads(a, wrong), ValidationError);
  std::vector<nn::NamedMlp> unknown{{"backbone", b.pkw}};
  CHECK_THROWS_AS(load_heads(a, unknown), ValidationError);
}

TEST_CASE("pkw training") {
  const Config cfg = tiny_config();
  Model m = Model::random(cfg, 1);
  const auto sc = scenes(cfg, 1);
  const PkwSet set = pkw_dataset(sc, cfg, m, 5);
  CHECK(set.features.rows() == cfg.keypoints);
  CHECK(set.labels.size() == cfg.keypoints);
  nn::MlpParams frozen = m.pkw;
  const auto flat = train_pkw(frozen, set, 5, 0.0);
  CHECK(flat.loss.size() == 6);
  CHECK(flat.iteration.back() == 5);
  for (double l : flat.loss) CHECK(l == flat.loss.front());
  const auto curve = train_pkw(m.pkw, set, 60, cfg.pkw_lr);
  CHECK(curve.loss.back() < curve.loss.front());
  CHECK(curve.metric.back() == pkw_accuracy(m.pkw, set));
}

TEST_CASE("refine training") {
  const Config cfg = tiny_config();
  Model m = Model::random(cfg, 1);
  const auto sc = scenes(cfg, 2);
  const auto props = jitter_proposals(sc[0].gt_boxes, cfg, 4);
  CHECK(props.size() == 2 * cfg.refine_proposals * sc[0].gt_boxes.size());
  const RefineSet set = refine_dataset(sc, cfg, m, 5);
  CHECK(set.features.rows() == set.rois.size());
  CHECK(set.features.cols() == cfg.roi_pooled_width);
  CHECK(set.targets.num_positive() > 0);
  roi::fit_input_standardization(m.refine, set.features);
  // the untrained head leaves RoIs unchanged
  const IouPair start = matched_iou(m.refine, set);
  CHECK(start.refined == doctest::Approx(start.raw));
  roi::RefineHead frozen = m.refine;
  const auto flat = train_refine(frozen, set, 4, 0.0);
  for (double l : flat.loss) CHECK(l == flat.loss.front());
  CHECK(flat.loss.size() == 3);
  const auto curve = train_refine(m.refine, set, 40, cfg.refine_lr);
  CHECK(curve.loss.size() == 21);
  CHECK(curve.iteration.back() == 40);
  CHECK(curve.loss.back() < curve.loss.front());
}

TEST_CASE("bench_pooling") {
  const Config cfg = tiny_config();
  const Model m = Model::random(cfg, 1);
  const auto sc = scenes(cfg, 2);
  const std::vector<std::string> both{"roi_grid", "average_pool"};
  const auto rows = bench_pooling(sc, cfg, m, 3, both);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].strategy == "roi_grid");
  CHECK(rows[0].output_width == cfg.roi_pooled_width);
  CHECK(rows[1].output_width == cfg.keypoint_width());
  CHECK(rows[0].rois == rows[1].rois);
  const auto again = bench_pooling(sc, cfg, m, 3, both);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(again[i].nonzero_fraction == rows[i].nonzero_fraction);
    CHECK(again[i].mean_norm == rows[i].mean_norm);
    CHECK(again[i].peak_bytes == rows[i].peak_bytes);
  }
  const std::vector<std::string> bad{"max_pool"};
  CHECK_THROWS_AS(bench_pooling(sc, cfg, m, 3, bad), ValidationError);
  CHECK(format_bench(rows).find("strategy") == 0);
}
