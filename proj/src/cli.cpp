#include "pvl/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include "pvl/checks.hpp"
#include "pvl/config.hpp"
#include "pvl/error.hpp"
#include "pvl/evalkit.hpp"
#include "pvl/pipeline.hpp"
#include "pvl/rng.hpp"
#include "pvl/synth.hpp"

namespace pvl::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kSceneExt = ".pvscn";
constexpr const char* kDetExt = ".det";

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out = ".";
  std::vector<std::string> scenes;
};

Config load(const Common& c) {
  Config cfg = c.config.empty() ? Config{} : load_config(c.config);
  cfg = apply_env_overrides(cfg, pvl_environment());
  if (c.seed_set) cfg.seed = c.seed;
  return cfg;
}

// Directories expand to their *.pvscn files in name order.
std::vector<fs::path> scene_paths(const std::vector<std::string>& args) {
  std::vector<fs::path> out;
  for (const std::string& a : args) {
    const fs::path p(a);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.path().extension() == kSceneExt) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else if (fs::exists(p)) {
      out.push_back(p);
    } else {
      throw ValidationError("no such scene file or directory: " + a);
    }
  }
  if (out.empty()) throw ValidationError("no scenes given (use --scenes)");
  return out;
}

std::vector<synth::SceneSample> load_scenes(const std::vector<fs::path>& paths) {
  std::vector<synth::SceneSample> scenes;
  for (const fs::path& p : paths) scenes.push_back(synth::load_scene(p));
  return scenes;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RuntimeError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << text;
  if (!os) throw RuntimeError("failed writing " + path.string());
}

pipeline::Model make_model(const Config& cfg, const std::string& params) {
  pipeline::Model model = pipeline::Model::random(cfg, mix_seed(cfg.seed, 0x30de1));
  if (!params.empty()) pipeline::load_heads(model, nn::load_params(params));
  return model;
}

int cmd_synth(const Common& c, std::size_t count, std::ostream& out) {
  const Config cfg = load(c);
  ensure_dir(c.out);
  for (std::size_t i = 0; i < count; ++i) {
    const synth::SceneSample s = synth::gen_scene(cfg.scene(), mix_seed(cfg.seed, i));
    char name[64];
    std::snprintf(name, sizeof name, "scene_%04zu%s", i, kSceneExt);
    synth::save_scene(fs::path(c.out) / name, s);
    out << name << ": " << s.points.size() << " points, " << s.gt_boxes.size() << " boxes\n";
  }
  return 0;
}

int cmd_run(const Common& c, const std::string& params, std::ostream& out) {
  const Config cfg = load(c);
  const auto paths = scene_paths(c.scenes);
  const pipeline::Model model = make_model(cfg, params);
  ensure_dir(c.out);
  std::string timing = "scene,points,proposals,detections,voxelize_ms,backbone_ms,rpn_ms,keypoint_ms,roi_ms,refine_ms,total_ms\n";
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const synth::SceneSample scene = synth::load_scene(paths[i]);
    const pipeline::SceneResult r = pipeline::run_scene(scene, cfg, model, mix_seed(cfg.seed, i));
    const std::string stem = paths[i].stem().string();
    eval::write_detections(fs::path(c.out) / (stem + kDetExt), r.detections);
    const auto& t = r.times;
    char line[512];
    std::snprintf(line, sizeof line, "%s,%zu,%zu,%zu,%.3f,%.3f,%.3f,%.3f,%.3f,%.3f,%.3f\n", stem.c_str(),
                  scene.points.size(), r.proposals.size(), r.detections.size(), t.voxelize_ms,
                  t.backbone_ms, t.rpn_ms, t.keypoint_ms, t.roi_ms, t.refine_ms, t.total_ms);
    timing += line;
    out << stem << ": " << r.proposals.size() << " proposals, " << r.detections.size()
        << " detections, " << t.total_ms << " ms\n";
  }
  write_text(fs::path(c.out) / "timing.csv", timing);
  return 0;
}

int cmd_train(const Common& c, const std::string& which, std::optional<std::size_t> iters_opt,
              std::optional<double> lr_opt, const std::string& params, std::ostream& out) {
  const Config cfg = load(c);
  const std::size_t iters = iters_opt.value_or(cfg.train_iters);
  const auto scenes = load_scenes(scene_paths(c.scenes));
  pipeline::Model model = make_model(cfg, params);
  ensure_dir(c.out);

  std::string csv = "iter,loss,metric\n";
  char line[128];
  if (which == "pkw") {
    const double lr = lr_opt.value_or(cfg.pkw_lr);
    const pipeline::PkwSet set = pipeline::pkw_dataset(scenes, cfg, model, cfg.seed);
    const pipeline::TrainCurve curve = pipeline::train_pkw(model.pkw, set, iters, lr, cfg.focal());
    for (std::size_t i = 0; i < curve.loss.size(); ++i) {
      std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", curve.iteration[i], curve.loss[i], curve.metric[i]);
      csv += line;
    }
    out << "pkw: " << set.labels.size() << " keypoints, loss " << curve.loss.front() << " -> "
        << curve.loss.back() << ", accuracy " << curve.metric.back() << "\n";
  } else {
    const double lr = lr_opt.value_or(cfg.refine_lr);
    const pipeline::RefineSet set = pipeline::refine_dataset(scenes, cfg, model, cfg.seed);
    if (set.rois.empty()) throw ValidationError("train-heads: scenes yield no RoIs");
    roi::fit_input_standardization(model.refine, set.features);
    const pipeline::IouPair before = pipeline::matched_iou(model.refine, set);
    const pipeline::TrainCurve curve = pipeline::train_refine(model.refine, set, iters, lr);
    const pipeline::IouPair after = pipeline::matched_iou(model.refine, set);
    for (std::size_t i = 0; i < curve.loss.size(); ++i) {
      std::snprintf(line, sizeof line, "%zu,%.17g,\n", curve.iteration[i], curve.loss[i]);
      csv += line;
    }
    out << "refine: " << set.rois.size() << " RoIs (" << after.count
        << " positive), mean matched IoU raw " << before.raw << ", refined " << after.refined << "\n";
  }
  nn::save_params(fs::path(c.out) / "params.pvlp", pipeline::trained_heads(model));
  write_text(fs::path(c.out) / "loss.csv", csv);
  return 0;
}

int cmd_eval(const Common& c, const std::string& detections, const std::string& mode,
             std::vector<double> thresholds, std::ostream& out) {
  const Config cfg = load(c);
  if (thresholds.empty()) thresholds.push_back(cfg.eval_iou);
  for (double t : thresholds) {
    if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("--iou thresholds must lie in [0,1]");
  }
  const auto paths = scene_paths(c.scenes);

  std::vector<eval::Accumulator> accs;
  for (double t : thresholds) {
    for (eval::Difficulty lvl : {eval::Difficulty::L1, eval::Difficulty::L2}) {
      accs.emplace_back(0, t, lvl, cfg.nms_kind);
    }
  }
  for (const fs::path& p : paths) {
    const synth::SceneSample scene = synth::load_scene(p);
    const fs::path det_path = fs::path(detections) / (p.stem().string() + kDetExt);
    if (!fs::exists(det_path)) throw ValidationError("missing detections for scene: " + det_path.string());
    const auto dets = eval::read_detections(det_path);
    const auto levels = eval::difficulty_buckets(scene.gt_boxes, scene.positions());
    for (auto& a : accs) a.add_scene(dets, scene.gt_boxes, levels);
  }
  std::vector<eval::ReportRow> rows;
  for (const auto& a : accs) rows.push_back(eval::make_row(a));

  const std::string table = eval::format_table(rows, mode != "r40", mode != "r11");
  out << table;
  ensure_dir(c.out);
  write_text(fs::path(c.out) / "report.txt", table);
  write_text(fs::path(c.out) / "report.csv", eval::format_csv(rows));
  return 0;
}

int cmd_bench(const Common& c, const std::vector<std::string>& strategies, std::ostream& out) {
  const Config cfg = load(c);
  const auto scenes = load_scenes(scene_paths(c.scenes));
  const pipeline::Model model = make_model(cfg, "");
  const auto rows = pipeline::bench_pooling(scenes, cfg, model, cfg.seed, strategies);
  const std::string csv = pipeline::format_bench(rows);
  out << csv;
  ensure_dir(c.out);
  write_text(fs::path(c.out) / "bench.csv", csv);
  return 0;
}

int cmd_check(std::uint64_t seed, const std::string& fixture, std::ostream& out) {
  checks::CheckOptions opts;
  opts.seed = seed;
  if (!fixture.empty()) checks::inject(opts, fixture);
  std::size_t failed = 0;
  for (const checks::CheckResult& r : checks::run_checks(opts)) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    failed += r.passed ? 0 : 1;
  }
  out << (failed ? std::to_string(failed) + " invariant(s) failed\n" : "all invariants hold\n");
  return failed ? 1 : 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Point-voxel 3D detection reference pipeline", "pvl"};
  app.require_subcommand(1);
  Common c;

  auto common = [&c](CLI::App* sub, bool scenes) {
    sub->add_option("--config", c.config, "flat key=value config file")->check(CLI::ExistingFile);
    sub->add_option_function<std::uint64_t>("--seed", [&c](const std::uint64_t& s) {
      c.seed = s;
      c.seed_set = true;
    }, "overrides the config seed");
    sub->add_option("--out", c.out, "output directory");
    if (scenes) sub->add_option("--scenes", c.scenes, "scene files or directories")->required();
  };

  std::size_t count = 1;
  auto* synth_cmd = app.add_subcommand("synth", "generate synthetic scenes");
  common(synth_cmd, false);
  synth_cmd->add_option("--count", count, "number of scenes")->check(CLI::NonNegativeNumber);

  std::string params;
  auto* run_cmd = app.add_subcommand("run", "full forward pipeline per scene");
  common(run_cmd, true);
  run_cmd->add_option("--params", params, "trained head parameters")->check(CLI::ExistingFile);

  std::string which;
  std::optional<std::size_t> iters;
  std::optional<double> lr;
  auto* train_cmd = app.add_subcommand("train-heads", "head-only SGD with the backbone frozen");
  common(train_cmd, true);
  train_cmd->add_option("--which", which, "pkw or refine")->required()->check(CLI::IsMember({"pkw", "refine"}));
  train_cmd->add_option("--iters", iters, "iterations (default: train_iters)");
  train_cmd->add_option("--lr", lr, "learning rate (default: pkw_lr / refine_lr)")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--params", params, "starting head parameters")->check(CLI::ExistingFile);

  std::string detections;
  std::string mode = "both";
  std::vector<double> thresholds;
  auto* eval_cmd = app.add_subcommand("eval", "average precision report");
  common(eval_cmd, true);
  eval_cmd->add_option("--detections", detections, "directory of .det files")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--mode", mode, "r11, r40 or both")->check(CLI::IsMember({"r11", "r40", "both"}));
  eval_cmd->add_option("--iou", thresholds, "IoU thresholds (default: eval_iou)");

  std::vector<std::string> strategies{"roi_grid", "average_pool"};
  auto* bench_cmd = app.add_subcommand("bench", "RoI-grid pooling against in-box averaging");
  common(bench_cmd, true);
  bench_cmd->add_option("--strategies", strategies, "roi_grid and/or average_pool")->delimiter(',');

  std::string fixture;
  auto* check_cmd = app.add_subcommand("check", "run the invariant suite");
  check_cmd->add_option_function<std::uint64_t>("--seed", [&c](const std::uint64_t& s) { c.seed = s; }, "seed");
  check_cmd->add_option("--inject", fixture, "fault fixture")->check(CLI::IsMember(checks::fixtures()));

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (*synth_cmd) return cmd_synth(c, count, out);
    if (*run_cmd) return cmd_run(c, params, out);
    if (*train_cmd) return cmd_train(c, which, iters, lr, params, out);
    if (*eval_cmd) return cmd_eval(c, detections, mode, thresholds, out);
    if (*bench_cmd) return cmd_bench(c, strategies, out);
    if (*check_cmd) return cmd_check(c.seed, fixture, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace pvl::cli
