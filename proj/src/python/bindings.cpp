#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>
#include <string>
#include <vector>

#include "pvl/cli.hpp"
#include "pvl/config.hpp"
#include "pvl/error.hpp"
#include "pvl/evalkit.hpp"
#include "pvl/geom.hpp"
#include "pvl/pipeline.hpp"
#include "pvl/roihead.hpp"
#include "pvl/rng.hpp"
#include "pvl/rpn.hpp"
#include "pvl/synth.hpp"
#include "pvl/vsa.hpp"

namespace py = pybind11;
using namespace pvl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

geom::Box3D to_box(const std::vector<double>& v) {
  if (v.size() != 7) throw ValidationError("a box has 7 values (cx, cy, cz, l, w, h, theta)");
  return {v[0], v[1], v[2], v[3], v[4], v[5], v[6]};
}

std::vector<double> from_box(const geom::Box3D& b) { return {b.cx, b.cy, b.cz, b.l, b.w, b.h, b.theta}; }

// Rows of an (n, cols) array.
Array rows_of(const Array& a, py::ssize_t cols, const char* what) {
  if (a.ndim() != 2 || a.shape(1) != cols)
    throw ValidationError(std::string(what) + " must have shape (n, " + std::to_string(cols) + ")");
  return a;
}

std::vector<geom::Box3D> to_boxes(const Array& a) {
  const Array b = rows_of(a, 7, "boxes");
  auto r = b.unchecked<2>();
  std::vector<geom::Box3D> out;
  for (py::ssize_t i = 0; i < r.shape(0); ++i)
    out.emplace_back(r(i, 0), r(i, 1), r(i, 2), r(i, 3), r(i, 4), r(i, 5), r(i, 6));
  return out;
}

Array box_array(const std::vector<geom::Box3D>& boxes) {
  Array out({static_cast<py::ssize_t>(boxes.size()), py::ssize_t{7}});
  auto w = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto v = from_box(boxes[i]);
    for (int k = 0; k < 7; ++k) w(i, k) = v[k];
  }
  return out;
}

std::vector<Vec3> to_points(const Array& a) {
  const Array p = rows_of(a, 3, "points");
  auto r = p.unchecked<2>();
  std::vector<Vec3> out(r.shape(0));
  for (py::ssize_t i = 0; i < r.shape(0); ++i) out[i] = {r(i, 0), r(i, 1), r(i, 2)};
  return out;
}

geom::IouKind iou_kind(const std::string& s) {
  if (s == "bev") return geom::IouKind::Bev;
  if (s == "3d") return geom::IouKind::ThreeD;
  throw ValidationError("iou kind must be 'bev' or '3d', got '" + s + "'");
}

py::dict scene_dict(const synth::SceneSample& s) {
  Array pts({static_cast<py::ssize_t>(s.points.size()), py::ssize_t{4}});
  auto w = pts.mutable_unchecked<2>();
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    w(i, 0) = s.points[i].x;
    w(i, 1) = s.points[i].y;
    w(i, 2) = s.points[i].z;
    w(i, 3) = s.points[i].intensity;
  }
  std::vector<geom::Box3D> boxes;
  std::vector<int> classes;
  for (const auto& g : s.gt_boxes) {
    boxes.push_back(g.box);
    classes.push_back(g.class_id);
  }
  py::dict d;
  d["points"] = pts;
  d["boxes"] = box_array(boxes);
  d["classes"] = classes;
  d["seed"] = s.seed;
  return d;
}

Config config_from(const py::object& path) {
  Config cfg = path.is_none() ? Config{} : load_config(py::str(path).cast<std::string>());
  validate(cfg);
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Point-voxel detection core";

  auto base = py::register_exception<RuntimeError>(m, "RuntimeError", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  auto parse = py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<VersionError>(m, "VersionError", parse.ptr());

  m.def("bev_iou", [](const std::vector<double>& a, const std::vector<double>& b) {
    return geom::bev_iou(to_box(a), to_box(b));
  });
  m.def("iou_3d", [](const std::vector<double>& a, const std::vector<double>& b) {
    return geom::iou_3d(to_box(a), to_box(b));
  });
  m.def(
      "nms",
      [](const Array& boxes, const std::vector<double>& scores, double threshold, const std::string& kind) {
        const auto b = to_boxes(boxes);
        if (b.size() != scores.size()) throw ValidationError("one score per box");
        std::vector<geom::Detection> dets;
        for (std::size_t i = 0; i < b.size(); ++i) dets.push_back(geom::make_detection(b[i], scores[i]));
        return geom::nms(dets, threshold, iou_kind(kind));
      },
      py::arg("boxes"), py::arg("scores"), py::arg("threshold"), py::arg("kind") = "3d");
  m.def(
      "points_in_box",
      [](const Array& points, const std::vector<double>& box) {
        const auto inside = geom::points_in_box(to_points(points), to_box(box));
        return std::vector<bool>(inside.begin(), inside.end());
      },
      py::arg("points"), py::arg("box"));

  m.def("fps", [](const Array& points, std::size_t n) { return vsa::fps(to_points(points), n); },
        py::arg("points"), py::arg("n"));

  m.def("encode_residual", [](const std::vector<double>& gt, const std::vector<double>& anchor) {
    const auto r = rpn::encode_residual(to_box(gt), to_box(anchor));
    return std::vector<double>(r.begin(), r.end());
  });
  m.def("decode_residual", [](const std::vector<double>& delta, const std::vector<double>& anchor) {
    if (delta.size() != 7) throw ValidationError("a residual has 7 values");
    rpn::Residual r{};
    std::copy(delta.begin(), delta.end(), r.begin());
    return from_box(rpn::decode_residual(r, to_box(anchor)));
  });

  m.def("confidence_target", &roi::confidence_target, py::arg("iou"));

  m.def(
      "average_precision",
      [](const std::vector<bool>& tp, const std::vector<double>& scores, std::size_t gt_count,
         const std::string& mode) {
        if (tp.size() != scores.size()) throw ValidationError("one score per detection");
        if (mode != "R11" && mode != "R40") throw ValidationError("mode must be 'R11' or 'R40'");
        const std::vector<char> flags(tp.begin(), tp.end());
        return eval::average_precision(flags, scores, gt_count,
                                       mode == "R11" ? eval::ApMode::R11 : eval::ApMode::R40);
      },
      py::arg("tp"), py::arg("scores"), py::arg("gt_count"), py::arg("mode") = "R40");

  m.def(
      "gen_scene",
      [](std::uint64_t index, const py::object& config) {
        const Config cfg = config_from(config);
        return scene_dict(synth::gen_scene(cfg.scene(), mix_seed(cfg.seed, index)));
      },
      py::arg("index") = 0, py::arg("config") = py::none(),
      "Scene `index` of the synthetic set a config's seed defines (same as `pvl synth`).");

  m.def(
      "detect",
      [](std::uint64_t index, const py::object& config) {
        const Config cfg = config_from(config);
        const auto scene = synth::gen_scene(cfg.scene(), mix_seed(cfg.seed, index));
        const auto model = pipeline::Model::random(cfg, mix_seed(cfg.seed, 0x30de1));
        const auto r = pipeline::run_scene(scene, cfg, model, mix_seed(cfg.seed, index));
        std::vector<geom::Box3D> boxes;
        std::vector<double> scores;
        for (const auto& d : r.detections) {
          boxes.push_back(d.box);
          scores.push_back(d.score);
        }
        py::dict out;
        out["boxes"] = box_array(boxes);
        out["scores"] = scores;
        out["proposals"] = r.proposals.size();
        out["total_ms"] = r.times.total_ms;
        return out;
      },
      py::arg("index") = 0, py::arg("config") = py::none(),
      "Runs the untrained pipeline on synthetic scene `index`.");

  m.def(
      "cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "pvl");
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool in process; returns (exit code, stdout, stderr).");
}
