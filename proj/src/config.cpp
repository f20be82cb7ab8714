#include "pvl/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>

#include "pvl/error.hpp"

extern char** environ;

namespace pvl {

namespace {

std::vector<std::string> tokens(const std::string& key, const std::string& value, std::size_t n) {
  std::istringstream is(value);
  std::vector<std::string> out{std::istream_iterator<std::string>(is), {}};
  if (out.size() != n) {
    throw ValidationError("config key '" + key + "': expected " + std::to_string(n) + " value" +
                          (n == 1 ? "" : "s") + ", got " + std::to_string(out.size()));
  }
  return out;
}

double to_real(const std::string& key, const std::string& tok) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(tok, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != tok.size() || !std::isfinite(v)) {
    throw ValidationError("config key '" + key + "': '" + tok + "' is not a finite number");
  }
  return v;
}

std::uint64_t to_count(const std::string& key, const std::string& tok) {
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw ValidationError("config key '" + key + "': '" + tok + "' is not a non-negative integer");
  }
  try {
    return std::stoull(tok);
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': '" + tok + "' is out of range");
  }
}

struct Field {
  std::function<void(Config&, const std::string& key, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <std::size_t N>
Field reals(std::array<double, N> Config::*m) {
  return {[m](Config& c, const std::string& k, const std::string& v) {
            const auto t = tokens(k, v, N);
            for (std::size_t i = 0; i < N; ++i) (c.*m)[i] = to_real(k, t[i]);
          },
          [m](const Config& c) {
            std::string s;
            for (std::size_t i = 0; i < N; ++i) s += (i ? " " : "") + fmt((c.*m)[i]);
            return s;
          }};
}

template <std::size_t N>
Field counts(std::array<std::size_t, N> Config::*m) {
  return {[m](Config& c, const std::string& k, const std::string& v) {
            const auto t = tokens(k, v, N);
            for (std::size_t i = 0; i < N; ++i) (c.*m)[i] = to_count(k, t[i]);
          },
          [m](const Config& c) {
            std::string s;
            for (std::size_t i = 0; i < N; ++i) s += (i ? " " : "") + std::to_string((c.*m)[i]);
            return s;
          }};
}

Field real(double Config::*m) {
  return {[m](Config& c, const std::string& k, const std::string& v) { c.*m = to_real(k, tokens(k, v, 1)[0]); },
          [m](const Config& c) { return fmt(c.*m); }};
}

Field count(std::size_t Config::*m) {
  return {[m](Config& c, const std::string& k, const std::string& v) { c.*m = to_count(k, tokens(k, v, 1)[0]); },
          [m](const Config& c) { return std::to_string(c.*m); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["voxel_size"] = reals(&Config::voxel_size);
    t["range_min"] = reals(&Config::range_min);
    t["range_max"] = reals(&Config::range_max);
    t["keypoints"] = count(&Config::keypoints);
    t["backbone_widths"] = counts(&Config::backbone_widths);
    t["vsa_radii"] = reals(&Config::vsa_radii);
    t["vsa_caps"] = counts(&Config::vsa_caps);
    t["raw_radii"] = reals(&Config::raw_radii);
    t["raw_cap"] = count(&Config::raw_cap);
    t["vsa_width"] = count(&Config::vsa_width);
    t["raw_vsa_width"] = count(&Config::raw_vsa_width);
    t["pkw_hidden"] = count(&Config::pkw_hidden);
    t["roi_radii"] = reals(&Config::roi_radii);
    t["roi_cap"] = count(&Config::roi_cap);
    t["roi_branch_width"] = count(&Config::roi_branch_width);
    t["roi_pooled_width"] = count(&Config::roi_pooled_width);
    t["grid_resolution"] = {
        [](Config& c, const std::string& k, const std::string& v) {
          const auto n = to_count(k, tokens(k, v, 1)[0]);
          if (n > 64) throw ValidationError("config key 'grid_resolution': must be at most 64");
          c.grid_resolution = static_cast<int>(n);
        },
        [](const Config& c) { return std::to_string(c.grid_resolution); }};
    t["anchor_size"] = reals(&Config::anchor_size);
    t["anchor_z"] = real(&Config::anchor_z);
    t["rpn_positive_iou"] = real(&Config::rpn_positive_iou);
    t["rpn_negative_iou"] = real(&Config::rpn_negative_iou);
    t["focal_alpha"] = real(&Config::focal_alpha);
    t["focal_gamma"] = real(&Config::focal_gamma);
    t["reg_beta"] = real(&Config::reg_beta);
    t["proposal_top_k"] = count(&Config::proposal_top_k);
    t["proposal_nms"] = real(&Config::proposal_nms);
    t["final_nms"] = real(&Config::final_nms);
    t["nms_kind"] = {
        [](Config& c, const std::string& k, const std::string& v) {
          const std::string s = tokens(k, v, 1)[0];
          if (s == "3d") c.nms_kind = geom::IouKind::ThreeD;
          else if (s == "bev") c.nms_kind = geom::IouKind::Bev;
          else throw ValidationError("config key 'nms_kind': expected '3d' or 'bev', got '" + s + "'");
        },
        [](const Config& c) { return std::string(c.nms_kind == geom::IouKind::ThreeD ? "3d" : "bev"); }};
    t["roi_samples"] = count(&Config::roi_samples);
    t["roi_positive_fraction"] = real(&Config::roi_positive_fraction);
    t["roi_positive_iou"] = real(&Config::roi_positive_iou);
    t["eval_iou"] = real(&Config::eval_iou);
    t["seed"] = {[](Config& c, const std::string& k, const std::string& v) { c.seed = to_count(k, tokens(k, v, 1)[0]); },
                 [](const Config& c) { return std::to_string(c.seed); }};
    t["scene_ground_points"] = count(&Config::scene_ground_points);
    t["scene_objects"] = count(&Config::scene_objects);
    t["scene_surface_points"] = count(&Config::scene_surface_points);
    t["scene_min_inside"] = count(&Config::scene_min_inside);
    t["scene_noise"] = real(&Config::scene_noise);
    t["scene_ground_z"] = real(&Config::scene_ground_z);
    t["object_size"] = reals(&Config::object_size);
    t["object_size_std"] = reals(&Config::object_size_std);
    t["train_iters"] = count(&Config::train_iters);
    t["pkw_lr"] = real(&Config::pkw_lr);
    t["refine_lr"] = real(&Config::refine_lr);
    t["refine_proposals"] = count(&Config::refine_proposals);
    t["refine_jitter"] = real(&Config::refine_jitter);
    return t;
  }();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError("invalid config: " + msg);
}

bool is_ratio(double v) { return v >= 0.0 && v <= 1.0; }

}  // namespace

vsa::VsaConfig Config::vsa() const {
  vsa::VsaConfig v;
  for (std::size_t k = 0; k < 4; ++k) v.level_radii[k] = {vsa_radii[2 * k], vsa_radii[2 * k + 1]};
  v.level_caps = vsa_caps;
  v.raw_radii = {raw_radii[0], raw_radii[1]};
  v.raw_cap = raw_cap;
  v.level_out_width = vsa_width;
  v.raw_out_width = raw_vsa_width;
  return v;
}

roi::RoiGridConfig Config::roi_grid() const {
  roi::RoiGridConfig r;
  r.radii = {roi_radii[0], roi_radii[1]};
  r.cap = roi_cap;
  r.branch_width = roi_branch_width;
  r.pooled_width = roi_pooled_width;
  r.resolution = grid_resolution;
  return r;
}

roi::SamplingConfig Config::sampling() const {
  return {roi_samples, roi_positive_fraction, roi_positive_iou};
}

rpn::AnchorClass Config::anchor_class() const {
  return {"car", 0, anchor_size[0], anchor_size[1], anchor_size[2], anchor_z};
}

synth::SceneConfig Config::scene() const {
  synth::SceneConfig s;
  s.range = range();
  s.ground_z = scene_ground_z;
  s.ground_points = scene_ground_points;
  s.classes = {synth::ObjectClass{"car", 0, object_size, object_size_std, scene_objects}};
  s.surface_points = scene_surface_points;
  s.min_inside_points = scene_min_inside;
  s.noise_sigma = scene_noise;
  return s;
}

std::size_t Config::bev_channels() const {
  const double extent = range_max[2] - range_min[2];
  auto dim = static_cast<std::size_t>(std::llround(extent / voxel_size[2]));
  for (int s = 0; s < 3; ++s) dim = (dim + 1) / 2;
  return dim * backbone_widths[3];
}

std::size_t Config::keypoint_width() const {
  return vsa().pv_width() + vsa().raw_width() + bev_channels();
}

void validate(const Config& c) {
  for (int a = 0; a < 3; ++a) {
    require(c.voxel_size[a] > 0.0, "voxel_size must be positive on every axis");
    require(c.range_max[a] > c.range_min[a], "range_max must exceed range_min on every axis");
    const double cells = (c.range_max[a] - c.range_min[a]) / c.voxel_size[a];
    require(std::abs(cells - std::round(cells)) < 1e-6,
            "range extent must be a whole number of voxels on every axis");
    require(cells < (1 << 20), "grid too large along an axis");
    require(c.anchor_size[a] > 0.0, "anchor_size must be positive");
    require(c.object_size[a] > 0.0, "object_size must be positive");
    require(c.object_size_std[a] >= 0.0, "object_size_std must be non-negative");
  }
  require(c.keypoints > 0, "keypoints must be positive");
  for (std::size_t w : c.backbone_widths) require(w > 0, "backbone_widths must be positive");
  for (std::size_t k = 0; k < 4; ++k) {
    require(c.vsa_radii[2 * k] > 0.0 && c.vsa_radii[2 * k] <= c.vsa_radii[2 * k + 1],
            "vsa_radii must be positive (inner, outer) pairs with inner <= outer");
    require(c.vsa_caps[k] > 0, "vsa_caps must be positive");
  }
  require(c.raw_radii[0] > 0.0 && c.raw_radii[0] <= c.raw_radii[1], "raw_radii must be positive, inner <= outer");
  require(c.roi_radii[0] > 0.0 && c.roi_radii[0] <= c.roi_radii[1], "roi_radii must be positive, inner <= outer");
  require(c.raw_cap > 0 && c.roi_cap > 0, "neighbor caps must be positive");
  require(c.vsa_width > 0 && c.raw_vsa_width > 0 && c.pkw_hidden > 0, "MLP widths must be positive");
  require(c.roi_branch_width > 0 && c.roi_pooled_width > 0, "RoI widths must be positive");
  require(c.grid_resolution >= 1, "grid_resolution must be at least 1");
  require(is_ratio(c.rpn_positive_iou) && is_ratio(c.rpn_negative_iou) &&
              c.rpn_negative_iou <= c.rpn_positive_iou,
          "rpn IoU thresholds must lie in [0,1] with negative <= positive");
  require(is_ratio(c.focal_alpha) && c.focal_gamma >= 0.0, "focal_alpha in [0,1], focal_gamma >= 0");
  require(c.reg_beta >= 0.0, "reg_beta must be non-negative");
  require(c.proposal_top_k > 0, "proposal_top_k must be positive");
  require(is_ratio(c.proposal_nms) && is_ratio(c.final_nms), "NMS thresholds must lie in [0,1]");
  require(c.roi_samples > 0, "roi_samples must be positive");
  require(is_ratio(c.roi_positive_fraction), "roi_positive_fraction must lie in [0,1]");
  require(is_ratio(c.roi_positive_iou) && is_ratio(c.eval_iou), "IoU thresholds must lie in [0,1]");
  require(c.scene_noise >= 0.0, "scene_noise must be non-negative");
  require(c.scene_ground_z >= c.range_min[2] && c.scene_ground_z < c.range_max[2],
          "scene_ground_z must lie inside the z range");
  require(c.pkw_lr >= 0.0 && c.refine_lr >= 0.0, "learning rates must be non-negative");
  require(c.refine_jitter >= 0.0, "refine_jitter must be non-negative");
}

void set_key(Config& cfg, const std::string& key, const std::string& value) {
  const auto& t = fields();
  const auto it = t.find(key);
  if (it == t.end()) throw ValidationError("unknown config key '" + key + "'");
  it->second.set(cfg, key, value);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : fields()) keys.push_back(k);
  return keys;
}

Config parse_config(const std::string& text, const Config& base) {
  Config cfg = base;
  std::istringstream is(text);
  std::string line;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second) {
      throw ValidationError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    set_key(cfg, key, trim(line.substr(eq + 1)));
  }
  validate(cfg);
  return cfg;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot read config " + path.string());
  return parse_config(std::string(std::istreambuf_iterator<char>(is), {}));
}

Config apply_env_overrides(const Config& cfg, const std::map<std::string, std::string>& env) {
  Config out = cfg;
  std::set<std::string> known;
  for (const std::string& key : config_keys()) {
    std::string name = "PVL_" + key;
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char ch) { return std::toupper(ch); });
    known.insert(name);
    if (const auto it = env.find(name); it != env.end()) set_key(out, key, it->second);
  }
  for (const auto& [name, value] : env) {
    if (name.rfind("PVL_", 0) == 0 && !known.contains(name)) {
      throw ValidationError("unknown environment override " + name);
    }
  }
  validate(out);
  return out;
}

std::map<std::string, std::string> pvl_environment() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    if (entry.rfind("PVL_", 0) != 0) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    env[entry.substr(0, eq)] = entry.substr(eq + 1);
  }
  return env;
}

std::string format_config(const Config& cfg) {
  std::string out;
  for (const auto& [key, f] : fields()) out += key + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace pvl
