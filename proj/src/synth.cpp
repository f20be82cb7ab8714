#include "pvl/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "pvl/error.hpp"
#include "pvl/rng.hpp"

namespace pvl::synth {

namespace {

constexpr double kInset = 1e-3;
constexpr const char* kMagic = "PVSCN";
constexpr int kVersion = 1;

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

double quantize_angle(double theta) {
  float t = static_cast<float>(theta);
  while (static_cast<double>(t) >= std::numbers::pi) t = std::nextafter(t, -4.0f);
  while (static_cast<double>(t) < -std::numbers::pi) t = std::nextafter(t, 4.0f);
  return static_cast<double>(t);
}

Box3D quantize(const Box3D& b) {
  return Box3D(to_f32(b.cx), to_f32(b.cy), to_f32(b.cz), to_f32(b.l), to_f32(b.w), to_f32(b.h),
               quantize_angle(b.theta));
}

LidarPoint quantize(const LidarPoint& p) {
  return {to_f32(p.x), to_f32(p.y), to_f32(p.z), to_f32(p.intensity)};
}

Vec3 xyz(const LidarPoint& p) { return {p.x, p.y, p.z}; }

bool collides(const Box3D& candidate, std::span<const LabeledBox> boxes, double clearance) {
  const Box3D grown(candidate.cx, candidate.cy, candidate.cz, candidate.l + 2.0 * clearance,
                    candidate.w + 2.0 * clearance, candidate.h, candidate.theta);
  for (const LabeledBox& b : boxes) {
    if (geom::bev_intersection_area(grown, b.box) > 0.0) return true;
  }
  return false;
}

// Reflects a noisy local coordinate back into [-half + inset, half - inset].
double fold_inside(double v, double half) {
  const double lim = half - kInset;
  if (v > lim) v = 2.0 * lim - v;
  if (v < -lim) v = -2.0 * lim - v;
  return std::clamp(v, -lim, lim);
}

std::vector<LidarPoint> sample_surface(const Box3D& box, std::size_t count, double sigma,
                                       double intensity_lo, Rng& rng) {
  // top face plus four sides, area weighted
  const double a_top = box.l * box.w;
  const double a_front = box.w * box.h;
  const double a_side = box.l * box.h;
  const std::array<double, 5> areas{a_top, a_front, a_front, a_side, a_side};
  const double total = a_top + 2.0 * a_front + 2.0 * a_side;
  const double hl = 0.5 * box.l, hw = 0.5 * box.w, hh = 0.5 * box.h;

  std::vector<LidarPoint> pts;
  pts.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    double pick = rng.uniform() * total;
    std::size_t face = 0;
    while (face + 1 < areas.size() && pick >= areas[face]) pick -= areas[face++];
    const double u = rng.uniform(-1.0, 1.0);
    const double v = rng.uniform(-1.0, 1.0);
    Vec3 local{};
    switch (face) {
      case 0: local = {u * hl, v * hw, hh}; break;
      case 1: local = {hl, u * hw, v * hh}; break;
      case 2: local = {-hl, u * hw, v * hh}; break;
      case 3: local = {u * hl, hw, v * hh}; break;
      default: local = {u * hl, -hw, v * hh}; break;
    }
    local = {fold_inside(local[0] + rng.normal(0.0, sigma), hl),
             fold_inside(local[1] + rng.normal(0.0, sigma), hw),
             fold_inside(local[2] + rng.normal(0.0, sigma), hh)};
    const Vec3 world = geom::rotate_z(local, box.theta);
    pts.push_back(quantize(LidarPoint{box.cx + world[0], box.cy + world[1], box.cz + world[2],
                                      rng.uniform(intensity_lo, 1.0)}));
  }
  return pts;
}

template <typename T>
void put_le(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  const U bits = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  if (pos + sizeof(T) > in.size()) throw ParseError("scene: truncated payload");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bits |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return std::bit_cast<T>(bits);
}

}  // namespace

std::vector<Vec3> SceneSample::positions() const {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const LidarPoint& p : points) out.push_back(xyz(p));
  return out;
}

SceneSample gen_scene(const SceneConfig& cfg, std::uint64_t seed) {
  SceneSample scene;
  scene.seed = seed;
  scene.range = cfg.range;
  Rng rng(seed);
  const PointRange& r = cfg.range;

  for (const ObjectClass& cls : cfg.classes) {
    for (std::size_t n = 0; n < cls.count; ++n) {
      bool placed = false;
      for (std::size_t attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
        Vec3 size{};
        for (int a = 0; a < 3; ++a) {
          size[a] = std::max(0.5 * cls.mean_size[a], rng.normal(cls.mean_size[a], cls.std_size[a]));
        }
        const double reach = 0.5 * std::hypot(size[0], size[1]) + 0.1;
        if (r.max[0] - r.min[0] <= 2 * reach || r.max[1] - r.min[1] <= 2 * reach) break;
        const double cx = rng.uniform(r.min[0] + reach, r.max[0] - reach);
        const double cy = rng.uniform(r.min[1] + reach, r.max[1] - reach);
        const double theta = rng.uniform(-std::numbers::pi, std::numbers::pi);
        const Box3D box = quantize(Box3D(cx, cy, cfg.ground_z + 0.5 * size[2], size[0], size[1],
                                         size[2], theta));
        if (box.top() >= r.max[2] || box.bottom() < r.min[2]) continue;
        if (collides(box, scene.gt_boxes, cfg.clearance)) continue;

        const double dist = std::hypot(box.cx, box.cy);
        const double falloff =
            dist > cfg.reference_distance ? std::pow(cfg.reference_distance / dist, 2.0) : 1.0;
        const auto count = std::max(
            cfg.min_inside_points,
            static_cast<std::size_t>(std::llround(static_cast<double>(cfg.surface_points) * falloff)));
        std::vector<LidarPoint> pts = sample_surface(box, count, cfg.noise_sigma, 0.3, rng);
        std::erase_if(pts, [&](const LidarPoint& p) {
          return !r.contains(p.x, p.y, p.z) || !geom::point_in_box(xyz(p), box);
        });
        if (pts.size() < std::max<std::size_t>(1, cfg.min_inside_points)) continue;
        scene.points.insert(scene.points.end(), pts.begin(), pts.end());
        scene.gt_boxes.push_back({box, cls.class_id});
        placed = true;
      }
      if (!placed) {
        throw RuntimeError("gen_scene: could not place object " + std::to_string(n) + " of class '" +
                           cls.name + "' within " + std::to_string(cfg.max_retries) + " attempts");
      }
    }
  }

  for (std::size_t i = 0; i < cfg.ground_points; ++i) {
    const LidarPoint p = quantize(LidarPoint{rng.uniform(r.min[0], r.max[0]),
                                             rng.uniform(r.min[1], r.max[1]),
                                             cfg.ground_z + rng.normal(0.0, cfg.noise_sigma),
                                             rng.uniform(0.0, 0.3)});
    if (!r.contains(p.x, p.y, p.z)) continue;
    const Vec3 q = xyz(p);
    const bool in_object = std::any_of(scene.gt_boxes.begin(), scene.gt_boxes.end(),
                                       [&](const LabeledBox& b) { return geom::point_in_box(q, b.box); });
    if (!in_object) scene.points.push_back(p);
  }
  return scene;
}

AugmentParams AugmentParams::sample(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xa06));
  AugmentParams p;
  p.flip = rng.uniform() < 0.5;
  p.rotation = rng.uniform(-std::numbers::pi / 4.0, std::numbers::pi / 4.0);
  p.scale = rng.uniform(0.95, 1.05);
  return p;
}

SceneSample augment(const SceneSample& scene, const AugmentParams& params) {
  SceneSample out = scene;
  const double c = std::cos(params.rotation);
  const double s = std::sin(params.rotation);
  auto move = [&](double& x, double& y, double& z) {
    if (params.flip) y = -y;
    const double rx = c * x - s * y;
    const double ry = s * x + c * y;
    x = rx * params.scale;
    y = ry * params.scale;
    z *= params.scale;
  };
  for (LidarPoint& p : out.points) move(p.x, p.y, p.z);
  for (LabeledBox& lb : out.gt_boxes) {
    Box3D b = lb.box;
    move(b.cx, b.cy, b.cz);
    const double theta = (params.flip ? -b.theta : b.theta) + params.rotation;
    lb.box = Box3D(b.cx, b.cy, b.cz, b.l * params.scale, b.w * params.scale, b.h * params.scale, theta);
  }
  return out;
}

SceneSample augment(const SceneSample& scene, std::uint64_t seed) {
  return augment(scene, AugmentParams::sample(seed));
}

SceneSample gt_paste(const SceneSample& scene, std::span<const SceneSample> donors,
                     std::size_t count, std::uint64_t seed, double clearance) {
  SceneSample out = scene;
  struct Candidate {
    std::size_t donor;
    std::size_t box;
  };
  std::vector<Candidate> pool;
  for (std::size_t d = 0; d < donors.size(); ++d) {
    for (std::size_t b = 0; b < donors[d].gt_boxes.size(); ++b) pool.push_back({d, b});
  }
  if (pool.empty() || count == 0) return out;

  Rng rng(mix_seed(seed, 0x9a57e));
  const PointRange& r = out.range;
  for (std::size_t n = 0; n < count; ++n) {
    const Candidate cand = pool[rng.below(pool.size())];
    const SceneSample& donor = donors[cand.donor];
    const LabeledBox& src = donor.gt_boxes[cand.box];
    const double reach = 0.5 * std::hypot(src.box.l, src.box.w) + 0.1;
    if (r.max[0] - r.min[0] <= 2 * reach || r.max[1] - r.min[1] <= 2 * reach) continue;
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double cx = rng.uniform(r.min[0] + reach, r.max[0] - reach);
      const double cy = rng.uniform(r.min[1] + reach, r.max[1] - reach);
      const double dx = cx - src.box.cx;
      const double dy = cy - src.box.cy;
      const Box3D moved(src.box.cx + dx, src.box.cy + dy, src.box.cz, src.box.l, src.box.w,
                        src.box.h, src.box.theta);
      if (collides(moved, out.gt_boxes, clearance)) continue;

      std::vector<LidarPoint> pasted;
      for (const LidarPoint& p : donor.points) {
        if (!geom::point_in_box(xyz(p), src.box)) continue;
        const LidarPoint q{p.x + dx, p.y + dy, p.z, p.intensity};
        if (!geom::point_in_box(xyz(q), moved)) {
          pasted.clear();
          break;
        }
        pasted.push_back(q);
      }
      if (pasted.empty()) continue;
      std::erase_if(out.points, [&](const LidarPoint& p) { return geom::point_in_box(xyz(p), moved); });
      out.points.insert(out.points.end(), pasted.begin(), pasted.end());
      out.gt_boxes.push_back({moved, src.class_id});
      break;
    }
  }
  return out;
}

std::vector<std::size_t> inside_counts(const SceneSample& scene) {
  std::vector<std::size_t> counts(scene.gt_boxes.size(), 0);
  for (const LidarPoint& p : scene.points) {
    for (std::size_t b = 0; b < scene.gt_boxes.size(); ++b) {
      if (geom::point_in_box(xyz(p), scene.gt_boxes[b].box)) ++counts[b];
    }
  }
  return counts;
}

bool boxes_bev_disjoint(std::span<const LabeledBox> boxes) {
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    for (std::size_t j = i + 1; j < boxes.size(); ++j) {
      if (geom::bev_intersection_area(boxes[i].box, boxes[j].box) > 0.0) return false;
    }
  }
  return true;
}

std::string encode_scene(const SceneSample& scene) {
  std::ostringstream header;
  header.precision(17);
  header << kMagic << kVersion << "\n"
         << "points " << scene.points.size() << "\n"
         << "boxes " << scene.gt_boxes.size() << "\n"
         << "seed " << scene.seed << "\n"
         << "range " << scene.range.min[0] << ' ' << scene.range.max[0] << ' ' << scene.range.min[1]
         << ' ' << scene.range.max[1] << ' ' << scene.range.min[2] << ' ' << scene.range.max[2]
         << "\n"
         << "data\n";
  std::string out = header.str();
  out.reserve(out.size() + scene.points.size() * 16 + scene.gt_boxes.size() * 32);
  for (const LidarPoint& p : scene.points) {
    for (double v : {p.x, p.y, p.z, p.intensity}) put_le(out, static_cast<float>(v));
  }
  for (const LabeledBox& b : scene.gt_boxes) {
    for (double v : {b.box.cx, b.box.cy, b.box.cz, b.box.l, b.box.w, b.box.h, b.box.theta}) {
      put_le(out, static_cast<float>(v));
    }
    put_le(out, static_cast<std::int32_t>(b.class_id));
  }
  return out;
}

SceneSample decode_scene(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw ParseError("scene: truncated header");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };

  const std::string magic = next_line();
  if (magic.rfind(kMagic, 0) != 0) throw ParseError("scene: not a PVSCN file");
  if (magic != std::string(kMagic) + std::to_string(kVersion)) {
    throw VersionError("scene: unsupported version '" + magic + "', expected " + kMagic +
                       std::to_string(kVersion));
  }
  auto keyed = [&](const std::string& key) {
    std::istringstream ls(next_line());
    std::string k;
    ls >> k;
    if (k != key) throw ParseError("scene: expected '" + key + "' header line");
    return ls;
  };
  SceneSample scene;
  std::size_t n_points = 0, n_boxes = 0;
  if (!(keyed("points") >> n_points)) throw ParseError("scene: bad point count");
  if (!(keyed("boxes") >> n_boxes)) throw ParseError("scene: bad box count");
  if (!(keyed("seed") >> scene.seed)) throw ParseError("scene: bad seed");
  {
    auto ls = keyed("range");
    std::array<std::string, 6> tok;
    for (auto& t : tok) {
      if (!(ls >> t)) throw ParseError("scene: bad range");
    }
    try {
      scene.range.min = {std::stod(tok[0]), std::stod(tok[2]), std::stod(tok[4])};
      scene.range.max = {std::stod(tok[1]), std::stod(tok[3]), std::stod(tok[5])};
    } catch (const std::exception&) {
      throw ParseError("scene: bad range value");
    }
  }
  if (next_line() != "data") throw ParseError("scene: missing data marker");
  if (bytes.size() - pos != n_points * 16 + n_boxes * 32) {
    throw ParseError("scene: payload size does not match the header counts");
  }

  scene.points.reserve(n_points);
  for (std::size_t i = 0; i < n_points; ++i) {
    LidarPoint p;
    p.x = get_le<float>(bytes, pos);
    p.y = get_le<float>(bytes, pos);
    p.z = get_le<float>(bytes, pos);
    p.intensity = get_le<float>(bytes, pos);
    scene.points.push_back(p);
  }
  for (std::size_t i = 0; i < n_boxes; ++i) {
    std::array<double, 7> v{};
    for (double& x : v) x = get_le<float>(bytes, pos);
    const int cls = get_le<std::int32_t>(bytes, pos);
    try {
      scene.gt_boxes.push_back({Box3D(v[0], v[1], v[2], v[3], v[4], v[5], v[6]), cls});
    } catch (const ValidationError& e) {
      throw ParseError(std::string("scene: invalid box record: ") + e.what());
    }
  }
  return scene;
}

void save_scene(const std::filesystem::path& path, const SceneSample& scene) {
  const std::string bytes = encode_scene(scene);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw RuntimeError("failed writing " + path.string());
}

SceneSample load_scene(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_scene(bytes);
}

}  // namespace pvl::synth
