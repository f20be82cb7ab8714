#include "pvl/evalkit.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "pvl/error.hpp"

namespace pvl::eval {

namespace {

std::vector<std::size_t> score_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

const char* mode_name(ApMode mode) { return mode == ApMode::R11 ? "R11" : "R40"; }

const char* difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::L1: return "L1";
    case Difficulty::L2: return "L2";
    default: return "excluded";
  }
}

MatchResult match_detections(std::span<const Detection> dets, std::span<const LabeledBox> gts,
                             double iou_threshold, IouKind kind) {
  MatchResult out;
  out.tp.assign(dets.size(), 0);
  out.matched_gt.assign(dets.size(), -1);
  std::vector<double> scores(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) scores[i] = dets[i].score;

  std::vector<char> taken(gts.size(), 0);
  for (std::size_t d : score_order(scores)) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].class_id != dets[d].class_id) continue;
      const double v = geom::iou(dets[d].box, gts[g].box, kind);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= iou_threshold) {
      taken[static_cast<std::size_t>(best)] = 1;
      out.tp[d] = 1;
      out.matched_gt[d] = best;
    }
  }
  return out;
}

PrCurve build_pr_curve(std::span<const char> tp_flags, std::span<const double> scores,
                       std::size_t gt_count) {
  if (tp_flags.size() != scores.size()) {
    throw ValidationError("build_pr_curve: flags and scores differ in length");
  }
  PrCurve c;
  c.gt_count = gt_count;
  for (std::size_t i : score_order(scores)) {
    if (tp_flags[i]) ++c.tp; else ++c.fp;
    const double rank = static_cast<double>(c.tp + c.fp);
    c.tp_at.push_back(c.tp);
    c.precision.push_back(static_cast<double>(c.tp) / rank);
    c.recall.push_back(gt_count ? static_cast<double>(c.tp) / static_cast<double>(gt_count) : 0.0);
  }
  if (c.tp > gt_count) throw ValidationError("build_pr_curve: more true positives than gts");
  return c;
}

double average_precision(const PrCurve& curve, ApMode mode) {
  if (curve.gt_count == 0) return 0.0;
  const std::size_t steps = mode == ApMode::R11 ? 10 : 40;
  const std::size_t first = mode == ApMode::R11 ? 0 : 1;
  const std::size_t n = curve.precision.size();

  // envelope[k] = max precision over ranks >= k
  std::vector<double> envelope(n + 1, 0.0);
  for (std::size_t k = n; k-- > 0;) envelope[k] = std::max(envelope[k + 1], curve.precision[k]);

  double sum = 0.0;
  std::size_t k = 0;
  for (std::size_t i = first; i <= steps; ++i) {
    while (k < n && curve.tp_at[k] * steps < i * curve.gt_count) ++k;
    sum += envelope[k];
  }
  return sum / static_cast<double>(steps + 1 - first);
}

double average_precision(std::span<const char> tp_flags, std::span<const double> scores,
                         std::size_t gt_count, ApMode mode) {
  return average_precision(build_pr_curve(tp_flags, scores, gt_count), mode);
}

std::vector<Difficulty> difficulty_buckets(std::span<const LabeledBox> gts,
                                           std::span<const Vec3> points) {
  std::vector<Difficulty> out;
  out.reserve(gts.size());
  for (const LabeledBox& g : gts) {
    std::size_t count = 0;
    for (const Vec3& p : points) count += geom::point_in_box(p, g.box) ? 1 : 0;
    out.push_back(count >= 5 ? Difficulty::L1 : count >= 1 ? Difficulty::L2 : Difficulty::Excluded);
  }
  return out;
}

Accumulator::Accumulator(int class_id, double iou_threshold, Difficulty level, IouKind kind)
    : class_id_(class_id), threshold_(iou_threshold), level_(level), kind_(kind) {
  if (level == Difficulty::Excluded) throw ValidationError("Accumulator: level must be L1 or L2");
}

void Accumulator::add_scene(std::span<const Detection> dets, std::span<const LabeledBox> gts,
                            std::span<const Difficulty> levels) {
  if (levels.size() != gts.size()) throw ValidationError("add_scene: one level per gt required");
  auto counted = [&](Difficulty d) {
    return d == Difficulty::L1 || (level_ == Difficulty::L2 && d == Difficulty::L2);
  };
  std::vector<Detection> mine;
  for (const Detection& d : dets) {
    if (d.class_id == class_id_) mine.push_back(d);
  }
  std::vector<LabeledBox> class_gts;
  std::vector<Difficulty> class_levels;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gts[g].class_id != class_id_) continue;
    class_gts.push_back(gts[g]);
    class_levels.push_back(levels[g]);
    if (counted(levels[g])) ++gt_count_;
  }
  const MatchResult m = match_detections(mine, class_gts, threshold_, kind_);
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (m.matched_gt[i] >= 0 && !counted(class_levels[static_cast<std::size_t>(m.matched_gt[i])])) {
      continue;
    }
    flags_.push_back(m.tp[i]);
    scores_.push_back(mine[i].score);
  }
}

PrCurve Accumulator::curve() const { return build_pr_curve(flags_, scores_, gt_count_); }

std::string format_detections(std::span<const Detection> dets) {
  std::string out;
  char line[512];
  for (const Detection& d : dets) {
    std::snprintf(line, sizeof line, "%d %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                  d.class_id, d.box.cx, d.box.cy, d.box.cz, d.box.l, d.box.w, d.box.h, d.box.theta,
                  d.score);
    out += line;
  }
  return out;
}

std::vector<Detection> parse_detections(const std::string& text) {
  std::vector<Detection> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    int cls = 0;
    double v[8];
    ls >> cls;
    for (double& x : v) ls >> x;
    std::string extra;
    if (!ls || (ls >> extra)) {
      throw ParseError("detections line " + std::to_string(lineno) +
                       ": expected 'class cx cy cz l w h theta score'");
    }
    try {
      out.push_back(geom::make_detection(Box3D(v[0], v[1], v[2], v[3], v[4], v[5], v[6]), v[7], cls));
    } catch (const ValidationError& e) {
      throw ParseError("detections line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_detections(const std::filesystem::path& path, std::span<const Detection> dets) {
  std::ofstream os(path);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << format_detections(dets);
  if (!os) throw RuntimeError("failed writing " + path.string());
}

std::vector<Detection> read_detections(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw RuntimeError("cannot open " + path.string());
  return parse_detections(std::string(std::istreambuf_iterator<char>(is), {}));
}

ReportRow make_row(const Accumulator& acc) {
  const PrCurve c = acc.curve();
  ReportRow r;
  r.class_id = acc.class_id();
  r.level = acc.level();
  r.iou_threshold = acc.iou_threshold();
  r.gt_count = c.gt_count;
  r.tp = c.tp;
  r.fp = c.fp;
  r.ap_r11 = average_precision(c, ApMode::R11);
  r.ap_r40 = average_precision(c, ApMode::R40);
  return r;
}

std::string format_table(std::span<const ReportRow> rows, bool r11, bool r40) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-6s %-6s %-6s %6s %6s %6s", "class", "level", "iou", "gt", "tp", "fp");
  out += line;
  if (r11) out += "   R11(%)";
  if (r40) out += "   R40(%)";
  out += "\n";
  for (const ReportRow& r : rows) {
    std::snprintf(line, sizeof line, "%-6d %-6s %-6.2f %6zu %6zu %6zu", r.class_id,
                  difficulty_name(r.level), r.iou_threshold, r.gt_count, r.tp, r.fp);
    out += line;
    if (r11) {
      std::snprintf(line, sizeof line, " %8.4f", r.ap_r11 * 100);
      out += line;
    }
    if (r40) {
      std::snprintf(line, sizeof line, " %8.4f", r.ap_r40 * 100);
      out += line;
    }
    out += "\n";
  }
  return out;
}

std::string format_csv(std::span<const ReportRow> rows) {
  std::string out = "class,level,iou_threshold,gt,tp,fp,ap_r11,ap_r40\n";
  char line[256];
  for (const ReportRow& r : rows) {
    std::snprintf(line, sizeof line, "%d,%s,%.17g,%zu,%zu,%zu,%.17g,%.17g\n", r.class_id,
                  difficulty_name(r.level), r.iou_threshold, r.gt_count, r.tp, r.fp, r.ap_r11, r.ap_r40);
    out += line;
  }
  return out;
}

}  // namespace pvl::eval
