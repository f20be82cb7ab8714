#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pvl/geom.hpp"
#include "pvl/matrix.hpp"

namespace pvl::eval {

using geom::Box3D;
using geom::Detection;
using geom::IouKind;
using geom::LabeledBox;

enum class ApMode { R11, R40 };

const char* mode_name(ApMode mode);

struct MatchResult {
  std::vector<char> tp;         // per input detection
  std::vector<int> matched_gt;  // -1 for false positives
};

// Detections are visited in descending score (ties by index); each takes the
// highest-IoU unmatched gt of the same class when that IoU reaches the
// threshold.
MatchResult match_detections(std::span<const Detection> dets, std::span<const LabeledBox> gts,
                             double iou_threshold, IouKind kind = IouKind::ThreeD);

struct PrCurve {
  std::vector<double> recall;
  std::vector<double> precision;
  std::vector<std::size_t> tp_at;  // cumulative TP count at each rank
  std::size_t gt_count = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
};

PrCurve build_pr_curve(std::span<const char> tp_flags, std::span<const double> scores,
                       std::size_t gt_count);

// Interpolated AP. R11 samples recall {0, 0.1, ..., 1}; R40 samples
// {1/40, ..., 1}. Recall thresholds are compared in integers (tp*steps >=
// i*gt) so constructed cases come out exact.
double average_precision(const PrCurve& curve, ApMode mode);
double average_precision(std::span<const char> tp_flags, std::span<const double> scores,
                         std::size_t gt_count, ApMode mode);

enum class Difficulty { Excluded, L1, L2 };

const char* difficulty_name(Difficulty d);

// L1 with at least 5 inside points, L2 with 1-4, excluded with none.
std::vector<Difficulty> difficulty_buckets(std::span<const LabeledBox> gts,
                                           std::span<const Vec3> points);

// Collects matches over scenes for one class, threshold and level. L2 is
// cumulative (it also counts L1 gts). Detections matched to gts outside the
// level are dropped rather than counted as false positives.
class Accumulator {
 public:
  Accumulator(int class_id, double iou_threshold, Difficulty level, IouKind kind = IouKind::ThreeD);

  void add_scene(std::span<const Detection> dets, std::span<const LabeledBox> gts,
                 std::span<const Difficulty> levels);

  PrCurve curve() const;
  double ap(ApMode mode) const { return average_precision(curve(), mode); }

  int class_id() const { return class_id_; }
  double iou_threshold() const { return threshold_; }
  Difficulty level() const { return level_; }

 private:
  int class_id_;
  double threshold_;
  Difficulty level_;
  IouKind kind_;
  std::vector<char> flags_;
  std::vector<double> scores_;
  std::size_t gt_count_ = 0;
};

// "class cx cy cz l w h theta score", one detection per line.
void write_detections(const std::filesystem::path& path, std::span<const Detection> dets);
std::vector<Detection> read_detections(const std::filesystem::path& path);
std::string format_detections(std::span<const Detection> dets);
std::vector<Detection> parse_detections(const std::string& text);

struct ReportRow {
  int class_id = 0;
  Difficulty level = Difficulty::L2;
  double iou_threshold = 0.7;
  std::size_t gt_count = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  double ap_r11 = 0.0;
  double ap_r40 = 0.0;
};

ReportRow make_row(const Accumulator& acc);
// AP columns are in percent; either column can be left out.
std::string format_table(std::span<const ReportRow> rows, bool r11 = true, bool r40 = true);
std::string format_csv(std::span<const ReportRow> rows);

}  // namespace pvl::eval
