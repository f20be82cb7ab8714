#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pvl/geom.hpp"

namespace pvl::checks {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct CheckOptions {
  std::uint64_t seed = 0;
  // Replaces the BEV IoU under test; used to prove the suite catches a
  // broken kernel.
  std::function<double(const geom::Box3D&, const geom::Box3D&)> bev_iou = geom::bev_iou;
};

// Names of available fault fixtures for `--inject`.
std::vector<std::string> fixtures();
// Applies a named fixture; throws ValidationError for unknown names.
void inject(CheckOptions& opts, const std::string& fixture);

std::vector<CheckResult> run_checks(const CheckOptions& opts);

}  // namespace pvl::checks
