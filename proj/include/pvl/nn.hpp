#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pvl/matrix.hpp"

namespace pvl::nn {

enum class OutputActivation { Identity, Sigmoid, Relu };

// One affine layer. weight is in x out so that a row-vector input multiplies
// from the left: y = x * W + b.
struct Layer {
  Matrix weight;
  std::vector<double> bias;
};

// Fully connected network. Hidden layers use max(0, x); the last layer uses
// `output`.
struct MlpParams {
  std::vector<std::size_t> dims;
  std::vector<Layer> layers;
  OutputActivation output = OutputActivation::Identity;

  std::size_t in_width() const { return dims.front(); }
  std::size_t out_width() const { return dims.back(); }
  std::size_t param_count() const;
};

// Weights uniform in [-s, s], s = sqrt(6 / (fan_in + fan_out)); biases zero.
MlpParams init_params(std::vector<std::size_t> dims, std::uint64_t seed,
                      OutputActivation output = OutputActivation::Identity);

// Same layout, every parameter zero.
MlpParams zero_params(std::vector<std::size_t> dims,
                      OutputActivation output = OutputActivation::Identity);

double sigmoid(double x);
double relu(double x);

std::vector<double> mlp_forward(const MlpParams& p, std::span<const double> x);
Matrix mlp_forward(const MlpParams& p, const Matrix& batch);

// Applies a single layer (affine, then activation when `activate`) to one row.
void layer_forward(const Layer& layer, std::span<const double> x, std::span<double> y);

struct MlpGrads {
  std::vector<Matrix> weight;
  std::vector<std::vector<double>> bias;
  Matrix input;  // dL/dx, one row per batch row
};

// Reverse-mode gradients. `upstream` is dL/d(output) with the output taken
// after the output activation. Parameter gradients are summed over rows.
MlpGrads mlp_backward(const MlpParams& p, const Matrix& x, const Matrix& upstream);

// Plain SGD with a fixed step.
void sgd_step(MlpParams& p, const MlpGrads& g, double lr);

// Parameters in layer order, weight (row-major) then bias.
std::vector<double> flatten(const MlpParams& p);
std::vector<double> flatten(const MlpGrads& g);
void unflatten(MlpParams& p, std::span<const double> values);

// Central differences per coordinate; returns the largest relative error
// |a - n| / max(|a|, |n|, 1e-8) against `analytic`. Throws RuntimeError if f
// is not finite at a probe.
double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<const double> analytic, std::span<const double> point,
                  double eps = 1e-3);

struct NamedMlp {
  std::string name;
  MlpParams params;
};

// Text header (one line per network listing its dims) followed by the
// parameters as little-endian float64 in flatten() order.
void save_params(const std::filesystem::path& path, std::span<const NamedMlp> nets);
std::vector<NamedMlp> load_params(const std::filesystem::path& path);

}  // namespace pvl::nn
