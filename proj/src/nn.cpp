#include "pvl/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pvl/error.hpp"
#include "pvl/rng.hpp"

namespace pvl::nn {

namespace {

void check_layout(const MlpParams& p) {
  if (p.dims.size() < 2 || p.layers.size() + 1 != p.dims.size()) {
    throw ValidationError("mlp: dims and layers disagree");
  }
}

void check_width(const MlpParams& p, std::size_t width) {
  check_layout(p);
  if (width != p.in_width()) {
    throw ValidationError("mlp: input width " + std::to_string(width) + " but network expects " +
                          std::to_string(p.in_width()));
  }
}

double activate(double z, bool last, OutputActivation out) {
  if (!last || out == OutputActivation::Relu) return relu(z);
  return out == OutputActivation::Sigmoid ? sigmoid(z) : z;
}

const char* activation_name(OutputActivation a) {
  switch (a) {
    case OutputActivation::Sigmoid: return "sigmoid";
    case OutputActivation::Relu: return "relu";
    default: return "identity";
  }
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

double get_f64(std::istream& is) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) throw ParseError("params: truncated payload");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::size_t MlpParams::param_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) n += dims[i] * dims[i + 1] + dims[i + 1];
  return n;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double relu(double x) { return x > 0.0 ? x : 0.0; }

MlpParams zero_params(std::vector<std::size_t> dims, OutputActivation output) {
  if (dims.size() < 2) throw ValidationError("mlp: need at least input and output widths");
  for (std::size_t d : dims) {
    if (d == 0) throw ValidationError("mlp: layer widths must be positive");
  }
  MlpParams p;
  p.dims = std::move(dims);
  p.output = output;
  for (std::size_t i = 0; i + 1 < p.dims.size(); ++i) {
    p.layers.push_back({Matrix(p.dims[i], p.dims[i + 1]), std::vector<double>(p.dims[i + 1], 0.0)});
  }
  return p;
}

MlpParams init_params(std::vector<std::size_t> dims, std::uint64_t seed, OutputActivation output) {
  MlpParams p = zero_params(std::move(dims), output);
  Rng rng(mix_seed(seed, 0x31f));
  for (Layer& layer : p.layers) {
    const double s = std::sqrt(6.0 / static_cast<double>(layer.weight.rows() + layer.weight.cols()));
    for (double& w : layer.weight.data()) w = rng.uniform(-s, s);
  }
  return p;
}

void layer_forward(const Layer& layer, std::span<const double> x, std::span<double> y) {
  const std::size_t in = layer.weight.rows();
  const std::size_t out = layer.weight.cols();
  std::copy(layer.bias.begin(), layer.bias.end(), y.begin());
  const double* w = layer.weight.data().data();
  for (std::size_t i = 0; i < in; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* wr = w + i * out;
    for (std::size_t o = 0; o < out; ++o) y[o] += xi * wr[o];
  }
}

std::vector<double> mlp_forward(const MlpParams& p, std::span<const double> x) {
  check_width(p, x.size());
  std::vector<double> cur(x.begin(), x.end());
  std::vector<double> next;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    next.assign(p.dims[l + 1], 0.0);
    layer_forward(p.layers[l], cur, next);
    const bool last = l + 1 == p.layers.size();
    for (double& v : next) v = activate(v, last, p.output);
    cur.swap(next);
  }
  return cur;
}

Matrix mlp_forward(const MlpParams& p, const Matrix& batch) {
  check_width(p, batch.cols());
  Matrix out(batch.rows(), p.out_width());
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const std::vector<double> y = mlp_forward(p, batch.row(r));
    std::copy(y.begin(), y.end(), out.row(r).begin());
  }
  return out;
}

MlpGrads mlp_backward(const MlpParams& p, const Matrix& x, const Matrix& upstream) {
  check_width(p, x.cols());
  if (upstream.rows() != x.rows() || upstream.cols() != p.out_width()) {
    throw ValidationError("mlp_backward: upstream gradient shape mismatch");
  }
  const std::size_t n_layers = p.layers.size();
  MlpGrads g;
  for (const Layer& layer : p.layers) {
    g.weight.emplace_back(layer.weight.rows(), layer.weight.cols());
    g.bias.emplace_back(layer.bias.size(), 0.0);
  }
  g.input = Matrix(x.rows(), x.cols());

  std::vector<std::vector<double>> acts(n_layers + 1);  // post-activation per layer
  std::vector<double> delta;
  std::vector<double> prev;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    acts[0].assign(x.row(r).begin(), x.row(r).end());
    for (std::size_t l = 0; l < n_layers; ++l) {
      acts[l + 1].assign(p.dims[l + 1], 0.0);
      layer_forward(p.layers[l], acts[l], acts[l + 1]);
      const bool last = l + 1 == n_layers;
      for (double& v : acts[l + 1]) v = activate(v, last, p.output);
    }

    // dL/dz for the output layer
    std::span<const double> up = upstream.row(r);
    delta.assign(up.begin(), up.end());
    if (p.output == OutputActivation::Sigmoid) {
      for (std::size_t o = 0; o < delta.size(); ++o) {
        const double s = acts[n_layers][o];
        delta[o] *= s * (1.0 - s);
      }
    } else if (p.output == OutputActivation::Relu) {
      for (std::size_t o = 0; o < delta.size(); ++o) {
        if (acts[n_layers][o] <= 0.0) delta[o] = 0.0;
      }
    }
    for (std::size_t l = n_layers; l-- > 0;) {
      const Matrix& w = p.layers[l].weight;
      const std::size_t in = w.rows();
      const std::size_t out = w.cols();
      Matrix& gw = g.weight[l];
      for (std::size_t i = 0; i < in; ++i) {
        const double a = acts[l][i];
        if (a == 0.0) continue;
        for (std::size_t o = 0; o < out; ++o) gw(i, o) += a * delta[o];
      }
      for (std::size_t o = 0; o < out; ++o) g.bias[l][o] += delta[o];

      prev.assign(in, 0.0);
      for (std::size_t i = 0; i < in; ++i) {
        double s = 0.0;
        for (std::size_t o = 0; o < out; ++o) s += w(i, o) * delta[o];
        prev[i] = s;
      }
      if (l > 0) {
        // rectifier derivative, taken as 0 at the kink
        for (std::size_t i = 0; i < in; ++i) {
          if (acts[l][i] <= 0.0) prev[i] = 0.0;
        }
      }
      delta.swap(prev);
    }
    std::copy(delta.begin(), delta.end(), g.input.row(r).begin());
  }
  return g;
}

void sgd_step(MlpParams& p, const MlpGrads& g, double lr) {
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto w = p.layers[l].weight.data();
    auto gw = g.weight[l].data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * gw[i];
    for (std::size_t o = 0; o < p.layers[l].bias.size(); ++o) p.layers[l].bias[o] -= lr * g.bias[l][o];
  }
}

std::vector<double> flatten(const MlpParams& p) {
  std::vector<double> out;
  out.reserve(p.param_count());
  for (const Layer& layer : p.layers) {
    out.insert(out.end(), layer.weight.data().begin(), layer.weight.data().end());
    out.insert(out.end(), layer.bias.begin(), layer.bias.end());
  }
  return out;
}

std::vector<double> flatten(const MlpGrads& g) {
  std::vector<double> out;
  for (std::size_t l = 0; l < g.weight.size(); ++l) {
    out.insert(out.end(), g.weight[l].data().begin(), g.weight[l].data().end());
    out.insert(out.end(), g.bias[l].begin(), g.bias[l].end());
  }
  return out;
}

void unflatten(MlpParams& p, std::span<const double> values) {
  if (values.size() != p.param_count()) {
    throw ValidationError("mlp: flat parameter vector has wrong length");
  }
  std::size_t k = 0;
  for (Layer& layer : p.layers) {
    for (double& w : layer.weight.data()) w = values[k++];
    for (double& b : layer.bias) b = values[k++];
  }
}

double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<const double> analytic, std::span<const double> point, double eps) {
  if (analytic.size() != point.size()) {
    throw ValidationError("grad_check: gradient and point sizes differ");
  }
  std::vector<double> probe(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(probe);
    probe[i] = orig - eps;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw RuntimeError("grad_check: non-finite function value at coordinate " + std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

void save_params(const std::filesystem::path& path, std::span<const NamedMlp> nets) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << "PVLPARAMS 1\n";
  os << "nets " << nets.size() << "\n";
  for (const NamedMlp& net : nets) {
    os << "mlp " << net.name << ' '
       << activation_name(net.params.output) << ' '
       << net.params.dims.size();
    for (std::size_t d : net.params.dims) os << ' ' << d;
    os << '\n';
  }
  os << "data\n";
  for (const NamedMlp& net : nets) {
    for (double v : flatten(net.params)) put_f64(os, v);
  }
  if (!os) throw RuntimeError("failed writing " + path.string());
}

std::vector<NamedMlp> load_params(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw ParseError("params: empty file");
  {
    std::istringstream ls(line);
    std::string magic;
    int version = 0;
    ls >> magic >> version;
    if (magic != "PVLPARAMS") throw ParseError("params: bad magic");
    if (version != 1) throw VersionError("params: unsupported version " + std::to_string(version));
  }
  std::size_t count = 0;
  if (!std::getline(is, line) || std::sscanf(line.c_str(), "nets %zu", &count) != 1) {
    throw ParseError("params: missing net count");
  }
  std::vector<NamedMlp> nets;
  for (std::size_t n = 0; n < count; ++n) {
    if (!std::getline(is, line)) throw ParseError("params: truncated header");
    std::istringstream ls(line);
    std::string tag, name, act;
    std::size_t ndims = 0;
    ls >> tag >> name >> act >> ndims;
    if (tag != "mlp" || !ls || (act != "identity" && act != "sigmoid" && act != "relu")) {
      throw ParseError("params: malformed network line '" + line + "'");
    }
    std::vector<std::size_t> dims(ndims);
    for (std::size_t& d : dims) {
      if (!(ls >> d)) throw ParseError("params: malformed dims");
    }
    const OutputActivation out = act == "sigmoid" ? OutputActivation::Sigmoid
                                 : act == "relu"  ? OutputActivation::Relu
                                                  : OutputActivation::Identity;
    nets.push_back({name, zero_params(dims, out)});
  }
  if (!std::getline(is, line) || line != "data") throw ParseError("params: missing data marker");
  for (NamedMlp& net : nets) {
    std::vector<double> flat(net.params.param_count());
    for (double& v : flat) v = get_f64(is);
    unflatten(net.params, flat);
  }
  return nets;
}

}  // namespace pvl::nn
