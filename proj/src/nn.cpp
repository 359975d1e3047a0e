#include "mtad/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace mtad::nn {

Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation: " + s);
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "identity";
}

std::size_t DenseNet::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.w.data.size() + l.b.size();
  return n;
}

void DenseNet::copy_params_to(std::span<double> out) const {
  std::size_t k = 0;
  for (const auto& l : layers) {
    for (double v : l.w.data) out[k++] = v;
    for (double v : l.b) out[k++] = v;
  }
}

void DenseNet::set_params(std::span<const double> in) {
  std::size_t k = 0;
  for (auto& l : layers) {
    for (double& v : l.w.data) v = in[k++];
    for (double& v : l.b) v = in[k++];
  }
}

DenseNet make_net(int input_dim, const std::vector<int>& widths,
                  const std::vector<Activation>& acts,
                  const std::vector<double>& dropout, Rng& rng) {
  if (widths.empty()) throw std::invalid_argument("net needs at least one layer");
  if (acts.size() != widths.size())
    throw std::invalid_argument("one activation per layer required");
  if (!dropout.empty() && dropout.size() != widths.size())
    throw std::invalid_argument("dropout must be empty or one rate per layer");

  DenseNet net;
  int in = input_dim;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    Layer l;
    l.w = Matrix(widths[i], in);
    const double bound = std::sqrt(6.0 / (in + widths[i]));
    for (double& v : l.w.data) v = rng.uniform(-bound, bound);
    l.b.assign(widths[i], 0.0);
    l.act = acts[i];
    l.dropout = dropout.empty() ? 0.0 : dropout[i];
    if (l.dropout < 0.0 || l.dropout >= 1.0)
      throw std::invalid_argument("dropout rate must be in [0,1)");
    net.layers.push_back(std::move(l));
    in = widths[i];
  }
  return net;
}

namespace {

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::tanh: return std::tanh(z);
    case Activation::identity: return z;
  }
  return z;
}

// Derivative in terms of the pre-activation z. relu uses subgradient 0 at 0.
inline double activate_grad(Activation a, double z) {
  switch (a) {
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

}  // namespace

std::vector<double> forward(const DenseNet& net, std::span<const double> x,
                            bool training, Rng* rng, Tape* tape) {
  if (net.layers.empty()) throw std::invalid_argument("empty net");
  if (static_cast<int>(x.size()) != net.input_dim())
    throw std::invalid_argument("input length " + std::to_string(x.size()) +
                                " does not match net input dim " +
                                std::to_string(net.input_dim()));
  if (tape) {
    tape->inputs.assign(net.layers.size(), {});
    tape->preact.assign(net.layers.size(), {});
    tape->dropmask.assign(net.layers.size(), {});
  }

  std::vector<double> a(x.begin(), x.end());
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const Layer& l = net.layers[li];
    if (tape) tape->inputs[li] = a;

    std::vector<double> z(l.w.rows);
    for (int r = 0; r < l.w.rows; ++r) {
      double s = l.b[r];
      const double* wrow = l.w.data.data() + static_cast<std::size_t>(r) * l.w.cols;
      for (int c = 0; c < l.w.cols; ++c) s += wrow[c] * a[c];
      z[r] = s;
    }
    if (tape) tape->preact[li] = z;

    std::vector<double> out(l.w.rows);
    for (int r = 0; r < l.w.rows; ++r) out[r] = activate(l.act, z[r]);

    if (training && l.dropout > 0.0) {
      if (!rng) throw std::invalid_argument("training forward with dropout needs an rng");
      std::vector<double> mask(l.w.rows);
      const double keep = 1.0 - l.dropout;
      for (int r = 0; r < l.w.rows; ++r)
        mask[r] = rng->u01() < keep ? 1.0 / keep : 0.0;
      for (int r = 0; r < l.w.rows; ++r) out[r] *= mask[r];
      if (tape) tape->dropmask[li] = std::move(mask);
    }
    a = std::move(out);
  }
  return a;
}

std::vector<double> forward(const DenseNet& net, std::span<const double> x) {
  return forward(net, x, false, nullptr, nullptr);
}

std::vector<double> backward(const DenseNet& net, const Tape& tape,
                             std::vector<double> upstream,
                             std::span<double> grad_flat) {
  const std::size_t L = net.layers.size();
  if (tape.inputs.size() != L || tape.preact.size() != L)
    throw std::runtime_error("stale-tape: layer count mismatch");
  if (grad_flat.size() != net.param_count())
    throw std::runtime_error("gradient buffer size mismatch");
  if (upstream.size() != static_cast<std::size_t>(net.output_dim()))
    throw std::runtime_error("stale-tape: upstream gradient length mismatch");

  // Offset of each layer's [W,b] block inside the flat buffer.
  std::vector<std::size_t> offset(L);
  std::size_t k = 0;
  for (std::size_t li = 0; li < L; ++li) {
    offset[li] = k;
    k += net.layers[li].w.data.size() + net.layers[li].b.size();
  }

  std::vector<double> d = std::move(upstream);  // d loss / d layer-output
  for (std::size_t li = L; li-- > 0;) {
    const Layer& l = net.layers[li];
    const auto& z = tape.preact[li];
    const auto& in = tape.inputs[li];
    if (z.size() != static_cast<std::size_t>(l.w.rows) ||
        in.size() != static_cast<std::size_t>(l.w.cols))
      throw std::runtime_error("stale-tape: shape mismatch at layer " + std::to_string(li));

    if (!tape.dropmask[li].empty())
      for (int r = 0; r < l.w.rows; ++r) d[r] *= tape.dropmask[li][r];

    std::vector<double> dz(l.w.rows);
    for (int r = 0; r < l.w.rows; ++r) dz[r] = d[r] * activate_grad(l.act, z[r]);

    double* gw = grad_flat.data() + offset[li];
    double* gb = gw + l.w.data.size();
    for (int r = 0; r < l.w.rows; ++r) {
      const double dzr = dz[r];
      double* grow = gw + static_cast<std::size_t>(r) * l.w.cols;
      for (int c = 0; c < l.w.cols; ++c) grow[c] += dzr * in[c];
      gb[r] += dzr;
    }

    std::vector<double> dprev(l.w.cols, 0.0);
    for (int r = 0; r < l.w.rows; ++r) {
      const double dzr = dz[r];
      const double* wrow = l.w.data.data() + static_cast<std::size_t>(r) * l.w.cols;
      for (int c = 0; c < l.w.cols; ++c) dprev[c] += wrow[c] * dzr;
    }
    d = std::move(dprev);
  }
  return d;
}

Optimizer::Optimizer(OptimizerConfig cfg, std::size_t dim) : cfg_(std::move(cfg)) {
  if (!(cfg_.learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
    throw std::invalid_argument("adam betas must be in [0,1)");
  if (cfg_.kind != "sgd" && cfg_.kind != "adam")
    throw std::invalid_argument("unknown optimizer kind: " + cfg_.kind);
  if (cfg_.kind == "adam") {
    m_.assign(dim, 0.0);
    v_.assign(dim, 0.0);
  }
}

void Optimizer::step(std::span<double> params, std::span<const double> grads,
                     const std::string& what) {
  if (params.size() != grads.size())
    throw std::invalid_argument("optimizer shape mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i]))
      throw std::runtime_error("non-finite gradient in " + what);

  ++t_;
  if (cfg_.kind == "sgd") {
    for (std::size_t i = 0; i < params.size(); ++i)
      params[i] -= cfg_.learning_rate * grads[i];
    return;
  }
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
    const double mhat = m_[i] / c1;
    const double vhat = v_[i] / c2;
    params[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
  }
}

RowOptimizer::RowOptimizer(OptimizerConfig cfg, std::size_t rows, std::size_t dim)
    : cfg_(std::move(cfg)), dim_(dim) {
  if (cfg_.kind == "adam") {
    m_.assign(rows * dim, 0.0);
    v_.assign(rows * dim, 0.0);
  }
  t_.assign(rows, 0);
}

void RowOptimizer::step_row(std::size_t row, std::span<double> params,
                            std::span<const double> grads) {
  if (params.size() != dim_ || grads.size() != dim_)
    throw std::invalid_argument("row optimizer shape mismatch");
  for (std::size_t i = 0; i < dim_; ++i)
    if (!std::isfinite(grads[i]))
      throw std::runtime_error("non-finite gradient in embedding row " + std::to_string(row));

  ++t_[row];
  if (cfg_.kind == "sgd") {
    for (std::size_t i = 0; i < dim_; ++i) params[i] -= cfg_.learning_rate * grads[i];
    return;
  }
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_[row]));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_[row]));
  double* m = m_.data() + row * dim_;
  double* v = v_.data() + row * dim_;
  for (std::size_t i = 0; i < dim_; ++i) {
    m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grads[i];
    v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
    params[i] -= cfg_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.epsilon);
  }
}

}  // namespace mtad::nn
