#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mtad/rng.hpp"

namespace mtad::nn {

enum class Activation { identity, relu, tanh };

Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);

/// Row-major dense matrix.
struct Matrix {
  int rows = 0, cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}
  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

struct Layer {
  Matrix w;                 // out x in
  std::vector<double> b;    // out
  Activation act = Activation::identity;
  double dropout = 0.0;     // applied after the activation while training
};

/// Plain feed-forward net. Gradients are hand-derived in backward(); there
/// is no graph autodiff.
struct DenseNet {
  std::vector<Layer> layers;

  int input_dim() const { return layers.empty() ? 0 : layers.front().w.cols; }
  int output_dim() const { return layers.empty() ? 0 : layers.back().w.rows; }
  std::size_t param_count() const;

  void copy_params_to(std::span<double> out) const;
  void set_params(std::span<const double> in);
};

/// Builds a net from layer widths. dropout may be empty (all zero) or one
/// rate per hidden/output layer. Weights are Glorot-uniform, biases zero.
DenseNet make_net(int input_dim, const std::vector<int>& widths,
                  const std::vector<Activation>& acts,
                  const std::vector<double>& dropout, Rng& rng);

/// Activation record of one forward pass, consumed by backward().
struct Tape {
  std::vector<std::vector<double>> inputs;   // input to each layer
  std::vector<std::vector<double>> preact;   // z = W x + b per layer
  std::vector<std::vector<double>> dropmask; // post-activation scale; empty if off
};

/// Runs the net. While training, dropout masks are drawn from rng with
/// inverted scaling (kept units multiplied by 1/(1-p)), so inference needs
/// no rescaling. Throws on input dimension mismatch.
std::vector<double> forward(const DenseNet& net, std::span<const double> x,
                            bool training, Rng* rng, Tape* tape);

/// Convenience inference call: dropout off, no tape.
std::vector<double> forward(const DenseNet& net, std::span<const double> x);

/// Backpropagates `upstream` (d loss / d output) through the tape.
/// Parameter gradients are *accumulated* into grad_flat, laid out layer by
/// layer as [W row-major, b]; the return value is d loss / d input.
/// Throws if the tape does not match the net.
std::vector<double> backward(const DenseNet& net, const Tape& tape,
                             std::vector<double> upstream,
                             std::span<double> grad_flat);

struct OptimizerConfig {
  std::string kind = "adam";  // "sgd" or "adam"
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First-order optimizer over a flat parameter vector. Adam keeps
/// bias-corrected moments; sgd is plain theta -= lr * g.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::size_t dim);

  /// One update. Throws std::runtime_error naming `what` if any gradient
  /// entry is non-finite.
  void step(std::span<double> params, std::span<const double> grads,
            const std::string& what = "parameters");

  const OptimizerConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<double> m_, v_;
  std::int64_t t_ = 0;
};

/// Lazy Adam over table rows: moments and step counters are per row, and
/// only rows that received gradient move. Used for embedding tables so
/// untouched tasks stay exactly put.
class RowOptimizer {
 public:
  RowOptimizer(OptimizerConfig cfg, std::size_t rows, std::size_t dim);
  void step_row(std::size_t row, std::span<double> params,
                std::span<const double> grads);

 private:
  OptimizerConfig cfg_;
  std::size_t dim_;
  std::vector<double> m_, v_;
  std::vector<std::int64_t> t_;
};

/// Central finite-difference gradient of `f` at x, step h.
template <class F>
std::vector<double> finite_difference(F&& f, std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

}  // namespace mtad::nn
