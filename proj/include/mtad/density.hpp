#pragma once

#include "mtad/clr.hpp"
#include "mtad/core.hpp"
#include "mtad/nn.hpp"

namespace mtad::density {

/// Maps a task embedding to a diagonal Gaussian over feature space: the net
/// output is [mean (d), log-variance (d)], with variances clamped to the
/// floor from below.
struct ConditionalGaussian {
  nn::DenseNet net;  // embed_dim -> ... -> 2 d
  EmbeddingTable embeddings;
  int feature_dim = 0;
  double variance_floor = 1e-6;

  /// Predicted mean/log-variance for an embedding, post-clamp.
  std::pair<std::vector<double>, std::vector<double>> predict(
      std::span<const double> e) const;
};

double gaussian_logpdf(const ConditionalGaussian& model, std::span<const double> e,
                       const FeatureVector& x);
double gaussian_logpdf(const ConditionalGaussian& model, int task_id,
                       const FeatureVector& x);

/// Dense net whose fixed binary masks make output i a function of inputs
/// x_{1:i-1} only (autoregressive). Hidden layers are relu, output linear.
struct MaskedNet {
  std::vector<nn::Matrix> w, mask;
  std::vector<std::vector<double>> b;

  std::size_t param_count() const;
  void copy_params_to(std::span<double> out) const;
  void set_params(std::span<const double> in);  // re-applies the masks

  struct Tape {
    std::vector<std::vector<double>> inputs, preact;
  };
  std::vector<double> forward(std::span<const double> x, Tape* tape = nullptr) const;
  /// Accumulates masked parameter gradients; returns d loss / d input.
  std::vector<double> backward(const Tape& tape, std::vector<double> upstream,
                               std::span<double> grad_flat) const;
};

/// Builds the masked conditioner: `layers` weight matrices deep, hidden
/// width `hidden`, input/output width d. The output layer starts at zero.
MaskedNet make_masked_net(int d, int hidden, int layers, Rng& rng);

/// One flow block: two masked conditioners (shift and log-scale), per-task
/// scale/bias conditioning on their outputs, then activation normalization.
/// Odd blocks reverse the variable order so every dimension gets context.
struct FlowBlock {
  MaskedNet mu_net, alpha_net;
  std::vector<double> act_log_scale, act_shift;  // d each
  bool reverse = false;
};

/// Stack of K blocks with per-task Gaussian priors (unit covariance,
/// uniformly drawn mean) and trainable per-task conditioning vectors.
struct AffineFlow {
  std::vector<FlowBlock> blocks;
  /// Per task: for each block, [scale_mu, bias_mu, scale_alpha, bias_alpha],
  /// each of length d.
  std::vector<std::vector<double>> conditioning;
  std::vector<std::vector<double>> prior_means;  // per task, length d
  int feature_dim = 0;
  double alpha_clamp = 7.0;
  bool actnorm_ready = false;

  int num_tasks() const { return static_cast<int>(conditioning.size()); }
  std::size_t cond_dim() const { return blocks.size() * 4u * feature_dim; }

  /// Shared (non-conditioning) parameters, flattened block by block as
  /// [mu_net, alpha_net, act_log_scale, act_shift].
  std::size_t param_count() const;
  void copy_params_to(std::span<double> out) const;
  void set_params(std::span<const double> in);
};

struct FlowConfig {
  int blocks = 5;
  int conditioner_hidden = 64;
  int conditioner_layers = 4;
  double alpha_clamp = 7.0;
  double prior_mean_range = 1.0;  // means uniform in [-range, range]^d
};

AffineFlow make_flow(int feature_dim, int num_tasks, const FlowConfig& cfg, Rng& rng);

/// Normalizing pass x -> u with the accumulated log |det du/dx|.
struct FlowInverse {
  std::vector<double> u;
  double log_det = 0.0;
};
FlowInverse flow_inverse(const AffineFlow& flow, int task_id, const FeatureVector& x);

/// Generative pass u -> x (sequential per dimension; used by tests and
/// sampling, not by the likelihood).
std::vector<double> flow_forward(const AffineFlow& flow, int task_id,
                                 std::span<const double> u);

/// log density at x under the task's prior plus change of variables.
double flow_logpdf(const AffineFlow& flow, int task_id, const FeatureVector& x);

struct DensityConfig {
  clr::TrainConfig train;  // hidden/dropout describe the Gaussian trunk
  bool train_embeddings = true;
  double variance_floor = 1e-6;
  FlowConfig flow;

  DensityConfig() {
    train.hidden = {64, 64};
    train.hidden_dropout = {0.0, 0.0};
  }
};

std::pair<ConditionalGaussian, clr::LossTrace> train_gaussian(
    const TaskCollection& c, const EmbeddingTable& embeddings,
    const DensityConfig& cfg);

std::pair<AffineFlow, clr::LossTrace> train_flow(const TaskCollection& c,
                                                 const DensityConfig& cfg);

/// Log-density anomaly score (higher = more nominal). Used directly as the
/// ranking statistic; no threshold is materialized.
double density_score(const ConditionalGaussian& model, int task_id,
                     const FeatureVector& x);
double density_score(const AffineFlow& model, int task_id, const FeatureVector& x);

/// Mean negative log-likelihood of a (task, sample) batch and its gradient;
/// exposed for kernel tests and the benchmark.
struct FlowBatchGrads {
  std::vector<double> shared;                    // aligned with param layout
  std::map<int, std::vector<double>> conditioning;
  double loss = 0.0;
};
FlowBatchGrads flow_batch_gradient(const AffineFlow& flow,
                                   std::span<const int> task_ids,
                                   std::span<const FeatureVector> xs, Exec exec);

struct GaussianBatchGrads {
  std::vector<double> net;                       // aligned with DenseNet layout
  std::map<int, std::vector<double>> embeddings;
  double loss = 0.0;
};
GaussianBatchGrads gaussian_batch_gradient(const ConditionalGaussian& model,
                                           std::span<const int> task_ids,
                                           std::span<const FeatureVector> xs,
                                           Exec exec);

}  // namespace mtad::density
