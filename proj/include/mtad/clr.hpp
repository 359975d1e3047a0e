#pragma once

#include <optional>
#include <utility>

#include "mtad/core.hpp"
#include "mtad/nn.hpp"
#include "mtad/parallel.hpp"

namespace mtad::clr {

/// Numerically stable log(1 + exp(z)).
double softplus(double z);
double sigmoid(double z);

/// Training settings shared by the ratio model, the pre-embedding model and
/// the density baselines. hidden/hidden_dropout describe the trunk; the
/// output layer is appended by each model builder.
struct TrainConfig {
  int epochs = 30;
  int batch_size = 128;
  nn::OptimizerConfig opt;
  int embed_dim = 16;
  double val_fraction = 0.1;
  std::vector<int> hidden = {32, 32, 16};
  std::vector<double> hidden_dropout = {0.5, 0.5, 0.3};
  std::uint64_t seed = 1;
  Exec exec = Exec::parallel;
};

/// Shared scorer: a net over the concatenated (x, e) input plus the
/// trainable embedding table. score() approximates the log-ratio of the
/// task's nominal density to the population density; larger means more
/// nominal for that task.
struct RatioModel {
  nn::DenseNet net;
  EmbeddingTable embeddings;
  int feature_dim = 0;

  double score(int task_id, const FeatureVector& x) const;
  double score_with_embedding(std::span<const double> e,
                              std::span<const double> x) const;
};

struct LossTrace {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  int best_epoch = -1;  // 0-based; earliest epoch attaining the minimum
};

/// Draws n contrastive pairs: t_i proportional to the task weights, x_i
/// uniform within task t_i, and negatives from the population mixture
/// (task proportional to weight, then uniform within that task).
ContrastiveBatch sample_batch(const TaskCollection& c, std::size_t n, Rng& rng);

/// Mean logistic loss of positive scores vs negative scores, in the stable
/// softplus form. Non-negative; equals 2 ln 2 when every score is zero.
double logistic_loss(std::span<const double> scores_pos,
                     std::span<const double> scores_neg);

/// Mini-batch trainer for the joint (net, embedding-table) objective.
/// Exposes single-batch stepping so tests can observe gradient flow; most
/// callers go through estimate_clr().
class ClrTrainer {
 public:
  ClrTrainer(const TaskCollection& c, const std::optional<EmbeddingTable>& init,
             TrainConfig cfg);

  void train();
  double train_one_batch();
  double validation_loss() const;

  const ContrastiveBatch& last_batch() const { return last_batch_; }
  const RatioModel& model() const { return model_; }
  RatioModel take_model() { return std::move(model_); }
  const LossTrace& trace() const { return trace_; }
  int batches_per_epoch() const { return batches_per_epoch_; }

 private:
  void snapshot();
  void restore();

  TrainConfig cfg_;
  TaskCollection train_;                       // validation samples removed
  std::vector<std::pair<int, int>> val_pairs_; // (task, sample) into val sets
  std::vector<std::vector<FeatureVector>> val_samples_;
  std::vector<int> val_neg_tasks_;             // task id per fixed negative
  std::vector<FeatureVector> val_negatives_;
  RatioModel model_;
  nn::Optimizer net_opt_;
  nn::RowOptimizer emb_opt_;
  Rng sample_rng_, dropout_rng_;
  ContrastiveBatch last_batch_;
  LossTrace trace_;
  int batches_per_epoch_ = 0;
  double best_val_ = 0.0;
  bool have_best_ = false;
  std::vector<double> best_net_params_;
  EmbeddingTable best_embeddings_;
};

/// Algorithm entry point: trains the shared scorer on the collection,
/// warm-starting from `init` when given, and returns the parameters of the
/// best validation checkpoint together with the loss trace.
std::pair<RatioModel, LossTrace> estimate_clr(
    const TaskCollection& c, const std::optional<EmbeddingTable>& init,
    const TrainConfig& cfg);

/// Unconditional single-task scorer trained on explicit contrastive sets.
struct SingleTaskScorer {
  nn::DenseNet net;
  double score(const FeatureVector& x) const;
};

std::pair<SingleTaskScorer, LossTrace> score_single_task(
    const std::vector<FeatureVector>& positives,
    const std::vector<FeatureVector>& negatives, const TrainConfig& cfg);

/// Scores a list of samples for one task; parallel over samples.
std::vector<double> scores_for_task(const RatioModel& model, int task_id,
                                    std::span<const FeatureVector> samples,
                                    Exec exec = Exec::parallel);

/// One mini-batch of the joint gradient; exposed for the kernel tests and
/// the serial/OpenMP benchmark.
struct ClrBatchGrads {
  std::vector<double> net;                       // flat, aligned with DenseNet
  std::map<int, std::vector<double>> embeddings; // task id -> d loss / d e
  double loss = 0.0;
};
ClrBatchGrads clr_batch_gradient(const RatioModel& model,
                                 const ContrastiveBatch& batch,
                                 const Rng& dropout_rng, Exec exec);

}  // namespace mtad::clr
