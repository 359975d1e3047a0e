#pragma once

#include <set>

#include "mtad/clr.hpp"
#include "mtad/core.hpp"
#include "mtad/nn.hpp"

namespace mtad::embed {

/// Trunk plus one linear output head per seed task. Head s approximates the
/// log-ratio of seed task s's nominal density to the population density;
/// the head outputs form the basis responses used to encode tasks.
struct PreEmbeddingModel {
  nn::DenseNet net;                // final layer has one row per seed task
  std::vector<int> seed_task_ids;  // in head order

  int num_heads() const { return static_cast<int>(seed_task_ids.size()); }
  /// r(x): all head outputs, dropout off.
  std::vector<double> basis_response(const FeatureVector& x) const;
};

/// Uniform sample of m0 task ids without replacement.
std::vector<int> select_seed_tasks(const TaskCollection& c, int m0, Rng& rng);

/// Trains the head-per-task ratio model restricted to the seed tasks;
/// positives come from the seed tasks (weights renormalized), negatives
/// from the full population.
std::pair<PreEmbeddingModel, clr::LossTrace> train_pre_embedding(
    const TaskCollection& c, const std::vector<int>& seeds,
    const clr::TrainConfig& cfg);

/// Task encoding: the mean basis response over the task's samples. Forward
/// passes only.
TaskEmbedding learned_embedding(const PreEmbeddingModel& model,
                                const TaskDataset& task,
                                Exec exec = Exec::parallel);

/// Normalized label histogram of the task's samples (length = label_arity).
TaskEmbedding histogram_embedding(const TaskDataset& task, int label_arity);

/// Binary indicator of the active categories (length = label_arity).
TaskEmbedding label_embedding(const std::set<int>& active_categories,
                              int label_arity);

/// i.i.d. standard normal table, one row per task.
EmbeddingTable random_embedding(std::size_t m, int e_dim, Rng& rng);

/// Diagonal-covariance Gaussian mixture fitted by EM.
struct Gmm {
  std::vector<double> weights;             // L
  std::vector<std::vector<double>> means;  // L x d
  std::vector<std::vector<double>> vars;   // L x d, floored
  std::vector<double> loglik_trace;        // mean log-likelihood per iteration

  /// Posterior over components at x.
  std::vector<double> responsibilities(const FeatureVector& x) const;
};

struct GmmConfig {
  int max_iterations = 200;
  double tolerance = 1e-6;     // stop when mean log-likelihood moves less
  double variance_floor = 1e-6;
  Exec exec = Exec::parallel;
};

/// k-means++ initialization followed by EM to convergence.
Gmm fit_gmm(const std::vector<FeatureVector>& points, int components,
            std::uint64_t seed, const GmmConfig& cfg = {});

/// Clusters the pooled population with a GMM and embeds every task as its
/// samples' mean responsibility vector (length = components).
EmbeddingTable pseudo_label_embedding(const TaskCollection& c, int components,
                                      const GmmConfig& cfg, std::uint64_t seed);

/// Pairwise cosine similarities; symmetric with unit diagonal. Throws on a
/// zero-norm vector or mixed lengths.
nn::Matrix similarity_matrix(const std::vector<TaskEmbedding>& embeddings);

/// Assembles a table from per-task embeddings (rows indexed by position).
EmbeddingTable table_from(const std::vector<TaskEmbedding>& embeddings);

/// Applies a fixed seeded Gaussian random projection so a length-S
/// embedding can seed a model with embed dim E != S. Entries are
/// N(0, 1/S); the same seed always yields the same map.
EmbeddingTable project_table(const EmbeddingTable& table, int target_dim,
                             std::uint64_t seed);

}  // namespace mtad::embed
