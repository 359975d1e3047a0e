#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mtad {

/// Dense real-valued sample. Length d is fixed per experiment.
using FeatureVector = std::vector<double>;

/// Nominal sample set of one task, plus its share of the population.
/// Labels are categorical ids attached for filtering/evaluation; nothing in
/// the training or scoring paths reads them.
struct TaskDataset {
  int task_id = 0;
  std::vector<FeatureVector> samples;
  double weight = 0.0;            // population share, in (0, 1]
  std::vector<int> labels;        // empty, or one id per sample
};

/// All tasks of one experiment over a shared feature space. The population
/// view is the flattened multiset of (task, sample) pairs from which the
/// base distribution is sampled.
struct TaskCollection {
  std::vector<TaskDataset> tasks;
  std::size_t feature_dim = 0;

  /// (task index, sample index) for every sample, task-major.
  std::vector<std::pair<int, int>> population() const;
  std::size_t population_size() const;

  /// Sets each task's weight to its empirical sample share.
  void reset_empirical_weights();
};

/// Per-task conditioning vector e. All embeddings in one model share dim.
struct TaskEmbedding {
  int task_id = 0;
  std::vector<double> vector;
};

/// Dense table of task embeddings, one row per task id 0..M-1.
struct EmbeddingTable {
  int dim = 0;
  std::vector<std::vector<double>> rows;

  std::size_t size() const { return rows.size(); }
  std::vector<double>& operator[](std::size_t t) { return rows[t]; }
  const std::vector<double>& operator[](std::size_t t) const { return rows[t]; }
};

/// One contrastive mini-batch: positives x_i drawn from task t_i, negatives
/// drawn from the population mixture.
struct ContrastiveBatch {
  std::vector<int> task_ids;
  std::vector<FeatureVector> positives;
  std::vector<FeatureVector> negatives;

  std::size_t size() const { return task_ids.size(); }
};

/// Per-task and aggregate AUC results with a textual record of the run
/// configuration.
struct EvalReport {
  std::map<int, double> per_task_auc;
  double mean_auc = 0.0;
  std::string config_digest;

  void finalize();  // recomputes mean_auc from per_task_auc
};

/// Checks every TaskCollection invariant: positive consistent feature dim,
/// finite entries, non-empty tasks, weights in (0,1] summing to 1 within
/// 1e-9, label arrays either empty or sample-aligned. Throws
/// std::invalid_argument naming the offending task.
void validate_collection(const TaskCollection& c);

}  // namespace mtad
