#pragma once

#include <set>

#include "mtad/core.hpp"
#include "mtad/rng.hpp"

namespace mtad::synth {

/// Synthetic multi-task benchmark: L ground-truth categories realized as
/// isotropic Gaussian blobs, one task per k-subset of categories, each
/// training sample exposed to exactly one task whose active set contains
/// its category.
struct SynthConfig {
  int categories = 10;      // L
  int feature_dim = 10;     // d
  int active_per_task = 1;  // k
  int n_per_category = 500;
  double blob_stddev = 1.0;
  double test_fraction = 0.2;
  std::vector<FeatureVector> centers;  // default: 3 * unit_l, needs d >= L
  std::uint64_t seed = 1;
};

struct SynthBenchmark {
  TaskCollection train;
  std::vector<FeatureVector> test_points;
  std::vector<int> test_labels;                 // category per test point
  std::vector<std::set<int>> active;            // ground truth per task
  SynthConfig config;

  /// Test-point indices whose category is (not) in the task's active set.
  std::vector<int> nominal_test(int task) const;
  std::vector<int> anomalous_test(int task) const;
};

/// All k-subsets of {0..L-1} in lexicographic order; the position is the
/// task id.
std::vector<std::set<int>> enumerate_tasks(int categories, int active_per_task);

std::size_t binomial(int n, int k);

SynthBenchmark generate(const SynthConfig& cfg);

/// |active_i ∩ active_j|.
int ground_truth_overlap(const SynthBenchmark& b, int i, int j);

}  // namespace mtad::synth
