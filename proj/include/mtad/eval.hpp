#pragma once

#include <functional>

#include "mtad/clr.hpp"
#include "mtad/core.hpp"
#include "mtad/embed.hpp"
#include "mtad/nn.hpp"

namespace mtad::eval {

/// Mann-Whitney AUC: the fraction of (nominal, anomalous) pairs where the
/// nominal score is strictly larger, ties counted half. Computed by rank
/// sums in O(n log n) with exact integer arithmetic, so it equals the
/// quadratic pair count bit for bit. Throws on empty sides or non-finite
/// scores.
double auc(std::span<const double> scores_nominal,
           std::span<const double> scores_anomalous);

/// Quadratic pair-counting reference used by the equivalence tests.
double auc_pair_count(std::span<const double> scores_nominal,
                      std::span<const double> scores_anomalous);

/// Sum_i q_i log(q_i / p_i) with 0 log 0 = 0. Throws if some q_i > 0 has
/// p_i <= 0.
double kl_divergence_discrete(std::span<const double> q, std::span<const double> p);

/// Brute-force check that the weighted mixture minimizes
/// J(p) = sum_t m_t KL(q_t || p) over the probability simplex.
struct BaseOptimalityReport {
  double mixture_objective = 0.0;
  double grid_min_objective = 0.0;
  std::vector<double> grid_argmin;
  double argmin_l1_distance = 0.0;  // |argmin - mixture|_1
  bool passed = false;              // mixture_objective <= grid_min + 1e-6
};
BaseOptimalityReport verify_base_optimality(
    const std::vector<std::vector<double>>& qs, const std::vector<double>& weights,
    int grid_resolution, Exec exec = Exec::parallel);

/// Max absolute error of a scorer against the closed-form 1-D Gaussian
/// log-ratio log(q/p) on a uniform grid.
struct Gaussian1D {
  double mean = 0.0;
  double stddev = 1.0;
};
double gaussian_log_ratio(const Gaussian1D& q, const Gaussian1D& p, double x);
double ratio_recovery_error(const std::function<double(double)>& scorer,
                            const Gaussian1D& q, const Gaussian1D& p,
                            double grid_lo, double grid_hi, double grid_step);

/// Spearman rank correlation of the strict upper triangles of two square
/// matrices, ties mid-ranked. Throws if either triangle is constant.
double similarity_rank_correlation(const nn::Matrix& learned_sim,
                                   const nn::Matrix& truth_overlap);

/// Spearman over two flat vectors (helper shared with the matrix form).
double spearman(std::span<const double> a, std::span<const double> b);

/// Scores every unseen task with the frozen ratio model, encoding it first
/// with the frozen pre-embedding model; no parameter updates anywhere. The
/// caller provides nominal/anomalous test points per task.
struct GeneralizationTask {
  TaskDataset train;  // samples used to encode the task
  std::vector<FeatureVector> nominal, anomalous;
};
EvalReport evaluate_generalization(const embed::PreEmbeddingModel& pre_model,
                                   const clr::RatioModel& ratio_model,
                                   const std::vector<GeneralizationTask>& tasks,
                                   const std::string& config_digest,
                                   Exec exec = Exec::parallel);

}  // namespace mtad::eval
