#include "mtad/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "mtad/parallel.hpp"

namespace mtad::eval {

namespace {

void check_scores(std::span<const double> s, const char* side) {
  if (s.empty()) throw std::invalid_argument(std::string(side) + " score set is empty");
  for (double v : s)
    if (!std::isfinite(v))
      throw std::invalid_argument(std::string("non-finite score in ") + side);
}

}  // namespace

double auc(std::span<const double> scores_nominal,
           std::span<const double> scores_anomalous) {
  check_scores(scores_nominal, "nominal");
  check_scores(scores_anomalous, "anomalous");
  const std::size_t n1 = scores_nominal.size();
  const std::size_t n2 = scores_anomalous.size();

  std::vector<std::pair<double, int>> pool;  // (score, is_nominal)
  pool.reserve(n1 + n2);
  for (double v : scores_nominal) pool.emplace_back(v, 1);
  for (double v : scores_anomalous) pool.emplace_back(v, 0);
  std::sort(pool.begin(), pool.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  // Doubled midranks keep everything in integers: elements of a tie group
  // on 1-based positions [a, b] all get doubled rank a + b.
  long long s2 = 0;  // doubled rank sum of the nominal side
  std::size_t i = 0;
  while (i < pool.size()) {
    std::size_t j = i;
    while (j + 1 < pool.size() && pool[j + 1].first == pool[i].first) ++j;
    const long long doubled = static_cast<long long>(i + 1) + static_cast<long long>(j + 1);
    for (std::size_t k = i; k <= j; ++k)
      if (pool[k].second) s2 += doubled;
    i = j + 1;
  }
  const long long numerator = s2 - static_cast<long long>(n1) * static_cast<long long>(n1 + 1);
  return static_cast<double>(numerator) /
         static_cast<double>(2 * static_cast<long long>(n1) * static_cast<long long>(n2));
}

double auc_pair_count(std::span<const double> scores_nominal,
                      std::span<const double> scores_anomalous) {
  check_scores(scores_nominal, "nominal");
  check_scores(scores_anomalous, "anomalous");
  long long greater = 0, ties = 0;
  for (double a : scores_nominal)
    for (double b : scores_anomalous) {
      if (a > b)
        ++greater;
      else if (a == b)
        ++ties;
    }
  const long long n1 = static_cast<long long>(scores_nominal.size());
  const long long n2 = static_cast<long long>(scores_anomalous.size());
  return static_cast<double>(2 * greater + ties) / static_cast<double>(2 * n1 * n2);
}

double kl_divergence_discrete(std::span<const double> q, std::span<const double> p) {
  if (q.size() != p.size()) throw std::invalid_argument("distribution lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] == 0.0) continue;
    if (!(p[i] > 0.0))
      throw std::invalid_argument("support violation: q[" + std::to_string(i) +
                                  "] > 0 but p[" + std::to_string(i) + "] <= 0");
    s += q[i] * std::log(q[i] / p[i]);
  }
  return s;
}

namespace {

// All compositions of `resolution` into `dim` parts, as simplex points.
void enumerate_simplex(int dim, int resolution,
                       const std::function<void(const std::vector<double>&)>& visit) {
  std::vector<int> counts(static_cast<std::size_t>(dim), 0);
  std::vector<double> point(static_cast<std::size_t>(dim), 0.0);
  std::function<void(int, int)> rec = [&](int pos, int left) {
    if (pos == dim - 1) {
      counts[static_cast<std::size_t>(pos)] = left;
      for (int i = 0; i < dim; ++i)
        point[static_cast<std::size_t>(i)] =
            static_cast<double>(counts[static_cast<std::size_t>(i)]) / resolution;
      visit(point);
      return;
    }
    for (int c = 0; c <= left; ++c) {
      counts[static_cast<std::size_t>(pos)] = c;
      rec(pos + 1, left - c);
    }
  };
  rec(0, resolution);
}

}  // namespace

BaseOptimalityReport verify_base_optimality(
    const std::vector<std::vector<double>>& qs, const std::vector<double>& weights,
    int grid_resolution, Exec exec) {
  if (qs.empty() || qs.size() != weights.size())
    throw std::invalid_argument("need one weight per distribution");
  const int dim = static_cast<int>(qs.front().size());
  if (dim > 5) throw std::invalid_argument("brute force limited to alphabet <= 5");
  if (grid_resolution < 1) throw std::invalid_argument("grid resolution must be >= 1");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (std::abs(wsum - 1.0) > 1e-9) throw std::invalid_argument("weights must sum to 1");

  std::vector<double> mixture(static_cast<std::size_t>(dim), 0.0);
  for (std::size_t t = 0; t < qs.size(); ++t) {
    if (static_cast<int>(qs[t].size()) != dim)
      throw std::invalid_argument("distribution lengths differ");
    for (int i = 0; i < dim; ++i)
      mixture[static_cast<std::size_t>(i)] += weights[t] * qs[t][static_cast<std::size_t>(i)];
  }

  auto objective = [&](const std::vector<double>& p) {
    double j = 0.0;
    for (std::size_t t = 0; t < qs.size(); ++t) {
      for (int i = 0; i < dim; ++i) {
        const double qi = qs[t][static_cast<std::size_t>(i)];
        if (qi == 0.0) continue;
        const double pi = p[static_cast<std::size_t>(i)];
        if (!(pi > 0.0)) return std::numeric_limits<double>::infinity();
        j += weights[t] * qi * std::log(qi / pi);
      }
    }
    return j;
  };

  // Materialize the grid once, then evaluate in parallel; the argmin scan
  // is serial so ties resolve to the lowest grid index.
  std::vector<std::vector<double>> grid;
  enumerate_simplex(dim, grid_resolution,
                    [&](const std::vector<double>& p) { grid.push_back(p); });
  std::vector<double> values(grid.size());
  par::for_each(exec, grid.size(),
                [&](std::size_t i) { values[i] = objective(grid[i]); });

  BaseOptimalityReport report;
  report.mixture_objective = objective(mixture);
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (values[i] < values[best]) best = i;
  report.grid_min_objective = values[best];
  report.grid_argmin = grid[best];
  for (int i = 0; i < dim; ++i)
    report.argmin_l1_distance += std::abs(report.grid_argmin[static_cast<std::size_t>(i)] -
                                          mixture[static_cast<std::size_t>(i)]);
  report.passed = report.mixture_objective <= report.grid_min_objective + 1e-6;
  return report;
}

double gaussian_log_ratio(const Gaussian1D& q, const Gaussian1D& p, double x) {
  const double zq = (x - q.mean) / q.stddev;
  const double zp = (x - p.mean) / p.stddev;
  return -std::log(q.stddev) - 0.5 * zq * zq + std::log(p.stddev) + 0.5 * zp * zp;
}

double ratio_recovery_error(const std::function<double(double)>& scorer,
                            const Gaussian1D& q, const Gaussian1D& p,
                            double grid_lo, double grid_hi, double grid_step) {
  if (!(grid_step > 0.0) || grid_hi < grid_lo)
    throw std::invalid_argument("bad grid");
  double worst = 0.0;
  const int steps = static_cast<int>(std::round((grid_hi - grid_lo) / grid_step));
  for (int i = 0; i <= steps; ++i) {
    const double x = grid_lo + grid_step * i;
    worst = std::max(worst, std::abs(scorer(x) - gaussian_log_ratio(q, p, x)));
  }
  return worst;
}

namespace {

std::vector<double> midranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("spearman needs two equal-length vectors, n >= 2");
  const auto ra = midranks(a);
  const auto rb = midranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0)
    throw std::invalid_argument("undefined-correlation: constant rank vector");
  return cov / std::sqrt(va * vb);
}

double similarity_rank_correlation(const nn::Matrix& learned_sim,
                                   const nn::Matrix& truth_overlap) {
  if (learned_sim.rows != truth_overlap.rows || learned_sim.cols != truth_overlap.cols ||
      learned_sim.rows != learned_sim.cols)
    throw std::invalid_argument("similarity matrices must be square and same shape");
  std::vector<double> a, b;
  for (int i = 0; i < learned_sim.rows; ++i)
    for (int j = i + 1; j < learned_sim.cols; ++j) {
      a.push_back(learned_sim(i, j));
      b.push_back(truth_overlap(i, j));
    }
  return spearman(a, b);
}

EvalReport evaluate_generalization(const embed::PreEmbeddingModel& pre_model,
                                   const clr::RatioModel& ratio_model,
                                   const std::vector<GeneralizationTask>& tasks,
                                   const std::string& config_digest, Exec exec) {
  EvalReport report;
  report.config_digest = config_digest;
  for (const auto& task : tasks) {
    const auto e = embed::learned_embedding(pre_model, task.train, exec);
    if (static_cast<int>(e.vector.size()) != ratio_model.embeddings.dim)
      throw std::invalid_argument(
          "pre-embedding width " + std::to_string(e.vector.size()) +
          " does not match the ratio model's embedding dim " +
          std::to_string(ratio_model.embeddings.dim));
    std::vector<double> sn(task.nominal.size()), sa(task.anomalous.size());
    par::for_each(exec, task.nominal.size(), [&](std::size_t i) {
      sn[i] = ratio_model.score_with_embedding(e.vector, task.nominal[i]);
    });
    par::for_each(exec, task.anomalous.size(), [&](std::size_t i) {
      sa[i] = ratio_model.score_with_embedding(e.vector, task.anomalous[i]);
    });
    report.per_task_auc[task.train.task_id] = auc(sn, sa);
  }
  report.finalize();
  return report;
}

}  // namespace mtad::eval
