#include "mtad/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mtad::synth {

std::size_t binomial(int n, int k) {
  if (k < 0 || k > n) return 0;
  k = std::min(k, n - k);
  std::size_t r = 1;
  for (int i = 1; i <= k; ++i) r = r * static_cast<std::size_t>(n - k + i) / static_cast<std::size_t>(i);
  return r;
}

std::vector<std::set<int>> enumerate_tasks(int categories, int active_per_task) {
  if (active_per_task < 1 || active_per_task > categories)
    throw std::invalid_argument("active_per_task must be in [1, categories]");
  std::vector<std::set<int>> all;
  std::vector<int> cur(static_cast<std::size_t>(active_per_task));
  for (int i = 0; i < active_per_task; ++i) cur[static_cast<std::size_t>(i)] = i;
  while (true) {
    all.emplace_back(cur.begin(), cur.end());
    int i = active_per_task - 1;
    while (i >= 0 && cur[static_cast<std::size_t>(i)] == categories - active_per_task + i) --i;
    if (i < 0) break;
    ++cur[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < active_per_task; ++j)
      cur[static_cast<std::size_t>(j)] = cur[static_cast<std::size_t>(j - 1)] + 1;
  }
  return all;
}

std::vector<int> SynthBenchmark::nominal_test(int task) const {
  std::vector<int> idx;
  const auto& act = active[static_cast<std::size_t>(task)];
  for (std::size_t i = 0; i < test_labels.size(); ++i)
    if (act.count(test_labels[i])) idx.push_back(static_cast<int>(i));
  return idx;
}

std::vector<int> SynthBenchmark::anomalous_test(int task) const {
  std::vector<int> idx;
  const auto& act = active[static_cast<std::size_t>(task)];
  for (std::size_t i = 0; i < test_labels.size(); ++i)
    if (!act.count(test_labels[i])) idx.push_back(static_cast<int>(i));
  return idx;
}

SynthBenchmark generate(const SynthConfig& cfg) {
  const int L = cfg.categories;
  const int d = cfg.feature_dim;
  const int k = cfg.active_per_task;
  if (L < 1 || d < 1 || cfg.n_per_category < 2)
    throw std::invalid_argument("invalid synthetic config");
  if (k < 1 || k > L) throw std::invalid_argument("active_per_task must be in [1, L]");
  if (!(cfg.test_fraction > 0.0) || cfg.test_fraction >= 1.0)
    throw std::invalid_argument("test_fraction must be in (0, 1)");

  std::vector<FeatureVector> centers = cfg.centers;
  if (centers.empty()) {
    if (d < L)
      throw std::invalid_argument("default one-hot centers need feature_dim >= categories");
    centers.assign(static_cast<std::size_t>(L), FeatureVector(static_cast<std::size_t>(d), 0.0));
    for (int l = 0; l < L; ++l) centers[static_cast<std::size_t>(l)][static_cast<std::size_t>(l)] = 3.0;
  }
  if (static_cast<int>(centers.size()) != L)
    throw std::invalid_argument("need one blob center per category");
  for (int a = 0; a < L; ++a)
    for (int b = a + 1; b < L; ++b)
      if (centers[static_cast<std::size_t>(a)] == centers[static_cast<std::size_t>(b)])
        throw std::invalid_argument("blob centers must be pairwise distinct");

  SynthBenchmark bench;
  bench.config = cfg;
  bench.active = enumerate_tasks(L, k);
  const std::size_t M = bench.active.size();

  Rng root(cfg.seed);
  Rng draw_rng = root.fork("points");
  Rng split_rng = root.fork("split");
  Rng assign_rng = root.fork("assign");

  // Tasks a category can be exposed to.
  std::vector<std::vector<int>> candidates(static_cast<std::size_t>(L));
  for (std::size_t t = 0; t < M; ++t)
    for (int c : bench.active[t]) candidates[static_cast<std::size_t>(c)].push_back(static_cast<int>(t));

  bench.train.feature_dim = static_cast<std::size_t>(d);
  bench.train.tasks.resize(M);
  for (std::size_t t = 0; t < M; ++t) bench.train.tasks[t].task_id = static_cast<int>(t);

  for (int c = 0; c < L; ++c) {
    std::vector<FeatureVector> pts(static_cast<std::size_t>(cfg.n_per_category));
    for (auto& x : pts) {
      x.resize(static_cast<std::size_t>(d));
      for (int j = 0; j < d; ++j)
        x[static_cast<std::size_t>(j)] =
            centers[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] +
            cfg.blob_stddev * draw_rng.normal();
    }
    // Stratified test split before task assignment.
    std::vector<std::size_t> idx(pts.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    split_rng.shuffle(idx);
    const std::size_t n_test = static_cast<std::size_t>(
        std::llround(cfg.test_fraction * static_cast<double>(pts.size())));
    std::vector<bool> is_test(pts.size(), false);
    for (std::size_t i = 0; i < n_test; ++i) is_test[idx[i]] = true;

    const auto& cand = candidates[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (is_test[i]) {
        bench.test_points.push_back(std::move(pts[i]));
        bench.test_labels.push_back(c);
      } else {
        const int t = cand[assign_rng.index(cand.size())];
        bench.train.tasks[static_cast<std::size_t>(t)].samples.push_back(std::move(pts[i]));
        bench.train.tasks[static_cast<std::size_t>(t)].labels.push_back(c);
      }
    }
  }

  // A task can come up empty only for tiny sample counts; deterministically
  // move one sample over from the largest eligible donor.
  for (std::size_t t = 0; t < M; ++t) {
    if (!bench.train.tasks[t].samples.empty()) continue;
    std::size_t donor = M;
    std::size_t donor_size = 1;
    int donor_cat = -1;
    for (std::size_t s = 0; s < M; ++s) {
      if (s == t || bench.train.tasks[s].samples.size() <= donor_size) continue;
      for (std::size_t i = 0; i < bench.train.tasks[s].labels.size(); ++i) {
        if (bench.active[t].count(bench.train.tasks[s].labels[i])) {
          donor = s;
          donor_size = bench.train.tasks[s].samples.size();
          donor_cat = bench.train.tasks[s].labels[i];
          break;
        }
      }
    }
    if (donor == M)
      throw std::runtime_error("task " + std::to_string(t) +
                               " received no samples; increase n_per_category");
    auto& from = bench.train.tasks[donor];
    for (std::size_t i = 0; i < from.labels.size(); ++i) {
      if (from.labels[i] == donor_cat) {
        bench.train.tasks[t].samples.push_back(std::move(from.samples[i]));
        bench.train.tasks[t].labels.push_back(from.labels[i]);
        from.samples.erase(from.samples.begin() + static_cast<std::ptrdiff_t>(i));
        from.labels.erase(from.labels.begin() + static_cast<std::ptrdiff_t>(i));
        break;
      }
    }
  }

  bench.train.reset_empirical_weights();
  return bench;
}

int ground_truth_overlap(const SynthBenchmark& b, int i, int j) {
  const auto& a = b.active.at(static_cast<std::size_t>(i));
  const auto& c = b.active.at(static_cast<std::size_t>(j));
  int n = 0;
  for (int v : a) n += c.count(v) ? 1 : 0;
  return n;
}

}  // namespace mtad::synth
