#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "common.hpp"
#include "mtad/clr.hpp"
#include "mtad/eval.hpp"

using namespace mtad;
using namespace mtad::clr;

namespace {

TrainConfig fast_config(std::uint64_t seed, int epochs = 10) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 128;
  cfg.embed_dim = 4;
  cfg.hidden = {32, 16};
  cfg.hidden_dropout = {0.0, 0.0};
  cfg.seed = seed;
  return cfg;
}

// Closed-form log-ratio for task 0 of the two-gaussian fixture: q0 = N(1,1)
// against p = (N(1,1) + N(-1,1)) / 2.
double two_gaussian_ratio(double x) {
  const double phi_p = std::exp(-0.5 * (x - 1.0) * (x - 1.0));
  const double phi_m = std::exp(-0.5 * (x + 1.0) * (x + 1.0));
  return std::log(2.0 * phi_p / (phi_p + phi_m));
}

}  // namespace

TEST_CASE("single task batches always draw task zero") {
  TaskCollection c;
  c.feature_dim = 1;
  TaskDataset t;
  t.task_id = 0;
  t.samples = {{1.0}, {2.0}, {3.0}};
  t.weight = 1.0;
  c.tasks.push_back(t);
  Rng rng(3);
  const auto batch = sample_batch(c, 64, rng);
  for (int id : batch.task_ids) CHECK(id == 0);
}

TEST_CASE("task draws follow the weights") {
  Rng data_rng(1);
  auto c = testutil::two_gaussian_tasks(0.0, 5.0, 200, data_rng);
  c.tasks[0].weight = 0.9;
  c.tasks[1].weight = 0.1;
  Rng rng(42);
  const auto batch = sample_batch(c, 100000, rng);
  double freq0 = 0.0;
  for (int id : batch.task_ids) freq0 += id == 0;
  freq0 /= static_cast<double>(batch.size());
  CHECK(std::abs(freq0 - 0.9) < 0.01);
}

TEST_CASE("negatives realize the population mixture") {
  TaskCollection c;
  c.feature_dim = 1;
  for (int t = 0; t < 2; ++t) {
    TaskDataset td;
    td.task_id = t;
    td.samples = {{t == 0 ? -1.0 : 1.0}};
    td.weight = 0.5;
    c.tasks.push_back(td);
  }
  Rng rng(7);
  const auto batch = sample_batch(c, 50000, rng);
  double freq_minus = 0.0;
  for (const auto& x : batch.negatives) freq_minus += x[0] < 0.0;
  freq_minus /= static_cast<double>(batch.size());
  CHECK(std::abs(freq_minus - 0.5) < 0.01);
}

TEST_CASE("empty collection is rejected") {
  TaskCollection c;
  Rng rng(1);
  CHECK_THROWS_AS((void)sample_batch(c, 8, rng), std::invalid_argument);
}

TEST_CASE("logistic loss at zero scores is 2 ln 2") {
  const std::vector<double> z = {0.0, 0.0, 0.0};
  CHECK(logistic_loss(z, z) == doctest::Approx(1.3862943611198906).epsilon(1e-12));
}

TEST_CASE("logistic loss is stable for huge scores") {
  const std::vector<double> pos = {1000.0};
  const std::vector<double> neg = {-1000.0};
  const double l = logistic_loss(pos, neg);
  CHECK(std::isfinite(l));
  CHECK(l == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("logistic loss scalar case") {
  const std::vector<double> pos = {1.0};
  const std::vector<double> neg = {-1.0};
  // 2 log(1 + e^-1), evaluated independently.
  CHECK(logistic_loss(pos, neg) == doctest::Approx(0.6265233750364456).epsilon(1e-12));
}

TEST_CASE("logistic loss is non-negative on random scores") {
  Rng rng(123);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(20);
    std::vector<double> pos(n), neg(n);
    for (std::size_t i = 0; i < n; ++i) {
      pos[i] = rng.uniform(-50.0, 50.0);
      neg[i] = rng.uniform(-50.0, 50.0);
    }
    CHECK(logistic_loss(pos, neg) >= 0.0);
  }
}

TEST_CASE("training loss drops after one epoch on separated tasks") {
  Rng data_rng(11);
  TaskCollection c;
  c.feature_dim = 2;
  for (int t = 0; t < 2; ++t) {
    TaskDataset td;
    td.task_id = t;
    const double cx = t == 0 ? 3.0 : -3.0;
    for (int i = 0; i < 5000; ++i)
      td.samples.push_back({cx + data_rng.normal(), data_rng.normal()});
    td.weight = 0.5;
    c.tasks.push_back(std::move(td));
  }
  auto [model, trace] = estimate_clr(c, std::nullopt, fast_config(5, 3));
  REQUIRE(trace.train_loss.size() == 3);
  CHECK(trace.train_loss[1] < trace.train_loss[0]);
}

TEST_CASE("self-contrast on a single task is uninformative") {
  Rng data_rng(21);
  TaskCollection c;
  c.feature_dim = 1;
  TaskDataset td;
  td.task_id = 0;
  for (int i = 0; i < 5000; ++i) td.samples.push_back({data_rng.normal()});
  td.weight = 1.0;
  c.tasks.push_back(std::move(td));

  auto [model, trace] = estimate_clr(c, std::nullopt, fast_config(9, 8));

  Rng fresh(2222);
  std::vector<double> a(1000), b(1000);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = model.score(0, {fresh.normal()});
    b[i] = model.score(0, {fresh.normal()});
  }
  const double v = eval::auc(a, b);
  CHECK(v > 0.45);
  CHECK(v < 0.55);
}

TEST_CASE("zero and random embedding inits both finish with finite loss") {
  Rng data_rng(31);
  auto c = testutil::two_gaussian_tasks(-2.0, 2.0, 500, data_rng);

  EmbeddingTable zeros;
  zeros.dim = 4;
  zeros.rows.assign(2, std::vector<double>(4, 0.0));
  auto [m1, t1] = estimate_clr(c, zeros, fast_config(1, 2));
  CHECK(std::isfinite(t1.train_loss.back()));

  auto [m2, t2] = estimate_clr(c, std::nullopt, fast_config(1, 2));
  CHECK(std::isfinite(t2.train_loss.back()));
}

TEST_CASE("one step updates only the sampled tasks' embeddings") {
  Rng data_rng(41);
  TaskCollection c;
  c.feature_dim = 1;
  for (int t = 0; t < 12; ++t) {
    TaskDataset td;
    td.task_id = t;
    for (int i = 0; i < 20; ++i) td.samples.push_back({t + 0.1 * data_rng.normal()});
    td.weight = 1.0 / 12.0;
    c.tasks.push_back(std::move(td));
  }
  auto cfg = fast_config(77, 1);
  cfg.batch_size = 6;  // leaves most of the 12 tasks unsampled
  ClrTrainer trainer(c, std::nullopt, cfg);
  const EmbeddingTable before = trainer.model().embeddings;
  trainer.train_one_batch();
  const std::set<int> sampled(trainer.last_batch().task_ids.begin(),
                              trainer.last_batch().task_ids.end());
  const EmbeddingTable& after = trainer.model().embeddings;
  REQUIRE(!sampled.empty());
  REQUIRE(sampled.size() < 12);
  for (int t = 0; t < 12; ++t) {
    if (sampled.count(t)) {
      CHECK(after[static_cast<std::size_t>(t)] != before[static_cast<std::size_t>(t)]);
    } else {
      CHECK(after[static_cast<std::size_t>(t)] == before[static_cast<std::size_t>(t)]);
    }
  }
}

TEST_CASE("scores are deterministic and label-blind") {
  Rng data_rng(51);
  auto c = testutil::two_gaussian_tasks(-1.0, 1.0, 400, data_rng);
  c.tasks[0].labels.assign(c.tasks[0].samples.size(), 0);
  c.tasks[1].labels.assign(c.tasks[1].samples.size(), 1);

  auto [model, trace] = estimate_clr(c, std::nullopt, fast_config(3, 2));
  const double s1 = model.score(1, {0.25});
  const double s2 = model.score(1, {0.25});
  CHECK(s1 == s2);

  // Permuting labels must not change the trained parameters.
  auto c2 = c;
  for (auto& task : c2.tasks)
    for (auto& l : task.labels) l = 1 - l;
  auto [model2, trace2] = estimate_clr(c2, std::nullopt, fast_config(3, 2));
  std::vector<double> p1(model.net.param_count()), p2(model2.net.param_count());
  model.net.copy_params_to(p1);
  model2.net.copy_params_to(p2);
  CHECK(p1 == p2);
  CHECK(model.embeddings.rows == model2.embeddings.rows);
}

TEST_CASE("same seed reproduces the trained model bit for bit") {
  Rng data_rng(61);
  auto c = testutil::two_gaussian_tasks(-1.0, 1.0, 300, data_rng);
  auto [m1, t1] = estimate_clr(c, std::nullopt, fast_config(8, 3));
  auto [m2, t2] = estimate_clr(c, std::nullopt, fast_config(8, 3));
  std::vector<double> p1(m1.net.param_count()), p2(m2.net.param_count());
  m1.net.copy_params_to(p1);
  m2.net.copy_params_to(p2);
  CHECK(p1 == p2);
  CHECK(m1.embeddings.rows == m2.embeddings.rows);
  CHECK(t1.train_loss == t2.train_loss);
  CHECK(t1.val_loss == t2.val_loss);
  CHECK(t1.best_epoch == t2.best_epoch);
}

TEST_CASE("unknown task id is rejected at scoring time") {
  Rng data_rng(66);
  auto c = testutil::two_gaussian_tasks(-1.0, 1.0, 50, data_rng);
  auto cfg = fast_config(2, 1);
  cfg.batch_size = 16;
  auto [model, trace] = estimate_clr(c, std::nullopt, cfg);
  CHECK_THROWS_AS((void)model.score(5, {0.0}), std::invalid_argument);
}

TEST_CASE("joint scorer recovers the two-gaussian log ratio shape") {
  Rng data_rng(71);
  auto c = testutil::two_gaussian_tasks(1.0, -1.0, 5000, data_rng);
  auto cfg = fast_config(13, 25);
  auto [model, trace] = estimate_clr(c, std::nullopt, cfg);

  // Monotone increasing for task 0 on [-2, 2] within a small slack.
  double prev = -1e9;
  for (double x = -2.0; x <= 2.001; x += 0.5) {
    const double s = model.score(0, {x});
    CHECK(s > prev - 0.05);
    prev = s;
  }
  CHECK(model.score(0, {2.0}) > model.score(0, {-2.0}) + 0.5);

  // The true ratio vanishes at the midpoint by symmetry.
  CHECK(two_gaussian_ratio(0.0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(std::abs(model.score(0, {0.0})) < 0.15);
}

TEST_CASE("single-task scorer: identical distributions give a flat scorer") {
  Rng rng(81);
  std::vector<FeatureVector> pos, neg;
  for (int i = 0; i < 20000; ++i) {
    pos.push_back({rng.normal()});
    neg.push_back({rng.normal()});
  }
  auto cfg = fast_config(4, 12);
  auto [scorer, trace] = score_single_task(pos, neg, cfg);
  for (double x = -2.0; x <= 2.001; x += 0.25)
    CHECK(std::abs(scorer.score({x})) < 0.1);
}

TEST_CASE("single-task scorer separates disjoint point masses") {
  std::vector<FeatureVector> pos(50, FeatureVector{1.0});
  std::vector<FeatureVector> neg(50, FeatureVector{-1.0});
  auto cfg = fast_config(6, 10);
  cfg.batch_size = 32;
  cfg.val_fraction = 0.0;
  auto [scorer, trace] = score_single_task(pos, neg, cfg);
  CHECK(scorer.score({1.0}) > scorer.score({-1.0}));
}

TEST_CASE("single-task scorer converges to the closed-form gaussian ratio") {
  // Grid error against log q/p for q = N(1,1), p = N(0,1) shrinks as the
  // pair count grows; tolerances allow one re-seed of sampling noise.
  auto run = [](std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<FeatureVector> pos, neg;
    for (std::size_t i = 0; i < n; ++i) {
      pos.push_back({1.0 + rng.normal()});
      neg.push_back({rng.normal()});
    }
    auto cfg = fast_config(seed, 20);
    cfg.batch_size = 256;
    auto [scorer, trace] = score_single_task(pos, neg, cfg);
    return eval::ratio_recovery_error([&](double x) { return scorer.score({x}); },
                                      {1.0, 1.0}, {0.0, 1.0}, -2.0, 2.0, 0.1);
  };
  auto chain = [&](std::uint64_t seed) {
    const double e1 = run(1000, seed);
    const double e2 = run(10000, seed + 1);
    const double e3 = run(50000, seed + 2);
    return e2 <= e1 + 0.03 && e3 <= e2 + 0.03 && e3 < e1 && e3 < 0.15;
  };
  CHECK((chain(100) || chain(200)));
}
