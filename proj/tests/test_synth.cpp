#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "mtad/core.hpp"
#include "mtad/synth.hpp"

using namespace mtad;
using namespace mtad::synth;

namespace {

SynthConfig config(int L, int k, int n = 60) {
  SynthConfig cfg;
  cfg.categories = L;
  cfg.feature_dim = L;
  cfg.active_per_task = k;
  cfg.n_per_category = n;
  cfg.seed = 11;
  return cfg;
}

}  // namespace

TEST_CASE("task counts match the binomial coefficients") {
  CHECK(enumerate_tasks(10, 2).size() == 45);
  CHECK(enumerate_tasks(10, 3).size() == 120);
  CHECK(enumerate_tasks(10, 4).size() == 210);
  CHECK(enumerate_tasks(10, 5).size() == 252);
  CHECK(binomial(10, 2) == 45);
  CHECK(binomial(10, 5) == 252);
}

TEST_CASE("generate produces one task per subset") {
  const auto b = generate(config(10, 2, 40));
  CHECK(b.train.tasks.size() == 45);
  CHECK(b.active.size() == 45);
  CHECK_NOTHROW(validate_collection(b.train));
}

TEST_CASE("k equal to L yields a single task holding all training samples") {
  const auto b = generate(config(4, 4, 50));
  REQUIRE(b.train.tasks.size() == 1);
  const std::size_t n_train = b.train.tasks[0].samples.size();
  CHECK(n_train + b.test_points.size() == 4 * 50);
  CHECK(b.train.tasks[0].weight == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("every training sample is exposed to exactly one task") {
  const auto b = generate(config(5, 2, 80));
  std::size_t total = 0;
  for (const auto& t : b.train.tasks) {
    total += t.samples.size();
    // Sample categories always belong to the task's active set.
    for (std::size_t i = 0; i < t.labels.size(); ++i)
      CHECK(b.active[static_cast<std::size_t>(t.task_id)].count(t.labels[i]) == 1);
  }
  const std::size_t expected_test = static_cast<std::size_t>(
      std::llround(0.2 * 80) * 5);
  CHECK(total == 5 * 80 - expected_test);
}

TEST_CASE("generation is bit-reproducible for a fixed seed") {
  const auto a = generate(config(6, 3, 30));
  const auto b = generate(config(6, 3, 30));
  REQUIRE(a.train.tasks.size() == b.train.tasks.size());
  for (std::size_t t = 0; t < a.train.tasks.size(); ++t) {
    CHECK(a.train.tasks[t].samples == b.train.tasks[t].samples);
    CHECK(a.train.tasks[t].labels == b.train.tasks[t].labels);
    CHECK(a.train.tasks[t].weight == b.train.tasks[t].weight);
  }
  CHECK(a.test_points == b.test_points);
  CHECK(a.test_labels == b.test_labels);

  auto cfg2 = config(6, 3, 30);
  cfg2.seed = 12;
  const auto c = generate(cfg2);
  CHECK(a.train.tasks[0].samples != c.train.tasks[0].samples);
}

TEST_CASE("per-task sample counts are balanced for symmetric configs") {
  const auto b = generate(config(6, 2, 400));
  // Each category's train samples spread over C(5,1) = 5 candidate tasks;
  // each task draws from 2 categories: mean = 2 * 320 / 5 = 128.
  const double mean = 2.0 * 400 * 0.8 / 5.0;
  const double sigma = std::sqrt(2.0 * 400 * 0.8 * (1.0 / 5.0) * (4.0 / 5.0));
  for (const auto& t : b.train.tasks) {
    CHECK(static_cast<double>(t.samples.size()) > mean - 3.0 * sigma);
    CHECK(static_cast<double>(t.samples.size()) < mean + 3.0 * sigma);
  }
}

TEST_CASE("nominal test points carry active categories, anomalous the rest") {
  const auto b = generate(config(5, 2, 50));
  for (int t = 0; t < 3; ++t) {
    for (int i : b.nominal_test(t))
      CHECK(b.active[static_cast<std::size_t>(t)].count(
                b.test_labels[static_cast<std::size_t>(i)]) == 1);
    for (int i : b.anomalous_test(t))
      CHECK(b.active[static_cast<std::size_t>(t)].count(
                b.test_labels[static_cast<std::size_t>(i)]) == 0);
    CHECK(b.nominal_test(t).size() + b.anomalous_test(t).size() == b.test_points.size());
  }
}

TEST_CASE("ground truth overlap") {
  const auto b = generate(config(6, 3, 30));
  CHECK(ground_truth_overlap(b, 0, 0) == 3);
  // Task 0 is {0,1,2}; find a disjoint one and a one-overlap one.
  int disjoint = -1, one = -1;
  for (std::size_t t = 1; t < b.active.size(); ++t) {
    const int ov = ground_truth_overlap(b, 0, static_cast<int>(t));
    if (ov == 0 && disjoint < 0) disjoint = static_cast<int>(t);
    if (ov == 1 && one < 0) one = static_cast<int>(t);
  }
  CHECK(disjoint >= 0);
  CHECK(one >= 0);
}

TEST_CASE("invalid configs are rejected") {
  CHECK_THROWS_AS((void)generate(config(4, 5)), std::invalid_argument);
  auto cfg = config(4, 2);
  cfg.feature_dim = 2;  // default one-hot centers need d >= L
  CHECK_THROWS_AS((void)generate(cfg), std::invalid_argument);
  cfg = config(3, 1);
  cfg.centers = {{0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}, {1.0, 0.0, 0.0}};
  CHECK_THROWS_AS((void)generate(cfg), std::invalid_argument);
}

TEST_CASE("custom centers with low dimension work") {
  SynthConfig cfg;
  cfg.categories = 3;
  cfg.feature_dim = 2;
  cfg.active_per_task = 1;
  cfg.n_per_category = 40;
  cfg.centers = {{0.0, 0.0}, {4.0, 0.0}, {0.0, 4.0}};
  cfg.seed = 2;
  const auto b = generate(cfg);
  CHECK(b.train.tasks.size() == 3);
  CHECK(b.train.feature_dim == 2);
}
