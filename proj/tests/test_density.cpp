#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "common.hpp"
#include "mtad/density.hpp"

using namespace mtad;
using namespace mtad::density;

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274;

// Gaussian with fixed outputs: identity net from a 2-entry embedding
// [mean..., logvar...] would need E = 2d; simplest is a bias-only net.
ConditionalGaussian fixed_gaussian(const std::vector<double>& mean,
                                   const std::vector<double>& logvar) {
  ConditionalGaussian m;
  m.feature_dim = static_cast<int>(mean.size());
  nn::Layer l;
  l.w = nn::Matrix(2 * m.feature_dim, 1);  // zero weights: output = bias
  l.b = mean;
  l.b.insert(l.b.end(), logvar.begin(), logvar.end());
  l.act = nn::Activation::identity;
  m.net.layers.push_back(std::move(l));
  m.embeddings.dim = 1;
  m.embeddings.rows = {{0.0}};
  return m;
}

FlowConfig small_flow_config(int blocks = 2) {
  FlowConfig cfg;
  cfg.blocks = blocks;
  cfg.conditioner_hidden = 8;
  cfg.conditioner_layers = 3;
  return cfg;
}

// All conditioning and priors zeroed: the flow is the identity map.
AffineFlow identity_flow(int d, int blocks = 2) {
  Rng rng(1);
  auto flow = make_flow(d, 1, small_flow_config(blocks), rng);
  for (auto& row : flow.conditioning) std::fill(row.begin(), row.end(), 0.0);
  for (auto& m : flow.prior_means) std::fill(m.begin(), m.end(), 0.0);
  return flow;
}

// Randomizes every free parameter (masked entries stay zero via set_params).
void randomize_flow(AffineFlow& flow, Rng& rng, double scale = 0.3) {
  std::vector<double> params(flow.param_count());
  for (double& v : params) v = scale * rng.normal();
  flow.set_params(params);
  for (auto& row : flow.conditioning)
    for (double& v : row) v = scale * rng.normal();
}

}  // namespace

TEST_CASE("gaussian logpdf closed forms") {
  const auto m1 = fixed_gaussian({0.0}, {0.0});
  CHECK(gaussian_logpdf(m1, 0, {0.0}) == doctest::Approx(-kHalfLog2Pi).epsilon(1e-12));

  const auto m2 = fixed_gaussian({1.0, -2.0}, {0.4, -0.7});
  // At the mode the quadratic term vanishes.
  CHECK(gaussian_logpdf(m2, 0, {1.0, -2.0}) ==
        doctest::Approx(-2.0 * kHalfLog2Pi - 0.5 * (0.4 - 0.7)).epsilon(1e-12));

  const auto m3 = fixed_gaussian({0.0}, {std::log(4.0)});
  CHECK(gaussian_logpdf(m3, 0, {2.0}) ==
        doctest::Approx(-2.1120857137646181).epsilon(1e-12));
}

TEST_CASE("gaussian score is maximal at the mode and falls with distance") {
  const auto m = fixed_gaussian({1.0, 2.0}, {0.0, 0.0});
  const double at_mode = density_score(m, 0, {1.0, 2.0});
  CHECK(at_mode > density_score(m, 0, {1.5, 2.0}));
  CHECK(density_score(m, 0, {1.5, 2.0}) > density_score(m, 0, {2.5, 2.0}));
  CHECK(density_score(m, 0, {1.0, 2.5}) > density_score(m, 0, {1.0, 3.5}));
}

TEST_CASE("variance floor clamps the predicted variance") {
  const auto m = fixed_gaussian({0.0}, {-40.0});  // far below the floor
  // With variance clamped to 1e-6 the density is finite.
  CHECK(std::isfinite(gaussian_logpdf(m, 0, {0.1})));
  const auto [mean, logvar] = m.predict(m.embeddings[0]);
  CHECK(logvar[0] == doctest::Approx(std::log(1e-6)).epsilon(1e-12));
}

TEST_CASE("gaussian nll gradient matches finite differences") {
  Rng rng(3);
  ConditionalGaussian model;
  model.feature_dim = 3;
  model.net = nn::make_net(2, {8, 6},
                           {nn::Activation::tanh, nn::Activation::identity}, {}, rng);
  model.embeddings.dim = 2;
  model.embeddings.rows = {{0.3, -0.6}};
  const std::vector<int> ts = {0};
  const std::vector<FeatureVector> xs = {{0.5, -0.2, 1.1}};

  const auto grads = gaussian_batch_gradient(model, ts, xs, Exec::serial);
  std::vector<double> params(model.net.param_count());
  model.net.copy_params_to(params);
  auto loss_at = [&](const std::vector<double>& p) {
    auto probe = model;
    probe.net.set_params(p);
    return -gaussian_logpdf(probe, 0, xs[0]);
  };
  const auto fd = nn::finite_difference(loss_at, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double denom = std::max({std::abs(fd[i]), std::abs(grads.net[i]), 1e-6});
    CHECK(std::abs(fd[i] - grads.net[i]) / denom < 1e-4);
  }
}

TEST_CASE("flow inverse of the identity flow is the identity") {
  const auto flow = identity_flow(3);
  const auto inv = flow_inverse(flow, 0, {0.3, -1.2, 2.0});
  CHECK(inv.u[0] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(inv.u[1] == doctest::Approx(-1.2).epsilon(1e-12));
  CHECK(inv.u[2] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(inv.log_det == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("constant log-scale flow halves the input") {
  Rng rng(1);
  auto flow = make_flow(3, 1, small_flow_config(1), rng);
  auto& cond = flow.conditioning[0];
  std::fill(cond.begin(), cond.end(), 0.0);
  const double b_al = std::atanh(std::log(2.0));
  for (std::size_t i = 0; i < 3; ++i) cond[3 * 3 + i] = b_al;  // bias_alpha block
  std::fill(flow.prior_means[0].begin(), flow.prior_means[0].end(), 0.0);

  const auto inv = flow_inverse(flow, 0, {1.0, -2.0, 4.0});
  CHECK(inv.u[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(inv.u[1] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(inv.u[2] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(inv.log_det == doctest::Approx(-3.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("identity flow logpdf reduces to the prior") {
  const auto flow = identity_flow(1);
  CHECK(flow_logpdf(flow, 0, {0.0}) == doctest::Approx(-kHalfLog2Pi).epsilon(1e-12));
}

TEST_CASE("identity flow density peaks at the prior mean") {
  Rng rng(2);
  auto flow = identity_flow(2);
  flow.prior_means[0] = {0.7, -0.4};
  const double at_mean = flow_logpdf(flow, 0, {0.7, -0.4});
  for (int i = 0; i < 20; ++i) {
    const FeatureVector x = {0.7 + rng.normal(), -0.4 + rng.normal()};
    if (x[0] == 0.7 && x[1] == -0.4) continue;
    CHECK(flow_logpdf(flow, 0, x) < at_mean);
  }
}

TEST_CASE("constant-scale flow logpdf follows the change of variables") {
  Rng rng(1);
  auto flow = make_flow(1, 1, small_flow_config(1), rng);
  std::fill(flow.conditioning[0].begin(), flow.conditioning[0].end(), 0.0);
  flow.conditioning[0][3] = std::atanh(std::log(2.0));  // bias_alpha, d = 1
  flow.prior_means[0] = {0.0};
  CHECK(flow_logpdf(flow, 0, {0.0}) ==
        doctest::Approx(-kHalfLog2Pi - std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("flow forward and inverse are mutual inverses on random flows") {
  Rng rng(17);
  for (int trial = 0; trial < 8; ++trial) {
    const int d = 1 + static_cast<int>(rng.index(4));
    auto flow = make_flow(d, 2, small_flow_config(3), rng);
    randomize_flow(flow, rng);
    for (int rep = 0; rep < 5; ++rep) {
      const int t = static_cast<int>(rng.index(2));
      FeatureVector x(static_cast<std::size_t>(d));
      for (double& v : x) v = 2.0 * rng.normal();

      const auto inv = flow_inverse(flow, t, x);
      const auto back = flow_forward(flow, t, inv.u);
      for (int i = 0; i < d; ++i)
        CHECK(back[static_cast<std::size_t>(i)] ==
              doctest::Approx(x[static_cast<std::size_t>(i)]).epsilon(1e-9));

      // And the other way around.
      std::vector<double> u(static_cast<std::size_t>(d));
      for (double& v : u) v = rng.normal();
      const auto xf = flow_forward(flow, t, u);
      const auto u2 = flow_inverse(flow, t, xf);
      for (int i = 0; i < d; ++i)
        CHECK(u2.u[static_cast<std::size_t>(i)] ==
              doctest::Approx(u[static_cast<std::size_t>(i)]).epsilon(1e-9));
    }
  }
}

TEST_CASE("autoregressive masking zeroes the upper Jacobian triangle") {
  Rng rng(23);
  const int d = 5;
  auto flow = make_flow(d, 1, small_flow_config(1), rng);  // one block, no permutation
  randomize_flow(flow, rng);
  const FeatureVector x0 = {0.2, -0.4, 0.9, 0.1, -0.8};
  const double h = 1e-6;
  for (int j = 0; j < d; ++j) {
    FeatureVector up = x0, down = x0;
    up[static_cast<std::size_t>(j)] += h;
    down[static_cast<std::size_t>(j)] -= h;
    const auto fu = flow_inverse(flow, 0, up);
    const auto fd = flow_inverse(flow, 0, down);
    for (int i = 0; i < d; ++i) {
      if (j <= i) continue;
      const double deriv = (fu.u[static_cast<std::size_t>(i)] -
                            fd.u[static_cast<std::size_t>(i)]) / (2.0 * h);
      CHECK(std::abs(deriv) < 1e-8);
    }
  }
}

TEST_CASE("flow density integrates to one") {
  Rng rng(29);

  // 1-D: fine grid over a wide interval.
  {
    auto flow = make_flow(1, 1, small_flow_config(2), rng);
    randomize_flow(flow, rng, 0.4);
    double mass = 0.0;
    const double step = 0.01;
    for (double x = -20.0; x <= 20.0; x += step)
      mass += std::exp(flow_logpdf(flow, 0, {x})) * step;
    CHECK(std::abs(mass - 1.0) < 0.02);
  }

  // 2-D: coarser grid, same bound.
  {
    auto flow = make_flow(2, 1, small_flow_config(2), rng);
    randomize_flow(flow, rng, 0.3);
    double mass = 0.0;
    const double step = 0.05;
    for (double x = -12.0; x <= 12.0; x += step)
      for (double y = -12.0; y <= 12.0; y += step)
        mass += std::exp(flow_logpdf(flow, 0, {x, y})) * step * step;
    CHECK(std::abs(mass - 1.0) < 0.02);
  }
}

TEST_CASE("flow nll gradient matches finite differences") {
  Rng rng(31);
  auto flow = make_flow(3, 2, small_flow_config(2), rng);
  randomize_flow(flow, rng, 0.2);
  const std::vector<int> ts = {1};
  const std::vector<FeatureVector> xs = {{0.4, -0.9, 0.3}};

  const auto grads = flow_batch_gradient(flow, ts, xs, Exec::serial);

  // Shared parameters.
  std::vector<double> params(flow.param_count());
  flow.copy_params_to(params);
  auto loss_at = [&](const std::vector<double>& p) {
    auto probe = flow;
    probe.set_params(p);
    return -flow_logpdf(probe, 1, xs[0]);
  };
  const auto fd = nn::finite_difference(loss_at, params);
  std::size_t live = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double denom = std::max({std::abs(fd[i]), std::abs(grads.shared[i]), 1e-6});
    CHECK(std::abs(fd[i] - grads.shared[i]) / denom < 2e-4);
    live += grads.shared[i] != 0.0;
  }
  CHECK(live > 0);

  // Conditioning row of the sampled task.
  auto cond = flow.conditioning[1];
  auto loss_at_cond = [&](const std::vector<double>& c) {
    auto probe = flow;
    probe.conditioning[1] = c;
    return -flow_logpdf(probe, 1, xs[0]);
  };
  const auto fd_cond = nn::finite_difference(loss_at_cond, cond);
  const auto& gc = grads.conditioning.at(1);
  for (std::size_t i = 0; i < cond.size(); ++i) {
    const double denom = std::max({std::abs(fd_cond[i]), std::abs(gc[i]), 1e-6});
    CHECK(std::abs(fd_cond[i] - gc[i]) / denom < 2e-4);
  }
}

TEST_CASE("gaussian training recovers the mle on one standard-normal task") {
  Rng data_rng(41);
  TaskCollection c;
  c.feature_dim = 2;
  TaskDataset td;
  td.task_id = 0;
  for (int i = 0; i < 10000; ++i) td.samples.push_back({data_rng.normal(), data_rng.normal()});
  td.weight = 1.0;
  c.tasks.push_back(std::move(td));

  EmbeddingTable emb;
  emb.dim = 2;
  emb.rows = {{1.0, 0.0}};

  DensityConfig cfg;
  cfg.train.epochs = 40;
  cfg.train.batch_size = 256;
  cfg.train.seed = 7;
  cfg.train_embeddings = false;
  auto [model, trace] = train_gaussian(c, emb, cfg);

  const auto [mean, logvar] = model.predict(emb.rows[0]);
  for (int i = 0; i < 2; ++i) {
    CHECK(std::abs(mean[static_cast<std::size_t>(i)]) < 0.05);
    CHECK(std::abs(std::exp(logvar[static_cast<std::size_t>(i)]) - 1.0) < 0.1);
  }

  // Optimization sanity: early epochs strictly improve.
  CHECK(trace.train_loss[2] < trace.train_loss[0]);
  CHECK(trace.val_loss[trace.best_epoch] <= trace.val_loss[0]);
}

TEST_CASE("flow training approaches the differential-entropy optimum") {
  Rng data_rng(43);
  TaskCollection c;
  c.feature_dim = 2;
  TaskDataset td;
  td.task_id = 0;
  for (int i = 0; i < 4000; ++i)
    td.samples.push_back({0.5 + data_rng.normal(), -1.0 + data_rng.normal()});
  td.weight = 1.0;
  c.tasks.push_back(std::move(td));

  DensityConfig cfg;
  cfg.train.epochs = 15;
  cfg.train.batch_size = 256;
  cfg.train.seed = 5;
  cfg.flow = small_flow_config(3);
  cfg.flow.conditioner_hidden = 16;
  auto [flow, trace] = train_flow(c, cfg);

  double nll = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < c.tasks[0].samples.size(); i += 4) {
    nll += -flow_logpdf(flow, 0, c.tasks[0].samples[i]);
    ++count;
  }
  nll /= count;
  const double optimum = 0.5 * 2.0 * (1.0 + std::log(2.0 * M_PI));
  CHECK(nll < optimum + 0.2);
  CHECK(nll > optimum - 0.2);  // below the entropy bound would mean overfit scoring
}

TEST_CASE("a single gaussian fails on bimodal data where the flow does not") {
  Rng data_rng(47);
  TaskCollection c;
  c.feature_dim = 1;
  TaskDataset td;
  td.task_id = 0;
  for (int i = 0; i < 3000; ++i) {
    const double mode = (i % 2 == 0) ? -3.0 : 3.0;
    td.samples.push_back({mode + 0.5 * data_rng.normal()});
  }
  td.weight = 1.0;
  c.tasks.push_back(std::move(td));

  EmbeddingTable emb;
  emb.dim = 1;
  emb.rows = {{1.0}};
  DensityConfig gauss_cfg;
  gauss_cfg.train.epochs = 30;
  gauss_cfg.train.batch_size = 256;
  gauss_cfg.train.seed = 3;
  gauss_cfg.train_embeddings = false;
  auto [gauss, gtrace] = train_gaussian(c, emb, gauss_cfg);

  DensityConfig flow_cfg;
  flow_cfg.train.epochs = 20;
  flow_cfg.train.batch_size = 256;
  flow_cfg.train.seed = 3;
  flow_cfg.flow = small_flow_config(3);
  flow_cfg.flow.conditioner_hidden = 16;
  auto [flow, ftrace] = train_flow(c, flow_cfg);

  // The moment-matched gaussian puts its peak at the empty midpoint; the
  // flow ranks the modes above the midpoint.
  const double g_mode = density_score(gauss, 0, {3.0});
  const double g_mid = density_score(gauss, 0, {0.0});
  CHECK(g_mode <= g_mid + 1e-9);
  const double f_mode = std::max(density_score(flow, 0, {3.0}),
                                 density_score(flow, 0, {-3.0}));
  const double f_mid = density_score(flow, 0, {0.0});
  CHECK(f_mode > f_mid);
}
