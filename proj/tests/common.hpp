#pragma once

// Helpers shared by the unit suites and the acceptance runner.

#include <cmath>
#include <vector>

#include "mtad/core.hpp"
#include "mtad/nn.hpp"
#include "mtad/rng.hpp"

namespace testutil {

using mtad::Rng;

// Random small net: up to `max_layers` layers of width <= max_units, mixed
// activations, no dropout (finite differences need a deterministic path).
inline mtad::nn::DenseNet random_net(Rng& rng, int input_dim, int max_layers = 3,
                                     int max_units = 16) {
  const int L = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(max_layers)));
  std::vector<int> widths;
  std::vector<mtad::nn::Activation> acts;
  for (int l = 0; l < L; ++l) {
    widths.push_back(1 + static_cast<int>(rng.index(static_cast<std::size_t>(max_units))));
    const std::size_t a = rng.index(3);
    acts.push_back(a == 0 ? mtad::nn::Activation::identity
                          : (a == 1 ? mtad::nn::Activation::relu
                                    : mtad::nn::Activation::tanh));
  }
  return mtad::nn::make_net(input_dim, widths, acts, {}, rng);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  bool near_kink = false;  // a relu preactivation sat within the FD step
};

// Compares backward() against central finite differences of the scalar
// loss r . f(x) over every parameter. Flags runs where a relu preactivation
// sits close enough to zero for the finite difference to straddle the kink.
inline GradCheckResult gradient_check(const mtad::nn::DenseNet& net_in,
                                      const std::vector<double>& x, Rng& rng,
                                      double h = 1e-5) {
  namespace nn = mtad::nn;
  nn::DenseNet net = net_in;
  std::vector<double> r(static_cast<std::size_t>(net.output_dim()));
  for (double& v : r) v = rng.uniform(-1.0, 1.0);

  GradCheckResult result;
  {
    nn::Tape tape;
    nn::forward(net, x, false, nullptr, &tape);
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
      if (net.layers[li].act != nn::Activation::relu) continue;
      for (double z : tape.preact[li])
        if (std::abs(z) < 1e-4) result.near_kink = true;
    }
  }

  const std::size_t np = net.param_count();
  std::vector<double> analytic(np, 0.0);
  {
    nn::Tape tape;
    nn::forward(net, x, false, nullptr, &tape);
    nn::backward(net, tape, r, analytic);
  }

  std::vector<double> params(np);
  net.copy_params_to(params);
  auto loss_at = [&](const std::vector<double>& p) {
    net.set_params(p);
    const auto out = nn::forward(net, x);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += r[i] * out[i];
    return s;
  };
  const auto fd = mtad::nn::finite_difference(loss_at, params, h);
  net.set_params(params);

  for (std::size_t i = 0; i < np; ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(fd[i]), 1e-6});
    result.max_rel_error = std::max(result.max_rel_error,
                                    std::abs(analytic[i] - fd[i]) / denom);
  }
  return result;
}

// Two-task 1-D collection: task 0 ~ N(mu0, 1), task 1 ~ N(mu1, 1), equal
// weights.
inline mtad::TaskCollection two_gaussian_tasks(double mu0, double mu1,
                                               std::size_t n_per_task, Rng& rng) {
  mtad::TaskCollection c;
  c.feature_dim = 1;
  for (int t = 0; t < 2; ++t) {
    mtad::TaskDataset task;
    task.task_id = t;
    const double mu = t == 0 ? mu0 : mu1;
    for (std::size_t i = 0; i < n_per_task; ++i)
      task.samples.push_back({mu + rng.normal()});
    task.weight = 0.5;
    c.tasks.push_back(std::move(task));
  }
  return c;
}

}  // namespace testutil
