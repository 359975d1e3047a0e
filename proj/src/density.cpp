#include "mtad/density.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "mtad/parallel.hpp"

namespace mtad::density {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;

int draw_cumulative(const std::vector<double>& cum, Rng& rng) {
  const double u = rng.u01() * cum.back();
  const auto it = std::upper_bound(cum.begin(), cum.end(), u);
  return static_cast<int>(std::min<std::size_t>(
      static_cast<std::size_t>(it - cum.begin()), cum.size() - 1));
}
}  // namespace

// ---------------------------------------------------------------------------
// Conditional Gaussian
// ---------------------------------------------------------------------------

std::pair<std::vector<double>, std::vector<double>> ConditionalGaussian::predict(
    std::span<const double> e) const {
  const auto out = nn::forward(net, e);
  const std::size_t d = static_cast<std::size_t>(feature_dim);
  std::vector<double> mean(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(d));
  std::vector<double> logvar(out.begin() + static_cast<std::ptrdiff_t>(d), out.end());
  const double floor = std::log(variance_floor);
  for (double& s : logvar) s = std::max(s, floor);
  return {std::move(mean), std::move(logvar)};
}

double gaussian_logpdf(const ConditionalGaussian& model, std::span<const double> e,
                       const FeatureVector& x) {
  if (x.size() != static_cast<std::size_t>(model.feature_dim))
    throw std::invalid_argument("sample length does not match model feature dim");
  const auto [mean, logvar] = model.predict(e);
  double lp = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = x[i] - mean[i];
    lp += -0.5 * kLog2Pi - 0.5 * logvar[i] - diff * diff / (2.0 * std::exp(logvar[i]));
  }
  return lp;
}

double gaussian_logpdf(const ConditionalGaussian& model, int task_id,
                       const FeatureVector& x) {
  if (task_id < 0 || static_cast<std::size_t>(task_id) >= model.embeddings.size())
    throw std::invalid_argument("unknown task id " + std::to_string(task_id));
  return gaussian_logpdf(model, model.embeddings[static_cast<std::size_t>(task_id)], x);
}

// ---------------------------------------------------------------------------
// Masked conditioner nets
// ---------------------------------------------------------------------------

std::size_t MaskedNet::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < w.size(); ++l) n += w[l].data.size() + b[l].size();
  return n;
}

void MaskedNet::copy_params_to(std::span<double> out) const {
  std::size_t k = 0;
  for (std::size_t l = 0; l < w.size(); ++l) {
    for (double v : w[l].data) out[k++] = v;
    for (double v : b[l]) out[k++] = v;
  }
}

void MaskedNet::set_params(std::span<const double> in) {
  std::size_t k = 0;
  for (std::size_t l = 0; l < w.size(); ++l) {
    for (std::size_t i = 0; i < w[l].data.size(); ++i)
      w[l].data[i] = in[k++] * mask[l].data[i];
    for (double& v : b[l]) v = in[k++];
  }
}

std::vector<double> MaskedNet::forward(std::span<const double> x, Tape* tape) const {
  if (tape) {
    tape->inputs.assign(w.size(), {});
    tape->preact.assign(w.size(), {});
  }
  std::vector<double> a(x.begin(), x.end());
  for (std::size_t l = 0; l < w.size(); ++l) {
    if (tape) tape->inputs[l] = a;
    std::vector<double> z(static_cast<std::size_t>(w[l].rows));
    for (int r = 0; r < w[l].rows; ++r) {
      double s = b[l][static_cast<std::size_t>(r)];
      const double* row = w[l].data.data() + static_cast<std::size_t>(r) * w[l].cols;
      for (int c = 0; c < w[l].cols; ++c) s += row[c] * a[static_cast<std::size_t>(c)];
      z[static_cast<std::size_t>(r)] = s;
    }
    if (tape) tape->preact[l] = z;
    const bool last = (l + 1 == w.size());
    if (last) {
      a = std::move(z);
    } else {
      a.resize(z.size());
      for (std::size_t i = 0; i < z.size(); ++i) a[i] = z[i] > 0.0 ? z[i] : 0.0;
    }
  }
  return a;
}

std::vector<double> MaskedNet::backward(const Tape& tape, std::vector<double> upstream,
                                        std::span<double> grad_flat) const {
  std::vector<std::size_t> offset(w.size());
  std::size_t k = 0;
  for (std::size_t l = 0; l < w.size(); ++l) {
    offset[l] = k;
    k += w[l].data.size() + b[l].size();
  }
  std::vector<double> d = std::move(upstream);
  for (std::size_t l = w.size(); l-- > 0;) {
    const bool last = (l + 1 == w.size());
    const auto& z = tape.preact[l];
    const auto& in = tape.inputs[l];
    std::vector<double> dz(static_cast<std::size_t>(w[l].rows));
    for (int r = 0; r < w[l].rows; ++r) {
      const std::size_t ri = static_cast<std::size_t>(r);
      dz[ri] = last ? d[ri] : (z[ri] > 0.0 ? d[ri] : 0.0);
    }
    double* gw = grad_flat.data() + offset[l];
    double* gb = gw + w[l].data.size();
    for (int r = 0; r < w[l].rows; ++r) {
      const double dzr = dz[static_cast<std::size_t>(r)];
      const std::size_t base = static_cast<std::size_t>(r) * w[l].cols;
      for (int c = 0; c < w[l].cols; ++c)
        gw[base + static_cast<std::size_t>(c)] +=
            dzr * in[static_cast<std::size_t>(c)] * mask[l].data[base + static_cast<std::size_t>(c)];
      gb[r] += dzr;
    }
    std::vector<double> dprev(static_cast<std::size_t>(w[l].cols), 0.0);
    for (int r = 0; r < w[l].rows; ++r) {
      const double dzr = dz[static_cast<std::size_t>(r)];
      const double* row = w[l].data.data() + static_cast<std::size_t>(r) * w[l].cols;
      for (int c = 0; c < w[l].cols; ++c) dprev[static_cast<std::size_t>(c)] += row[c] * dzr;
    }
    d = std::move(dprev);
  }
  return d;
}

MaskedNet make_masked_net(int d, int hidden, int layers, Rng& rng) {
  if (layers < 2) throw std::invalid_argument("masked net needs >= 2 layers");
  MaskedNet net;

  // MADE degrees: inputs 1..d, hidden units cycle over 1..d-1 (all zero for
  // d = 1, where outputs may depend on nothing), outputs 1..d with a strict
  // comparison so output i sees only inputs < i.
  std::vector<int> in_deg(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) in_deg[static_cast<std::size_t>(i)] = i + 1;
  auto hidden_degrees = [&](int width) {
    std::vector<int> deg(static_cast<std::size_t>(width));
    for (int i = 0; i < width; ++i)
      deg[static_cast<std::size_t>(i)] = d > 1 ? 1 + (i % (d - 1)) : 0;
    return deg;
  };

  std::vector<int> prev = in_deg;
  for (int l = 0; l < layers; ++l) {
    const bool last = (l + 1 == layers);
    const int width = last ? d : hidden;
    nn::Matrix wm(width, static_cast<int>(prev.size()));
    nn::Matrix mk(width, static_cast<int>(prev.size()));
    std::vector<int> deg = last ? in_deg : hidden_degrees(width);
    const double bound = std::sqrt(6.0 / (prev.size() + static_cast<std::size_t>(width)));
    for (int r = 0; r < width; ++r)
      for (int c = 0; c < static_cast<int>(prev.size()); ++c) {
        const bool keep = last ? deg[static_cast<std::size_t>(r)] > prev[static_cast<std::size_t>(c)]
                               : deg[static_cast<std::size_t>(r)] >= prev[static_cast<std::size_t>(c)];
        mk(r, c) = keep ? 1.0 : 0.0;
        wm(r, c) = keep && !last ? rng.uniform(-bound, bound) : 0.0;
      }
    net.w.push_back(std::move(wm));
    net.mask.push_back(std::move(mk));
    net.b.emplace_back(static_cast<std::size_t>(width), 0.0);
    prev = std::move(deg);
  }
  return net;
}

// ---------------------------------------------------------------------------
// Affine flow
// ---------------------------------------------------------------------------

std::size_t AffineFlow::param_count() const {
  std::size_t n = 0;
  for (const auto& blk : blocks)
    n += blk.mu_net.param_count() + blk.alpha_net.param_count() +
         blk.act_log_scale.size() + blk.act_shift.size();
  return n;
}

void AffineFlow::copy_params_to(std::span<double> out) const {
  std::size_t k = 0;
  for (const auto& blk : blocks) {
    blk.mu_net.copy_params_to(out.subspan(k, blk.mu_net.param_count()));
    k += blk.mu_net.param_count();
    blk.alpha_net.copy_params_to(out.subspan(k, blk.alpha_net.param_count()));
    k += blk.alpha_net.param_count();
    for (double v : blk.act_log_scale) out[k++] = v;
    for (double v : blk.act_shift) out[k++] = v;
  }
}

void AffineFlow::set_params(std::span<const double> in) {
  std::size_t k = 0;
  for (auto& blk : blocks) {
    blk.mu_net.set_params(in.subspan(k, blk.mu_net.param_count()));
    k += blk.mu_net.param_count();
    blk.alpha_net.set_params(in.subspan(k, blk.alpha_net.param_count()));
    k += blk.alpha_net.param_count();
    for (double& v : blk.act_log_scale) v = in[k++];
    for (double& v : blk.act_shift) v = in[k++];
  }
}

AffineFlow make_flow(int feature_dim, int num_tasks, const FlowConfig& cfg, Rng& rng) {
  if (feature_dim < 1) throw std::invalid_argument("feature_dim must be positive");
  if (num_tasks < 1) throw std::invalid_argument("flow needs at least one task");
  AffineFlow flow;
  flow.feature_dim = feature_dim;
  flow.alpha_clamp = cfg.alpha_clamp;
  for (int k = 0; k < cfg.blocks; ++k) {
    FlowBlock blk;
    blk.mu_net = make_masked_net(feature_dim, cfg.conditioner_hidden,
                                 cfg.conditioner_layers, rng);
    blk.alpha_net = make_masked_net(feature_dim, cfg.conditioner_hidden,
                                    cfg.conditioner_layers, rng);
    blk.act_log_scale.assign(static_cast<std::size_t>(feature_dim), 0.0);
    blk.act_shift.assign(static_cast<std::size_t>(feature_dim), 0.0);
    blk.reverse = (k % 2) == 1;
    flow.blocks.push_back(std::move(blk));
  }
  // Conditioning scales start away from zero: at exactly zero the
  // conditioner nets would receive no gradient.
  flow.conditioning.resize(static_cast<std::size_t>(num_tasks));
  for (auto& row : flow.conditioning) {
    row.resize(flow.cond_dim());
    const std::size_t d = static_cast<std::size_t>(feature_dim);
    for (std::size_t k = 0; k < flow.blocks.size(); ++k) {
      double* blk = row.data() + k * 4 * d;
      for (std::size_t i = 0; i < d; ++i) {
        blk[0 * d + i] = 0.5 + 0.1 * rng.normal();  // scale_mu
        blk[1 * d + i] = 0.1 * rng.normal();        // bias_mu
        blk[2 * d + i] = 0.5 + 0.1 * rng.normal();  // scale_alpha
        blk[3 * d + i] = 0.1 * rng.normal();        // bias_alpha
      }
    }
  }
  flow.prior_means.resize(static_cast<std::size_t>(num_tasks));
  for (auto& m : flow.prior_means) {
    m.resize(static_cast<std::size_t>(feature_dim));
    for (double& v : m) v = rng.uniform(-cfg.prior_mean_range, cfg.prior_mean_range);
  }
  return flow;
}

namespace {

struct BlockTrace {
  std::vector<double> p;                   // block input after permutation
  MaskedNet::Tape mu_tape, alpha_tape;
  std::vector<double> mu_raw, alpha_raw;
  std::vector<double> a;                   // conditioned, clamped log-scale
  std::vector<double> a_pre;               // before clamping
  std::vector<double> w;                   // after the affine inverse
};

// Normalizing pass through one block. cond points at the task's
// [scale_mu, bias_mu, scale_alpha, bias_alpha] slice for this block.
std::vector<double> block_inverse(const FlowBlock& blk, const double* cond,
                                  double clamp, std::vector<double> v,
                                  double& log_det, BlockTrace* trace) {
  const std::size_t d = v.size();
  if (blk.reverse) std::reverse(v.begin(), v.end());
  if (trace) trace->p = v;

  MaskedNet::Tape mu_tape, alpha_tape;
  auto mu_raw = blk.mu_net.forward(v, trace ? &trace->mu_tape : &mu_tape);
  auto alpha_raw = blk.alpha_net.forward(v, trace ? &trace->alpha_tape : &alpha_tape);

  const double* sc_mu = cond;
  const double* b_mu = cond + d;
  const double* sc_al = cond + 2 * d;
  const double* b_al = cond + 3 * d;

  std::vector<double> w(d), a(d), a_pre(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double mu = mu_raw[i] * std::tanh(sc_mu[i]) + std::tanh(b_mu[i]);
    a_pre[i] = alpha_raw[i] * std::tanh(sc_al[i]) + std::tanh(b_al[i]);
    a[i] = std::clamp(a_pre[i], -clamp, clamp);
    w[i] = (v[i] - mu) * std::exp(-a[i]);
    log_det -= a[i];
  }
  std::vector<double> y(d);
  for (std::size_t i = 0; i < d; ++i) {
    y[i] = std::exp(blk.act_log_scale[i]) * w[i] + blk.act_shift[i];
    log_det += blk.act_log_scale[i];
  }
  if (trace) {
    trace->mu_raw = std::move(mu_raw);
    trace->alpha_raw = std::move(alpha_raw);
    trace->a = std::move(a);
    trace->a_pre = std::move(a_pre);
    trace->w = std::move(w);
  }
  return y;
}

FlowInverse inverse_pass(const AffineFlow& flow, const std::vector<double>& cond,
                         const FeatureVector& x, std::vector<BlockTrace>* traces) {
  if (x.size() != static_cast<std::size_t>(flow.feature_dim))
    throw std::invalid_argument("sample length does not match flow dim");
  const std::size_t d = x.size();
  FlowInverse out;
  out.u.assign(x.begin(), x.end());
  if (traces) traces->assign(flow.blocks.size(), {});
  for (std::size_t k = 0; k < flow.blocks.size(); ++k) {
    out.u = block_inverse(flow.blocks[k], cond.data() + k * 4 * d, flow.alpha_clamp,
                          std::move(out.u), out.log_det,
                          traces ? &(*traces)[k] : nullptr);
  }
  return out;
}

}  // namespace

FlowInverse flow_inverse(const AffineFlow& flow, int task_id, const FeatureVector& x) {
  if (task_id < 0 || task_id >= flow.num_tasks())
    throw std::invalid_argument("unknown task id " + std::to_string(task_id));
  return inverse_pass(flow, flow.conditioning[static_cast<std::size_t>(task_id)], x,
                      nullptr);
}

std::vector<double> flow_forward(const AffineFlow& flow, int task_id,
                                 std::span<const double> u) {
  if (task_id < 0 || task_id >= flow.num_tasks())
    throw std::invalid_argument("unknown task id " + std::to_string(task_id));
  const std::size_t d = static_cast<std::size_t>(flow.feature_dim);
  const auto& cond = flow.conditioning[static_cast<std::size_t>(task_id)];
  std::vector<double> v(u.begin(), u.end());
  for (std::size_t k = flow.blocks.size(); k-- > 0;) {
    const FlowBlock& blk = flow.blocks[k];
    const double* c = cond.data() + k * 4 * d;
    const double* sc_mu = c;
    const double* b_mu = c + d;
    const double* sc_al = c + 2 * d;
    const double* b_al = c + 3 * d;

    // Undo actnorm, then generate dimension by dimension.
    std::vector<double> w(d), p(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      w[i] = (v[i] - blk.act_shift[i]) * std::exp(-blk.act_log_scale[i]);
    for (std::size_t i = 0; i < d; ++i) {
      const auto mu_raw = blk.mu_net.forward(p);
      const auto alpha_raw = blk.alpha_net.forward(p);
      const double mu = mu_raw[i] * std::tanh(sc_mu[i]) + std::tanh(b_mu[i]);
      const double a = std::clamp(alpha_raw[i] * std::tanh(sc_al[i]) + std::tanh(b_al[i]),
                                  -flow.alpha_clamp, flow.alpha_clamp);
      p[i] = w[i] * std::exp(a) + mu;
    }
    if (blk.reverse) std::reverse(p.begin(), p.end());
    v = std::move(p);
  }
  return v;
}

double flow_logpdf(const AffineFlow& flow, int task_id, const FeatureVector& x) {
  if (task_id < 0 || task_id >= flow.num_tasks())
    throw std::invalid_argument("unknown task id " + std::to_string(task_id));
  const auto inv = flow_inverse(flow, task_id, x);
  const auto& m = flow.prior_means[static_cast<std::size_t>(task_id)];
  double lp = inv.log_det;
  for (std::size_t i = 0; i < inv.u.size(); ++i) {
    const double diff = inv.u[i] - m[i];
    lp += -0.5 * kLog2Pi - 0.5 * diff * diff;
  }
  return lp;
}

namespace {

// Negative log-likelihood of one sample and its gradients. grad_shared is
// the flat layout of AffineFlow params; grad_cond has cond_dim entries.
double flow_nll_backward(const AffineFlow& flow, const std::vector<double>& cond,
                         const std::vector<double>& prior_mean, const FeatureVector& x,
                         std::span<double> grad_shared, std::span<double> grad_cond,
                         double scale) {
  const std::size_t d = static_cast<std::size_t>(flow.feature_dim);
  std::vector<BlockTrace> traces;
  const FlowInverse inv = inverse_pass(flow, cond, x, &traces);

  double nll = -inv.log_det;
  std::vector<double> g(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = inv.u[i] - prior_mean[i];
    nll += 0.5 * kLog2Pi + 0.5 * diff * diff;
    g[i] = diff * scale;  // d nll / d u
  }

  // Per-block offsets into the shared flat layout.
  std::vector<std::size_t> offset(flow.blocks.size());
  std::size_t k0 = 0;
  for (std::size_t k = 0; k < flow.blocks.size(); ++k) {
    offset[k] = k0;
    k0 += flow.blocks[k].mu_net.param_count() + flow.blocks[k].alpha_net.param_count() +
          2 * d;
  }

  for (std::size_t k = flow.blocks.size(); k-- > 0;) {
    const FlowBlock& blk = flow.blocks[k];
    const BlockTrace& tr = traces[k];
    const double* c = cond.data() + k * 4 * d;
    double* gc = grad_cond.data() + k * 4 * d;
    double* g_mu_net = grad_shared.data() + offset[k];
    double* g_al_net = g_mu_net + blk.mu_net.param_count();
    double* g_ls = g_al_net + blk.alpha_net.param_count();
    double* g_shift = g_ls + d;

    // Through actnorm y = exp(ls) w + shift, plus the direct -ls term.
    // g already carries the batch scale; the direct terms add it explicitly.
    std::vector<double> gw(d), da(d), dmu(d);
    for (std::size_t i = 0; i < d; ++i) {
      const double es = std::exp(blk.act_log_scale[i]);
      g_ls[i] += g[i] * tr.w[i] * es - scale;
      g_shift[i] += g[i];
      gw[i] = g[i] * es;
    }

    // Through w = (p - mu) exp(-a), plus the direct +a term; the clamp
    // gates both paths.
    std::vector<double> gp(d);
    for (std::size_t i = 0; i < d; ++i) {
      const double ea = std::exp(-tr.a[i]);
      da[i] = -gw[i] * tr.w[i] + scale;  // note w already includes exp(-a)
      if (std::abs(tr.a_pre[i]) > flow.alpha_clamp) da[i] = 0.0;
      dmu[i] = -gw[i] * ea;
      gp[i] = gw[i] * ea;
    }

    // Conditioning: mu = mu_raw tanh(sc) + tanh(b); same for alpha.
    std::vector<double> dmu_raw(d), dal_raw(d);
    for (std::size_t i = 0; i < d; ++i) {
      const double tsm = std::tanh(c[0 * d + i]);
      const double tbm = std::tanh(c[1 * d + i]);
      const double tsa = std::tanh(c[2 * d + i]);
      const double tba = std::tanh(c[3 * d + i]);
      dmu_raw[i] = dmu[i] * tsm;
      gc[0 * d + i] += dmu[i] * tr.mu_raw[i] * (1.0 - tsm * tsm);
      gc[1 * d + i] += dmu[i] * (1.0 - tbm * tbm);
      dal_raw[i] = da[i] * tsa;
      gc[2 * d + i] += da[i] * tr.alpha_raw[i] * (1.0 - tsa * tsa);
      gc[3 * d + i] += da[i] * (1.0 - tba * tba);
    }

    auto gp_mu = blk.mu_net.backward(tr.mu_tape, std::move(dmu_raw),
                                     std::span<double>(g_mu_net, blk.mu_net.param_count()));
    auto gp_al = blk.alpha_net.backward(tr.alpha_tape, std::move(dal_raw),
                                        std::span<double>(g_al_net, blk.alpha_net.param_count()));
    for (std::size_t i = 0; i < d; ++i) gp[i] += gp_mu[i] + gp_al[i];

    if (blk.reverse) std::reverse(gp.begin(), gp.end());
    g = std::move(gp);
  }
  return nll;
}

}  // namespace

FlowBatchGrads flow_batch_gradient(const AffineFlow& flow,
                                   std::span<const int> task_ids,
                                   std::span<const FeatureVector> xs, Exec exec) {
  const std::size_t n = task_ids.size();
  if (n == 0 || n != xs.size()) throw std::invalid_argument("bad flow batch");
  const std::size_t np = flow.param_count();
  const std::size_t nc = flow.cond_dim();
  const double inv_n = 1.0 / static_cast<double>(n);

  FlowBatchGrads out;
  out.shared.assign(np, 0.0);
  std::vector<double> losses(n);
  std::vector<double> cond_slots(n * nc, 0.0);

  par::accumulate(
      exec, n, np, out.shared,
      [&](std::size_t i, double* slot) {
        const int t = task_ids[i];
        losses[i] = flow_nll_backward(
                        flow, flow.conditioning[static_cast<std::size_t>(t)],
                        flow.prior_means[static_cast<std::size_t>(t)], xs[i],
                        std::span<double>(slot, np),
                        std::span<double>(cond_slots.data() + i * nc, nc), inv_n) *
                    inv_n;
      },
      16);

  for (std::size_t i = 0; i < n; ++i) {
    out.loss += losses[i];
    auto& row = out.conditioning[task_ids[i]];
    if (row.empty()) row.assign(nc, 0.0);
    const double* gc = cond_slots.data() + i * nc;
    for (std::size_t k = 0; k < nc; ++k) row[k] += gc[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct DensitySplit {
  TaskCollection train;
  std::vector<std::pair<int, FeatureVector>> val;  // (task, sample)
  std::vector<double> cum;                         // cumulative task weights
};

DensitySplit split_for_density(const TaskCollection& c, double val_fraction,
                               Rng& split_rng) {
  DensitySplit s;
  s.train = c;
  for (std::size_t t = 0; t < s.train.tasks.size(); ++t) {
    auto& samples = s.train.tasks[t].samples;
    const std::size_t n_val =
        static_cast<std::size_t>(val_fraction * static_cast<double>(samples.size()));
    if (n_val == 0) continue;
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    split_rng.shuffle(idx);
    idx.resize(n_val);
    std::sort(idx.begin(), idx.end());
    for (auto it = idx.rbegin(); it != idx.rend(); ++it) {
      s.val.emplace_back(static_cast<int>(t), std::move(samples[*it]));
      samples.erase(samples.begin() + static_cast<std::ptrdiff_t>(*it));
      if (!s.train.tasks[t].labels.empty())
        s.train.tasks[t].labels.erase(s.train.tasks[t].labels.begin() +
                                      static_cast<std::ptrdiff_t>(*it));
    }
  }
  for (const auto& t : s.train.tasks)
    s.cum.push_back((s.cum.empty() ? 0.0 : s.cum.back()) + t.weight);
  return s;
}

}  // namespace

GaussianBatchGrads gaussian_batch_gradient(const ConditionalGaussian& model,
                                           std::span<const int> task_ids,
                                           std::span<const FeatureVector> xs,
                                           Exec exec) {
  const std::size_t n = task_ids.size();
  if (n == 0 || n != xs.size()) throw std::invalid_argument("bad gaussian batch");
  const std::size_t np = model.net.param_count();
  const int d = model.feature_dim;
  const int E = model.embeddings.dim;
  const double inv_n = 1.0 / static_cast<double>(n);
  const double log_floor = std::log(model.variance_floor);

  GaussianBatchGrads out;
  out.net.assign(np, 0.0);
  std::vector<double> losses(n);
  std::vector<double> emb_slots(n * static_cast<std::size_t>(E), 0.0);

  par::accumulate(exec, n, np, out.net, [&](std::size_t i, double* slot) {
    const int t = task_ids[i];
    const auto& e = model.embeddings[static_cast<std::size_t>(t)];
    const auto& x = xs[i];
    nn::Tape tape;
    const auto raw = nn::forward(model.net, e, false, nullptr, &tape);
    double nll = 0.0;
    std::vector<double> upstream(2 * static_cast<std::size_t>(d), 0.0);
    for (int j = 0; j < d; ++j) {
      const std::size_t ui = static_cast<std::size_t>(j);
      const double s_raw = raw[static_cast<std::size_t>(d) + ui];
      const bool clamped = s_raw < log_floor;
      const double s = clamped ? log_floor : s_raw;
      const double diff = x[ui] - raw[ui];
      const double inv_var = std::exp(-s);
      nll += 0.5 * kLog2Pi + 0.5 * s + diff * diff * inv_var * 0.5;
      upstream[ui] = -diff * inv_var * inv_n;
      upstream[static_cast<std::size_t>(d) + ui] =
          clamped ? 0.0 : (0.5 - 0.5 * diff * diff * inv_var) * inv_n;
    }
    auto din = nn::backward(model.net, tape, std::move(upstream),
                            std::span<double>(slot, np));
    double* dst = emb_slots.data() + i * static_cast<std::size_t>(E);
    for (int k = 0; k < E; ++k) dst[k] = din[static_cast<std::size_t>(k)];
    losses[i] = nll * inv_n;
  });

  for (std::size_t i = 0; i < n; ++i) {
    out.loss += losses[i];
    auto& row = out.embeddings[task_ids[i]];
    if (row.empty()) row.assign(static_cast<std::size_t>(E), 0.0);
    const double* src = emb_slots.data() + i * static_cast<std::size_t>(E);
    for (int k = 0; k < E; ++k) row[static_cast<std::size_t>(k)] += src[k];
  }
  return out;
}

std::pair<ConditionalGaussian, clr::LossTrace> train_gaussian(
    const TaskCollection& c, const EmbeddingTable& embeddings,
    const DensityConfig& cfg) {
  validate_collection(c);
  if (embeddings.size() != c.tasks.size())
    throw std::invalid_argument("embedding table does not cover all tasks");

  const int d = static_cast<int>(c.feature_dim);
  const int E = embeddings.dim;
  Rng root(cfg.train.seed);
  Rng net_rng = root.fork("net");
  Rng sample_rng = root.fork("batch");
  Rng split_rng = root.fork("valsplit");

  ConditionalGaussian model;
  model.feature_dim = d;
  model.variance_floor = cfg.variance_floor;
  model.embeddings = embeddings;
  {
    std::vector<int> widths = cfg.train.hidden;
    widths.push_back(2 * d);
    std::vector<nn::Activation> acts(cfg.train.hidden.size(), nn::Activation::relu);
    acts.push_back(nn::Activation::identity);
    std::vector<double> drop = cfg.train.hidden_dropout;
    if (drop.empty()) drop.assign(cfg.train.hidden.size(), 0.0);
    drop.push_back(0.0);
    model.net = nn::make_net(E, widths, acts, drop, net_rng);
  }

  DensitySplit split = split_for_density(c, cfg.train.val_fraction, split_rng);
  const std::size_t np = model.net.param_count();
  nn::Optimizer opt(cfg.train.opt, np);
  nn::RowOptimizer emb_opt(cfg.train.opt, embeddings.size(),
                           static_cast<std::size_t>(E));
  const int batches = std::max<int>(
      1, static_cast<int>(split.train.population_size() /
                          static_cast<std::size_t>(cfg.train.batch_size)));

  auto validation = [&]() {
    if (split.val.empty()) return std::numeric_limits<double>::quiet_NaN();
    const double s = par::sum(cfg.train.exec, split.val.size(), [&](std::size_t i) {
      return -gaussian_logpdf(model, split.val[i].first, split.val[i].second);
    });
    return s / static_cast<double>(split.val.size());
  };

  clr::LossTrace trace;
  std::vector<double> best_params;
  EmbeddingTable best_emb;
  double best_val = 0.0;
  const bool use_val = !split.val.empty();
  const std::size_t n = static_cast<std::size_t>(cfg.train.batch_size);

  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int b = 0; b < batches; ++b) {
      std::vector<int> ts(n);
      std::vector<FeatureVector> xs(n);
      for (std::size_t i = 0; i < n; ++i) {
        const int t = draw_cumulative(split.cum, sample_rng);
        const auto& samples = split.train.tasks[static_cast<std::size_t>(t)].samples;
        ts[i] = t;
        xs[i] = samples[sample_rng.index(samples.size())];
      }
      auto grads = gaussian_batch_gradient(model, ts, xs, cfg.train.exec);
      if (!std::isfinite(grads.loss))
        throw std::runtime_error("non-finite density loss at step " +
                                 std::to_string(opt.step_count()));
      std::vector<double> params(np);
      model.net.copy_params_to(params);
      opt.step(params, grads.net, "conditional gaussian net");
      model.net.set_params(params);
      if (cfg.train_embeddings)
        for (auto& [t, g] : grads.embeddings)
          emb_opt.step_row(static_cast<std::size_t>(t),
                           model.embeddings[static_cast<std::size_t>(t)], g);
      epoch_loss += grads.loss;
    }
    epoch_loss /= static_cast<double>(batches);
    const double v = use_val ? validation() : epoch_loss;
    trace.train_loss.push_back(epoch_loss);
    trace.val_loss.push_back(v);
    if (trace.best_epoch < 0 || v < best_val) {
      best_val = v;
      trace.best_epoch = epoch;
      best_params.resize(np);
      model.net.copy_params_to(best_params);
      best_emb = model.embeddings;
    }
  }
  if (!best_params.empty()) {
    model.net.set_params(best_params);
    model.embeddings = best_emb;
  }
  return {std::move(model), std::move(trace)};
}

std::pair<AffineFlow, clr::LossTrace> train_flow(const TaskCollection& c,
                                                 const DensityConfig& cfg) {
  validate_collection(c);
  Rng root(cfg.train.seed);
  Rng flow_rng = root.fork("flow");
  Rng sample_rng = root.fork("batch");
  Rng split_rng = root.fork("valsplit");
  Rng init_rng = root.fork("actnorm");

  AffineFlow flow = make_flow(static_cast<int>(c.feature_dim),
                              static_cast<int>(c.tasks.size()), cfg.flow, flow_rng);
  DensitySplit split = split_for_density(c, cfg.train.val_fraction, split_rng);

  const std::size_t d = c.feature_dim;
  const std::size_t n = static_cast<std::size_t>(cfg.train.batch_size);

  // Data-dependent actnorm initialization: run one batch through the blocks
  // in order and normalize each block's output before moving to the next.
  {
    std::vector<int> ts(n);
    std::vector<std::vector<double>> vs(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int t = draw_cumulative(split.cum, init_rng);
      const auto& samples = split.train.tasks[static_cast<std::size_t>(t)].samples;
      ts[i] = t;
      const auto& x = samples[init_rng.index(samples.size())];
      vs[i].assign(x.begin(), x.end());
    }
    for (std::size_t k = 0; k < flow.blocks.size(); ++k) {
      std::vector<std::vector<double>> ws(n);
      for (std::size_t i = 0; i < n; ++i) {
        double ld = 0.0;
        BlockTrace tr;
        block_inverse(flow.blocks[k],
                      flow.conditioning[static_cast<std::size_t>(ts[i])].data() + k * 4 * d,
                      flow.alpha_clamp, vs[i], ld, &tr);
        ws[i] = tr.w;
      }
      for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0, var = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += ws[i][j];
        mean /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double diff = ws[i][j] - mean;
          var += diff * diff;
        }
        var /= static_cast<double>(n);
        const double ls = -std::log(std::sqrt(var) + 1e-6);
        flow.blocks[k].act_log_scale[j] = ls;
        flow.blocks[k].act_shift[j] = -mean * std::exp(ls);
      }
      for (std::size_t i = 0; i < n; ++i) {
        double ld = 0.0;
        vs[i] = block_inverse(flow.blocks[k],
                              flow.conditioning[static_cast<std::size_t>(ts[i])].data() + k * 4 * d,
                              flow.alpha_clamp, std::move(vs[i]), ld, nullptr);
      }
    }
    flow.actnorm_ready = true;
  }

  const std::size_t np = flow.param_count();
  nn::Optimizer opt(cfg.train.opt, np);
  nn::RowOptimizer cond_opt(cfg.train.opt, flow.conditioning.size(), flow.cond_dim());
  const int batches = std::max<int>(
      1, static_cast<int>(split.train.population_size() /
                          static_cast<std::size_t>(cfg.train.batch_size)));

  auto validation = [&]() {
    if (split.val.empty()) return std::numeric_limits<double>::quiet_NaN();
    const double s = par::sum(cfg.train.exec, split.val.size(), [&](std::size_t i) {
      return -flow_logpdf(flow, split.val[i].first, split.val[i].second);
    });
    return s / static_cast<double>(split.val.size());
  };

  clr::LossTrace trace;
  std::vector<double> best_params;
  std::vector<std::vector<double>> best_cond;
  double best_val = 0.0;
  const bool use_val = !split.val.empty();

  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int b = 0; b < batches; ++b) {
      std::vector<int> ts(n);
      std::vector<FeatureVector> xs(n);
      for (std::size_t i = 0; i < n; ++i) {
        const int t = draw_cumulative(split.cum, sample_rng);
        const auto& samples = split.train.tasks[static_cast<std::size_t>(t)].samples;
        ts[i] = t;
        xs[i] = samples[sample_rng.index(samples.size())];
      }
      auto grads = flow_batch_gradient(flow, ts, xs, cfg.train.exec);
      if (!std::isfinite(grads.loss))
        throw std::runtime_error("non-finite flow loss at step " +
                                 std::to_string(opt.step_count()));
      std::vector<double> params(np);
      flow.copy_params_to(params);
      opt.step(params, grads.shared, "flow");
      flow.set_params(params);
      for (auto& [t, g] : grads.conditioning)
        cond_opt.step_row(static_cast<std::size_t>(t),
                          flow.conditioning[static_cast<std::size_t>(t)], g);
      epoch_loss += grads.loss;
    }
    epoch_loss /= static_cast<double>(batches);
    const double v = use_val ? validation() : epoch_loss;
    trace.train_loss.push_back(epoch_loss);
    trace.val_loss.push_back(v);
    if (trace.best_epoch < 0 || v < best_val) {
      best_val = v;
      trace.best_epoch = epoch;
      best_params.resize(np);
      flow.copy_params_to(best_params);
      best_cond = flow.conditioning;
    }
  }
  if (!best_params.empty()) {
    flow.set_params(best_params);
    flow.conditioning = best_cond;
  }
  return {std::move(flow), std::move(trace)};
}

double density_score(const ConditionalGaussian& model, int task_id,
                     const FeatureVector& x) {
  return gaussian_logpdf(model, task_id, x);
}

double density_score(const AffineFlow& model, int task_id, const FeatureVector& x) {
  return flow_logpdf(model, task_id, x);
}

}  // namespace mtad::density
