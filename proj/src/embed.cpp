#include "mtad/embed.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "mtad/parallel.hpp"

namespace mtad::embed {

std::vector<double> PreEmbeddingModel::basis_response(const FeatureVector& x) const {
  return nn::forward(net, x);
}

std::vector<int> select_seed_tasks(const TaskCollection& c, int m0, Rng& rng) {
  const int M = static_cast<int>(c.tasks.size());
  if (m0 < 1 || m0 > M)
    throw std::invalid_argument("m0 must be in [1, " + std::to_string(M) + "]");
  std::vector<int> ids(static_cast<std::size_t>(M));
  for (int i = 0; i < M; ++i) ids[static_cast<std::size_t>(i)] = i;
  // Partial Fisher-Yates: the first m0 entries are a uniform subset.
  for (int i = 0; i < m0; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) +
                          rng.index(static_cast<std::size_t>(M - i));
    std::swap(ids[static_cast<std::size_t>(i)], ids[j]);
  }
  ids.resize(static_cast<std::size_t>(m0));
  return ids;
}

namespace {

int draw_cumulative(const std::vector<double>& cum, Rng& rng) {
  const double u = rng.u01() * cum.back();
  const auto it = std::upper_bound(cum.begin(), cum.end(), u);
  return static_cast<int>(std::min<std::size_t>(
      static_cast<std::size_t>(it - cum.begin()), cum.size() - 1));
}

}  // namespace

std::pair<PreEmbeddingModel, clr::LossTrace> train_pre_embedding(
    const TaskCollection& c, const std::vector<int>& seeds,
    const clr::TrainConfig& cfg) {
  validate_collection(c);
  if (seeds.empty()) throw std::invalid_argument("no seed tasks");
  for (int s : seeds)
    if (s < 0 || static_cast<std::size_t>(s) >= c.tasks.size())
      throw std::invalid_argument("seed task id out of range: " + std::to_string(s));

  const int M0 = static_cast<int>(seeds.size());
  const int d = static_cast<int>(c.feature_dim);

  Rng root(cfg.seed);
  Rng net_rng = root.fork("net");
  Rng sample_rng = root.fork("batch");
  Rng dropout_rng = root.fork("dropout");
  Rng split_rng = root.fork("valsplit");

  PreEmbeddingModel model;
  model.seed_task_ids = seeds;
  {
    std::vector<int> widths = cfg.hidden;
    widths.push_back(M0);
    std::vector<nn::Activation> acts(cfg.hidden.size(), nn::Activation::relu);
    acts.push_back(nn::Activation::identity);
    std::vector<double> drop = cfg.hidden_dropout;
    if (drop.empty()) drop.assign(cfg.hidden.size(), 0.0);
    drop.push_back(0.0);
    model.net = nn::make_net(d, widths, acts, drop, net_rng);
  }

  // Validation split mirrors the joint trainer: a held-out slice per task
  // forms the population for fixed validation negatives; positives come
  // from the seed tasks' slices.
  TaskCollection train = c;
  std::vector<std::vector<FeatureVector>> val(c.tasks.size());
  for (std::size_t t = 0; t < c.tasks.size(); ++t) {
    auto& samples = train.tasks[t].samples;
    const std::size_t n_val =
        static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(samples.size()));
    if (n_val == 0) continue;
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    split_rng.shuffle(idx);
    idx.resize(n_val);
    std::sort(idx.begin(), idx.end());
    for (auto it = idx.rbegin(); it != idx.rend(); ++it) {
      val[t].push_back(std::move(samples[*it]));
      samples.erase(samples.begin() + static_cast<std::ptrdiff_t>(*it));
      if (!train.tasks[t].labels.empty())
        train.tasks[t].labels.erase(train.tasks[t].labels.begin() +
                                    static_cast<std::ptrdiff_t>(*it));
    }
  }

  // Cumulative weights over seeds (positives) and all tasks (negatives).
  std::vector<double> seed_cum, pop_cum;
  for (int s : seeds)
    seed_cum.push_back((seed_cum.empty() ? 0.0 : seed_cum.back()) +
                       train.tasks[static_cast<std::size_t>(s)].weight);
  for (const auto& t : train.tasks)
    pop_cum.push_back((pop_cum.empty() ? 0.0 : pop_cum.back()) + t.weight);

  // Fixed validation pairs: (head, positive) for every held-out seed
  // sample, plus one negative drawn from the held-out population.
  struct ValPair {
    int head;
    FeatureVector pos, neg;
  };
  std::vector<ValPair> val_pairs;
  {
    std::vector<std::pair<int, const std::vector<FeatureVector>*>> val_pop;
    std::vector<double> val_cum;
    for (std::size_t t = 0; t < val.size(); ++t)
      if (!val[t].empty()) {
        val_pop.emplace_back(static_cast<int>(t), &val[t]);
        val_cum.push_back((val_cum.empty() ? 0.0 : val_cum.back()) +
                          c.tasks[t].weight);
      }
    Rng neg_rng = root.fork("valneg");
    for (int h = 0; h < M0; ++h) {
      const auto& vs = val[static_cast<std::size_t>(seeds[static_cast<std::size_t>(h)])];
      for (const auto& x : vs) {
        ValPair p;
        p.head = h;
        p.pos = x;
        const int vt = draw_cumulative(val_cum, neg_rng);
        const auto& pool = *val_pop[static_cast<std::size_t>(vt)].second;
        p.neg = pool[neg_rng.index(pool.size())];
        val_pairs.push_back(std::move(p));
      }
    }
  }

  const std::size_t np = model.net.param_count();
  nn::Optimizer opt(cfg.opt, np);
  const int batches = std::max<int>(
      1, static_cast<int>(train.population_size() / static_cast<std::size_t>(cfg.batch_size)));

  auto validation = [&]() {
    if (val_pairs.empty()) return std::numeric_limits<double>::quiet_NaN();
    const double s = par::sum(cfg.exec, val_pairs.size(), [&](std::size_t i) {
      const auto& p = val_pairs[i];
      const double sp = nn::forward(model.net, p.pos)[static_cast<std::size_t>(p.head)];
      const double sn = nn::forward(model.net, p.neg)[static_cast<std::size_t>(p.head)];
      return clr::softplus(-sp) + clr::softplus(sn);
    });
    return s / static_cast<double>(val_pairs.size());
  };

  clr::LossTrace trace;
  std::vector<double> best_params;
  double best_val = 0.0;
  const bool use_val = !val_pairs.empty();
  const std::size_t n = static_cast<std::size_t>(cfg.batch_size);
  const double inv_n = 1.0 / static_cast<double>(n);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int b = 0; b < batches; ++b) {
      // One contrastive batch restricted to the seed heads.
      std::vector<int> head(n);
      std::vector<const FeatureVector*> xp(n), xn(n);
      for (std::size_t i = 0; i < n; ++i) {
        const int h = draw_cumulative(seed_cum, sample_rng);
        const auto& ts =
            train.tasks[static_cast<std::size_t>(seeds[static_cast<std::size_t>(h)])].samples;
        head[i] = h;
        xp[i] = &ts[sample_rng.index(ts.size())];
        const int tn = draw_cumulative(pop_cum, sample_rng);
        const auto& ns = train.tasks[static_cast<std::size_t>(tn)].samples;
        xn[i] = &ns[sample_rng.index(ns.size())];
      }

      const Rng batch_rng = dropout_rng.fork("b", static_cast<std::uint64_t>(opt.step_count()));
      std::vector<double> grads(np, 0.0);
      std::vector<double> losses(n);
      par::accumulate(cfg.exec, n, np, grads, [&](std::size_t i, double* slot) {
        Rng item_rng = batch_rng.fork("drop", i);
        nn::Tape tape;
        std::span<double> g(slot, np);
        std::vector<double> upstream(static_cast<std::size_t>(M0), 0.0);

        const auto out_p = nn::forward(model.net, *xp[i], true, &item_rng, &tape);
        const double sp = out_p[static_cast<std::size_t>(head[i])];
        upstream[static_cast<std::size_t>(head[i])] = -clr::sigmoid(-sp) * inv_n;
        nn::backward(model.net, tape, upstream, g);

        const auto out_n = nn::forward(model.net, *xn[i], true, &item_rng, &tape);
        const double sn = out_n[static_cast<std::size_t>(head[i])];
        upstream[static_cast<std::size_t>(head[i])] = clr::sigmoid(sn) * inv_n;
        nn::backward(model.net, tape, upstream, g);

        losses[i] = (clr::softplus(-sp) + clr::softplus(sn)) * inv_n;
      });
      double loss = 0.0;
      for (double l : losses) loss += l;
      if (!std::isfinite(loss))
        throw std::runtime_error("non-finite pre-embedding loss at step " +
                                 std::to_string(opt.step_count()));
      std::vector<double> params(np);
      model.net.copy_params_to(params);
      opt.step(params, grads, "pre-embedding net");
      model.net.set_params(params);
      epoch_loss += loss;
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
    }
  }
  if (!best_params.empty()) model.net.set_params(best_params);
  return {std::move(model), std::move(trace)};
}

TaskEmbedding learned_embedding(const PreEmbeddingModel& model,
                                const TaskDataset& task, Exec exec) {
  if (task.samples.empty())
    throw std::invalid_argument("cannot embed an empty task");
  const std::size_t m0 = static_cast<std::size_t>(model.num_heads());
  const std::size_t n = task.samples.size();
  std::vector<double> acc(m0, 0.0);
  par::accumulate(exec, n, m0, acc, [&](std::size_t i, double* slot) {
    const auto r = model.basis_response(task.samples[i]);
    for (std::size_t k = 0; k < m0; ++k) slot[k] += r[k];
  });
  TaskEmbedding e;
  e.task_id = task.task_id;
  e.vector.resize(m0);
  for (std::size_t k = 0; k < m0; ++k) e.vector[k] = acc[k] / static_cast<double>(n);
  return e;
}

TaskEmbedding histogram_embedding(const TaskDataset& task, int label_arity) {
  if (task.labels.size() != task.samples.size() || task.samples.empty())
    throw std::invalid_argument("histogram embedding needs one label per sample");
  std::vector<double> counts(static_cast<std::size_t>(label_arity), 0.0);
  for (int l : task.labels) {
    if (l < 0 || l >= label_arity)
      throw std::invalid_argument("label " + std::to_string(l) + " outside [0, " +
                                  std::to_string(label_arity) + ")");
    counts[static_cast<std::size_t>(l)] += 1.0;
  }
  const double n = static_cast<double>(task.labels.size());
  for (double& v : counts) v /= n;
  return {task.task_id, std::move(counts)};
}

TaskEmbedding label_embedding(const std::set<int>& active_categories,
                              int label_arity) {
  if (active_categories.empty())
    throw std::invalid_argument("a task must have at least one active category");
  std::vector<double> v(static_cast<std::size_t>(label_arity), 0.0);
  for (int c : active_categories) {
    if (c < 0 || c >= label_arity)
      throw std::invalid_argument("active category " + std::to_string(c) +
                                  " outside [0, " + std::to_string(label_arity) + ")");
    v[static_cast<std::size_t>(c)] = 1.0;
  }
  return {0, std::move(v)};
}

EmbeddingTable random_embedding(std::size_t m, int e_dim, Rng& rng) {
  EmbeddingTable table;
  table.dim = e_dim;
  table.rows.resize(m);
  for (auto& row : table.rows) {
    row.resize(static_cast<std::size_t>(e_dim));
    for (double& v : row) v = rng.normal();
  }
  return table;
}

std::vector<double> Gmm::responsibilities(const FeatureVector& x) const {
  const std::size_t L = weights.size();
  std::vector<double> lg(L);
  for (std::size_t l = 0; l < L; ++l) {
    double s = std::log(weights[l]);
    for (std::size_t d = 0; d < x.size(); ++d) {
      const double v = vars[l][d];
      const double diff = x[d] - means[l][d];
      s += -0.5 * std::log(2.0 * M_PI * v) - diff * diff / (2.0 * v);
    }
    lg[l] = s;
  }
  const double mx = *std::max_element(lg.begin(), lg.end());
  double z = 0.0;
  for (double& v : lg) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : lg) v /= z;
  return lg;
}

Gmm fit_gmm(const std::vector<FeatureVector>& points, int components,
            std::uint64_t seed, const GmmConfig& cfg) {
  if (components < 1) throw std::invalid_argument("components must be >= 1");
  const std::size_t n = points.size();
  if (n < static_cast<std::size_t>(components))
    throw std::invalid_argument("need at least one point per component");
  const std::size_t d = points.front().size();
  const std::size_t L = static_cast<std::size_t>(components);
  Rng rng(seed);

  Gmm g;
  g.weights.assign(L, 1.0 / static_cast<double>(L));
  g.means.assign(L, std::vector<double>(d, 0.0));
  g.vars.assign(L, std::vector<double>(d, 0.0));

  // k-means++ seeding: centers drawn proportional to squared distance from
  // the nearest existing center.
  g.means[0] = points[rng.index(n)];
  std::vector<double> best_d2(n, 0.0);
  for (std::size_t l = 1; l < L; ++l) {
    par::for_each(cfg.exec, n, [&](std::size_t i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < l; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = points[i][k] - g.means[j][k];
          s += diff * diff;
        }
        best = std::min(best, s);
      }
      best_d2[i] = best;
    });
    double total = 0.0;
    for (double v : best_d2) total += v;
    std::size_t pick = 0;
    if (total > 0.0) {
      const double u = rng.u01() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += best_d2[i];
        if (u < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.index(n);  // all points identical
    }
    g.means[l] = points[pick];
  }

  // Start from the pooled per-dimension variance.
  {
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    for (const auto& x : points)
      for (std::size_t k = 0; k < d; ++k) mean[k] += x[k];
    for (double& v : mean) v /= static_cast<double>(n);
    for (const auto& x : points)
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = x[k] - mean[k];
        var[k] += diff * diff;
      }
    for (std::size_t k = 0; k < d; ++k)
      var[k] = std::max(var[k] / static_cast<double>(n), cfg.variance_floor);
    for (std::size_t l = 0; l < L; ++l) g.vars[l] = var;
  }

  std::vector<double> resp(n * L);
  std::vector<double> point_ll(n);
  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    // E-step.
    par::for_each(cfg.exec, n, [&](std::size_t i) {
      double mx = -std::numeric_limits<double>::infinity();
      double* r = resp.data() + i * L;
      for (std::size_t l = 0; l < L; ++l) {
        double s = std::log(g.weights[l]);
        for (std::size_t k = 0; k < d; ++k) {
          const double v = g.vars[l][k];
          const double diff = points[i][k] - g.means[l][k];
          s += -0.5 * std::log(2.0 * M_PI * v) - diff * diff / (2.0 * v);
        }
        r[l] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::size_t l = 0; l < L; ++l) {
        r[l] = std::exp(r[l] - mx);
        z += r[l];
      }
      for (std::size_t l = 0; l < L; ++l) r[l] /= z;
      point_ll[i] = mx + std::log(z);
    });
    double ll = 0.0;
    for (double v : point_ll) ll += v;
    ll /= static_cast<double>(n);
    g.loglik_trace.push_back(ll);

    // M-step: responsibility-weighted moments, summed in point order.
    std::vector<double> nl(L, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < L; ++l) nl[l] += resp[i * L + l];
    par::for_each(cfg.exec, L * d, [&](std::size_t ld) {
      const std::size_t l = ld / d, k = ld % d;
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += resp[i * L + l] * points[i][k];
      m /= (nl[l] + 1e-300);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double diff = points[i][k] - m;
        v += resp[i * L + l] * diff * diff;
      }
      g.means[l][k] = m;
      g.vars[l][k] = std::max(v / (nl[l] + 1e-300), cfg.variance_floor);
    });
    for (std::size_t l = 0; l < L; ++l)
      g.weights[l] = std::max(nl[l] / static_cast<double>(n), 1e-12);

    if (std::abs(ll - prev_ll) < cfg.tolerance) break;
    prev_ll = ll;
  }
  return g;
}

EmbeddingTable pseudo_label_embedding(const TaskCollection& c, int components,
                                      const GmmConfig& cfg, std::uint64_t seed) {
  validate_collection(c);
  std::vector<FeatureVector> pool;
  pool.reserve(c.population_size());
  for (const auto& t : c.tasks)
    for (const auto& x : t.samples) pool.push_back(x);
  if (pool.size() < static_cast<std::size_t>(components))
    throw std::invalid_argument("population smaller than component count");

  const Gmm g = fit_gmm(pool, components, seed, cfg);

  EmbeddingTable table;
  table.dim = components;
  table.rows.resize(c.tasks.size());
  const std::size_t L = static_cast<std::size_t>(components);
  for (std::size_t t = 0; t < c.tasks.size(); ++t) {
    const auto& samples = c.tasks[t].samples;
    std::vector<double> acc(L, 0.0);
    par::accumulate(cfg.exec, samples.size(), L, acc, [&](std::size_t i, double* slot) {
      const auto r = g.responsibilities(samples[i]);
      for (std::size_t l = 0; l < L; ++l) slot[l] += r[l];
    });
    for (double& v : acc) v /= static_cast<double>(samples.size());
    table.rows[t] = std::move(acc);
  }
  return table;
}

nn::Matrix similarity_matrix(const std::vector<TaskEmbedding>& embeddings) {
  const std::size_t m = embeddings.size();
  if (m == 0) throw std::invalid_argument("no embeddings");
  const std::size_t e = embeddings.front().vector.size();
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (embeddings[i].vector.size() != e)
      throw std::invalid_argument("embedding lengths differ");
    double s = 0.0;
    for (double v : embeddings[i].vector) s += v * v;
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0)
      throw std::invalid_argument("zero-norm embedding at position " + std::to_string(i));
  }
  nn::Matrix sim(static_cast<int>(m), static_cast<int>(m));
  for (std::size_t i = 0; i < m; ++i) {
    sim(static_cast<int>(i), static_cast<int>(i)) = 1.0;
    for (std::size_t j = i + 1; j < m; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < e; ++k)
        dot += embeddings[i].vector[k] * embeddings[j].vector[k];
      const double v = dot / (norms[i] * norms[j]);
      sim(static_cast<int>(i), static_cast<int>(j)) = v;
      sim(static_cast<int>(j), static_cast<int>(i)) = v;
    }
  }
  return sim;
}

EmbeddingTable table_from(const std::vector<TaskEmbedding>& embeddings) {
  EmbeddingTable t;
  if (embeddings.empty()) return t;
  t.dim = static_cast<int>(embeddings.front().vector.size());
  for (const auto& e : embeddings) {
    if (static_cast<int>(e.vector.size()) != t.dim)
      throw std::invalid_argument("embedding lengths differ");
    t.rows.push_back(e.vector);
  }
  return t;
}

EmbeddingTable project_table(const EmbeddingTable& table, int target_dim,
                             std::uint64_t seed) {
  if (table.dim == target_dim) return table;
  Rng rng(seed);
  const std::size_t S = static_cast<std::size_t>(table.dim);
  const std::size_t E = static_cast<std::size_t>(target_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(S));
  std::vector<double> map(E * S);
  for (double& v : map) v = rng.normal() * scale;

  EmbeddingTable out;
  out.dim = target_dim;
  out.rows.resize(table.size());
  for (std::size_t t = 0; t < table.size(); ++t) {
    out.rows[t].assign(E, 0.0);
    for (std::size_t i = 0; i < E; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < S; ++j) s += map[i * S + j] * table.rows[t][j];
      out.rows[t][i] = s;
    }
  }
  return out;
}

}  // namespace mtad::embed
