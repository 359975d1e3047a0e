#include "mtad/clr.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mtad::clr {

double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {

// Inverse-CDF draw from the task weights.
int draw_task(const std::vector<double>& cumulative, Rng& rng) {
  const double u = rng.u01() * cumulative.back();
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  const std::size_t i = static_cast<std::size_t>(it - cumulative.begin());
  return static_cast<int>(std::min(i, cumulative.size() - 1));
}

std::vector<double> cumulative_weights(const TaskCollection& c) {
  std::vector<double> cum;
  cum.reserve(c.tasks.size());
  double s = 0.0;
  for (const auto& t : c.tasks) {
    s += t.weight;
    cum.push_back(s);
  }
  return cum;
}

std::vector<double> concat(std::span<const double> x, std::span<const double> e) {
  std::vector<double> in;
  in.reserve(x.size() + e.size());
  in.insert(in.end(), x.begin(), x.end());
  in.insert(in.end(), e.begin(), e.end());
  return in;
}

}  // namespace

ContrastiveBatch sample_batch(const TaskCollection& c, std::size_t n, Rng& rng) {
  if (c.tasks.empty()) throw std::invalid_argument("empty collection");
  if (n == 0) throw std::invalid_argument("batch size must be >= 1");
  const auto cum = cumulative_weights(c);

  ContrastiveBatch batch;
  batch.task_ids.reserve(n);
  batch.positives.reserve(n);
  batch.negatives.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int t = draw_task(cum, rng);
    const auto& ts = c.tasks[t].samples;
    if (ts.empty()) throw std::invalid_argument("task without samples in batch draw");
    batch.task_ids.push_back(c.tasks[t].task_id);
    batch.positives.push_back(ts[rng.index(ts.size())]);

    const int tn = draw_task(cum, rng);
    const auto& ns = c.tasks[tn].samples;
    batch.negatives.push_back(ns[rng.index(ns.size())]);
  }
  return batch;
}

double logistic_loss(std::span<const double> scores_pos,
                     std::span<const double> scores_neg) {
  if (scores_pos.size() != scores_neg.size())
    throw std::invalid_argument("positive/negative score lengths differ");
  if (scores_pos.empty()) throw std::invalid_argument("empty score arrays");
  double s = 0.0;
  for (std::size_t i = 0; i < scores_pos.size(); ++i)
    s += softplus(-scores_pos[i]) + softplus(scores_neg[i]);
  return s / static_cast<double>(scores_pos.size());
}

double RatioModel::score(int task_id, const FeatureVector& x) const {
  if (task_id < 0 || static_cast<std::size_t>(task_id) >= embeddings.size())
    throw std::invalid_argument("unknown task id " + std::to_string(task_id));
  return score_with_embedding(embeddings[static_cast<std::size_t>(task_id)], x);
}

double RatioModel::score_with_embedding(std::span<const double> e,
                                        std::span<const double> x) const {
  return nn::forward(net, concat(x, e))[0];
}

ClrBatchGrads clr_batch_gradient(const RatioModel& model,
                                 const ContrastiveBatch& batch,
                                 const Rng& dropout_rng, Exec exec) {
  const std::size_t n = batch.size();
  const std::size_t np = model.net.param_count();
  const int E = model.embeddings.dim;
  const double inv_n = 1.0 / static_cast<double>(n);

  ClrBatchGrads out;
  out.net.assign(np, 0.0);
  std::vector<double> losses(n);
  std::vector<double> emb_slots(n * static_cast<std::size_t>(E), 0.0);

  par::accumulate(exec, n, np, out.net, [&](std::size_t i, double* slot) {
    const int t = batch.task_ids[i];
    const auto& e = model.embeddings[static_cast<std::size_t>(t)];
    Rng item_rng = dropout_rng.fork("drop", i);

    nn::Tape tape;
    std::span<double> gnet(slot, np);
    double* ge = emb_slots.data() + i * static_cast<std::size_t>(E);

    const auto in_pos = concat(batch.positives[i], e);
    const double s_pos = nn::forward(model.net, in_pos, true, &item_rng, &tape)[0];
    auto din = nn::backward(model.net, tape, {-sigmoid(-s_pos) * inv_n}, gnet);
    for (int k = 0; k < E; ++k) ge[k] += din[model.feature_dim + k];

    const auto in_neg = concat(batch.negatives[i], e);
    const double s_neg = nn::forward(model.net, in_neg, true, &item_rng, &tape)[0];
    din = nn::backward(model.net, tape, {sigmoid(s_neg) * inv_n}, gnet);
    for (int k = 0; k < E; ++k) ge[k] += din[model.feature_dim + k];

    losses[i] = (softplus(-s_pos) + softplus(s_neg)) * inv_n;
  });

  for (std::size_t i = 0; i < n; ++i) {
    out.loss += losses[i];
    auto& row = out.embeddings[batch.task_ids[i]];
    if (row.empty()) row.assign(static_cast<std::size_t>(E), 0.0);
    const double* ge = emb_slots.data() + i * static_cast<std::size_t>(E);
    for (int k = 0; k < E; ++k) row[static_cast<std::size_t>(k)] += ge[k];
  }
  return out;
}

namespace {

nn::DenseNet build_scorer_net(int input_dim, const TrainConfig& cfg, Rng& rng) {
  std::vector<int> widths = cfg.hidden;
  widths.push_back(1);
  std::vector<nn::Activation> acts(cfg.hidden.size(), nn::Activation::relu);
  acts.push_back(nn::Activation::identity);
  std::vector<double> drop = cfg.hidden_dropout;
  if (drop.empty()) drop.assign(cfg.hidden.size(), 0.0);
  if (drop.size() != cfg.hidden.size())
    throw std::invalid_argument("hidden_dropout must match hidden layout");
  drop.push_back(0.0);
  return nn::make_net(input_dim, widths, acts, drop, rng);
}

}  // namespace

ClrTrainer::ClrTrainer(const TaskCollection& c,
                       const std::optional<EmbeddingTable>& init, TrainConfig cfg)
    : cfg_(std::move(cfg)),
      net_opt_(cfg_.opt, 0),
      emb_opt_(cfg_.opt, 0, 0),
      sample_rng_(0),
      dropout_rng_(0) {
  validate_collection(c);
  const std::size_t M = c.tasks.size();
  const int E = init ? init->dim : cfg_.embed_dim;
  if (init) {
    if (init->size() != M)
      throw std::invalid_argument("embedding init has " + std::to_string(init->size()) +
                                  " rows for " + std::to_string(M) + " tasks");
    for (const auto& r : init->rows)
      if (static_cast<int>(r.size()) != E)
        throw std::invalid_argument("embedding init rows have mixed lengths");
  }

  Rng root(cfg_.seed);
  sample_rng_ = root.fork("batch");
  dropout_rng_ = root.fork("dropout");
  Rng split_rng = root.fork("valsplit");
  Rng emb_rng = root.fork("embeddings");
  Rng net_rng = root.fork("net");

  // Hold out a validation slice of every task; training samples keep the
  // original task proportions.
  train_ = c;
  val_samples_.resize(M);
  for (std::size_t t = 0; t < M; ++t) {
    auto& samples = train_.tasks[t].samples;
    auto& labels = train_.tasks[t].labels;
    const std::size_t n_val =
        static_cast<std::size_t>(cfg_.val_fraction * static_cast<double>(samples.size()));
    if (n_val == 0) continue;
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    split_rng.shuffle(idx);
    idx.resize(n_val);
    std::sort(idx.begin(), idx.end());
    for (auto it = idx.rbegin(); it != idx.rend(); ++it) {
      val_samples_[t].push_back(std::move(samples[*it]));
      samples.erase(samples.begin() + static_cast<std::ptrdiff_t>(*it));
      if (!labels.empty()) labels.erase(labels.begin() + static_cast<std::ptrdiff_t>(*it));
      val_pairs_.emplace_back(static_cast<int>(t),
                              static_cast<int>(val_samples_[t].size()) - 1);
    }
  }

  // Fixed contrastive validation set: one negative per held-out positive,
  // drawn once from the held-out population mixture.
  if (!val_pairs_.empty()) {
    TaskCollection val_view;
    val_view.feature_dim = c.feature_dim;
    for (std::size_t t = 0; t < M; ++t) {
      if (val_samples_[t].empty()) continue;
      TaskDataset td;
      td.task_id = static_cast<int>(t);
      td.samples = val_samples_[t];
      td.weight = c.tasks[t].weight;
      val_view.tasks.push_back(std::move(td));
    }
    Rng neg_rng = root.fork("valneg");
    const auto cum = cumulative_weights(val_view);
    for (const auto& [t, i] : val_pairs_) {
      (void)t;
      (void)i;
      const int vt = draw_task(cum, neg_rng);
      const auto& vs = val_view.tasks[static_cast<std::size_t>(vt)].samples;
      val_neg_tasks_.push_back(val_view.tasks[static_cast<std::size_t>(vt)].task_id);
      val_negatives_.push_back(vs[neg_rng.index(vs.size())]);
    }
  }

  model_.feature_dim = static_cast<int>(c.feature_dim);
  model_.embeddings.dim = E;
  model_.embeddings.rows.resize(M);
  for (std::size_t t = 0; t < M; ++t) {
    if (init) {
      model_.embeddings.rows[t] = init->rows[t];
    } else {
      model_.embeddings.rows[t].resize(static_cast<std::size_t>(E));
      for (double& v : model_.embeddings.rows[t]) v = emb_rng.normal();
    }
  }
  model_.net = build_scorer_net(model_.feature_dim + E, cfg_, net_rng);

  net_opt_ = nn::Optimizer(cfg_.opt, model_.net.param_count());
  emb_opt_ = nn::RowOptimizer(cfg_.opt, M, static_cast<std::size_t>(E));
  batches_per_epoch_ = std::max<int>(
      1, static_cast<int>(train_.population_size() / static_cast<std::size_t>(cfg_.batch_size)));
}

double ClrTrainer::train_one_batch() {
  last_batch_ = sample_batch(train_, static_cast<std::size_t>(cfg_.batch_size), sample_rng_);
  const Rng batch_rng = dropout_rng_.fork("b", static_cast<std::uint64_t>(net_opt_.step_count()));
  auto grads = clr_batch_gradient(model_, last_batch_, batch_rng, cfg_.exec);
  if (!std::isfinite(grads.loss))
    throw std::runtime_error("non-finite training loss at step " +
                             std::to_string(net_opt_.step_count()));

  std::vector<double> params(model_.net.param_count());
  model_.net.copy_params_to(params);
  net_opt_.step(params, grads.net, "scorer net");
  model_.net.set_params(params);
  for (auto& [t, g] : grads.embeddings)
    emb_opt_.step_row(static_cast<std::size_t>(t),
                      model_.embeddings[static_cast<std::size_t>(t)], g);
  return grads.loss;
}

double ClrTrainer::validation_loss() const {
  if (val_pairs_.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t n = val_pairs_.size();
  const double total = par::sum(cfg_.exec, n, [&](std::size_t i) {
    const auto& [t, si] = val_pairs_[i];
    const double sp = model_.score(t, val_samples_[static_cast<std::size_t>(t)]
                                          [static_cast<std::size_t>(si)]);
    const double sn = model_.score(val_neg_tasks_[i], val_negatives_[i]);
    return softplus(-sp) + softplus(sn);
  });
  return total / static_cast<double>(n);
}

void ClrTrainer::snapshot() {
  best_net_params_.resize(model_.net.param_count());
  model_.net.copy_params_to(best_net_params_);
  best_embeddings_ = model_.embeddings;
  have_best_ = true;
}

void ClrTrainer::restore() {
  if (!have_best_) return;
  model_.net.set_params(best_net_params_);
  model_.embeddings = best_embeddings_;
}

void ClrTrainer::train() {
  const bool use_val = !val_pairs_.empty();
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int b = 0; b < batches_per_epoch_; ++b) epoch_loss += train_one_batch();
    epoch_loss /= static_cast<double>(batches_per_epoch_);
    const double val = use_val ? validation_loss() : epoch_loss;
    if (!std::isfinite(val))
      throw std::runtime_error("non-finite validation loss at epoch " + std::to_string(epoch));
    trace_.train_loss.push_back(epoch_loss);
    trace_.val_loss.push_back(val);
    if (!have_best_ || val < best_val_) {
      best_val_ = val;
      trace_.best_epoch = epoch;
      snapshot();
    }
  }
  restore();
}

std::pair<RatioModel, LossTrace> estimate_clr(
    const TaskCollection& c, const std::optional<EmbeddingTable>& init,
    const TrainConfig& cfg) {
  ClrTrainer trainer(c, init, cfg);
  trainer.train();
  return {trainer.take_model(), trainer.trace()};
}

double SingleTaskScorer::score(const FeatureVector& x) const {
  return nn::forward(net, x)[0];
}

std::pair<SingleTaskScorer, LossTrace> score_single_task(
    const std::vector<FeatureVector>& positives,
    const std::vector<FeatureVector>& negatives, const TrainConfig& cfg) {
  if (positives.empty() || negatives.empty())
    throw std::invalid_argument("both contrastive sets must be non-empty");
  const std::size_t d = positives.front().size();

  Rng root(cfg.seed);
  Rng net_rng = root.fork("net");
  Rng sample_rng = root.fork("batch");
  Rng dropout_rng = root.fork("dropout");
  Rng split_rng = root.fork("valsplit");

  SingleTaskScorer scorer;
  scorer.net = build_scorer_net(static_cast<int>(d), cfg, net_rng);

  // Seeded validation split of both sets.
  auto split = [&](std::vector<FeatureVector> all) {
    std::vector<FeatureVector> val;
    const std::size_t n_val =
        static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(all.size()));
    split_rng.shuffle(all);
    for (std::size_t i = 0; i < n_val; ++i) {
      val.push_back(std::move(all.back()));
      all.pop_back();
    }
    return std::make_pair(std::move(all), std::move(val));
  };
  auto [train_pos, val_pos] = split(positives);
  auto [train_neg, val_neg] = split(negatives);

  nn::Optimizer opt(cfg.opt, scorer.net.param_count());
  const std::size_t np = scorer.net.param_count();
  const int batches = std::max<int>(
      1, static_cast<int>((train_pos.size() + train_neg.size()) /
                          static_cast<std::size_t>(cfg.batch_size)));

  LossTrace trace;
  std::vector<double> best_params;
  double best_val = 0.0;
  const bool use_val = !val_pos.empty() && !val_neg.empty();

  auto validation = [&]() {
    const double lp = par::sum(cfg.exec, val_pos.size(), [&](std::size_t i) {
                        return softplus(-scorer.score(val_pos[i]));
                      }) / static_cast<double>(val_pos.size());
    const double ln = par::sum(cfg.exec, val_neg.size(), [&](std::size_t i) {
                        return softplus(scorer.score(val_neg[i]));
                      }) / static_cast<double>(val_neg.size());
    return lp + ln;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int b = 0; b < batches; ++b) {
      const std::size_t n = static_cast<std::size_t>(cfg.batch_size);
      std::vector<const FeatureVector*> xp(n), xn(n);
      for (std::size_t i = 0; i < n; ++i) {
        xp[i] = &train_pos[sample_rng.index(train_pos.size())];
        xn[i] = &train_neg[sample_rng.index(train_neg.size())];
      }
      const Rng batch_rng = dropout_rng.fork("b", static_cast<std::uint64_t>(opt.step_count()));
      std::vector<double> grads(np, 0.0);
      std::vector<double> losses(n);
      const double inv_n = 1.0 / static_cast<double>(n);
      par::accumulate(cfg.exec, n, np, grads, [&](std::size_t i, double* slot) {
        Rng item_rng = batch_rng.fork("drop", i);
        nn::Tape tape;
        std::span<double> g(slot, np);
        const double sp = nn::forward(scorer.net, *xp[i], true, &item_rng, &tape)[0];
        nn::backward(scorer.net, tape, {-sigmoid(-sp) * inv_n}, g);
        const double sn = nn::forward(scorer.net, *xn[i], true, &item_rng, &tape)[0];
        nn::backward(scorer.net, tape, {sigmoid(sn) * inv_n}, g);
        losses[i] = (softplus(-sp) + softplus(sn)) * inv_n;
      });
      double loss = 0.0;
      for (double l : losses) loss += l;
      if (!std::isfinite(loss))
        throw std::runtime_error("non-finite training loss at step " +
                                 std::to_string(opt.step_count()));
      std::vector<double> params(np);
      scorer.net.copy_params_to(params);
      opt.step(params, grads, "single-task scorer");
      scorer.net.set_params(params);
      epoch_loss += loss;
    }
    epoch_loss /= static_cast<double>(batches);
    const double val = use_val ? validation() : epoch_loss;
    trace.train_loss.push_back(epoch_loss);
    trace.val_loss.push_back(val);
    if (trace.best_epoch < 0 || val < best_val) {
      best_val = val;
      trace.best_epoch = epoch;
      best_params.resize(np);
      scorer.net.copy_params_to(best_params);
    }
  }
  if (!best_params.empty()) scorer.net.set_params(best_params);
  return {std::move(scorer), std::move(trace)};
}

std::vector<double> scores_for_task(const RatioModel& model, int task_id,
                                    std::span<const FeatureVector> samples,
                                    Exec exec) {
  std::vector<double> out(samples.size());
  par::for_each(exec, samples.size(),
                [&](std::size_t i) { out[i] = model.score(task_id, samples[i]); });
  return out;
}

}  // namespace mtad::clr
