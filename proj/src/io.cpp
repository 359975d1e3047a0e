#include "mtad/io.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mtad/data.hpp"

namespace mtad::io {

namespace fs = std::filesystem;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_text_file(const fs::path& file, const std::string& text) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << text;
}

namespace {

std::string read_text_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string join_categories(const std::vector<int>& cats) {
  std::string s;
  for (int c : cats) {
    if (!s.empty()) s += '|';
    s += std::to_string(c);
  }
  return s;
}

std::vector<int> split_categories(const std::string& s) {
  std::vector<int> cats;
  std::string cur;
  std::stringstream ss(s);
  while (std::getline(ss, cur, '|'))
    if (!cur.empty()) cats.push_back(std::stoi(cur));
  return cats;
}

std::string user_name(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "u%08zu", i);
  return buf;
}

}  // namespace

std::vector<int> Benchmark::nominal_test(int task) const {
  const auto& cats = nominal_categories.at(static_cast<std::size_t>(task));
  std::vector<int> idx;
  for (std::size_t i = 0; i < test_labels.size(); ++i)
    if (std::find(cats.begin(), cats.end(), test_labels[i]) != cats.end())
      idx.push_back(static_cast<int>(i));
  return idx;
}

std::vector<int> Benchmark::anomalous_test(int task) const {
  const auto& cats = anomalous_categories.at(static_cast<std::size_t>(task));
  std::vector<int> idx;
  for (std::size_t i = 0; i < test_labels.size(); ++i)
    if (std::find(cats.begin(), cats.end(), test_labels[i]) != cats.end())
      idx.push_back(static_cast<int>(i));
  return idx;
}

std::vector<std::set<int>> Benchmark::active_sets() const {
  std::vector<std::set<int>> active;
  active.reserve(nominal_categories.size());
  for (const auto& cats : nominal_categories) active.emplace_back(cats.begin(), cats.end());
  return active;
}

Benchmark from_synth(const synth::SynthBenchmark& sb) {
  Benchmark b;
  b.train = sb.train;
  b.test_points = sb.test_points;
  b.test_labels = sb.test_labels;
  b.label_key = "category";
  b.label_arity = sb.config.categories;
  for (std::size_t t = 0; t < sb.active.size(); ++t) {
    b.nominal_categories.emplace_back(sb.active[t].begin(), sb.active[t].end());
    std::vector<int> rest;
    for (int c = 0; c < sb.config.categories; ++c)
      if (!sb.active[t].count(c)) rest.push_back(c);
    b.anomalous_categories.push_back(std::move(rest));
    char buf[24];
    std::snprintf(buf, sizeof(buf), "item%04zu", t);
    b.item_ids.emplace_back(buf);
  }
  b.meta = {{"format", "mtad-benchmark-v1"},
            {"kind", "synth"},
            {"feature_dim", sb.config.feature_dim},
            {"label_key", b.label_key},
            {"label_arity", b.label_arity},
            {"synth",
             {{"categories", sb.config.categories},
              {"feature_dim", sb.config.feature_dim},
              {"active_per_task", sb.config.active_per_task},
              {"n_per_category", sb.config.n_per_category},
              {"blob_stddev", sb.config.blob_stddev},
              {"test_fraction", sb.config.test_fraction},
              {"seed", sb.config.seed}}}};
  return b;
}

void save_benchmark(const Benchmark& b, const fs::path& dir) {
  fs::create_directories(dir);
  const std::size_t d = b.train.feature_dim;

  std::string users = "user_id,label:" + b.label_key;
  for (std::size_t j = 0; j < d; ++j) users += ",f_" + std::to_string(j);
  users += '\n';
  std::string events = "user_id,item_id\n";
  std::string split = "user_id,role\n";

  std::size_t uid = 0;
  for (std::size_t t = 0; t < b.train.tasks.size(); ++t) {
    const auto& task = b.train.tasks[t];
    for (std::size_t i = 0; i < task.samples.size(); ++i) {
      const std::string name = user_name(uid++);
      users += name + ',' + std::to_string(task.labels.empty() ? 0 : task.labels[i]);
      for (double v : task.samples[i]) users += ',' + format_double(v);
      users += '\n';
      events += name + ',' + b.item_ids[t] + '\n';
      split += name + ",train\n";
    }
  }
  for (std::size_t i = 0; i < b.test_points.size(); ++i) {
    const std::string name = user_name(uid++);
    users += name + ',' + std::to_string(b.test_labels[i]);
    for (double v : b.test_points[i]) users += ',' + format_double(v);
    users += '\n';
    split += name + ",test\n";
  }

  std::string tasks = "item_id,task_id,weight,nominal_categories,anomalous_categories\n";
  for (std::size_t t = 0; t < b.train.tasks.size(); ++t) {
    tasks += b.item_ids[t] + ',' + std::to_string(t) + ',' +
             format_double(b.train.tasks[t].weight) + ',' +
             join_categories(b.nominal_categories[t]) + ',' +
             join_categories(b.anomalous_categories[t]) + '\n';
  }

  write_text_file(dir / "users.csv", users);
  write_text_file(dir / "events.csv", events);
  write_text_file(dir / "tasks.csv", tasks);
  write_text_file(dir / "split.csv", split);
  write_text_file(dir / "meta.json", b.meta.dump(2) + "\n");
}

Benchmark load_benchmark(const fs::path& dir) {
  Benchmark b;
  b.meta = json::parse(read_text_file(dir / "meta.json"));
  b.label_key = b.meta.at("label_key").get<std::string>();
  b.label_arity = b.meta.at("label_arity").get<int>();

  auto [log, users] = data::load((dir / "events.csv").string(),
                                 (dir / "users.csv").string());
  const int li = users.label_index(b.label_key);

  // tasks.csv drives the task ids, weights and category sets.
  std::map<std::string, int> item_to_task;
  {
    std::ifstream in(dir / "tasks.csv");
    if (!in) throw std::runtime_error("cannot read " + (dir / "tasks.csv").string());
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::string item, task_id, weight, nominal, anomalous;
      std::getline(ss, item, ',');
      std::getline(ss, task_id, ',');
      std::getline(ss, weight, ',');
      std::getline(ss, nominal, ',');
      std::getline(ss, anomalous, ',');
      const int t = std::stoi(task_id);
      if (t != static_cast<int>(b.item_ids.size()))
        throw std::runtime_error("tasks.csv must list dense task ids in order");
      b.item_ids.push_back(item);
      item_to_task[item] = t;
      b.nominal_categories.push_back(split_categories(nominal));
      b.anomalous_categories.push_back(split_categories(anomalous));
      TaskDataset td;
      td.task_id = t;
      td.weight = std::stod(weight);
      b.train.tasks.push_back(std::move(td));
    }
  }
  b.train.feature_dim = users.feature_dim;

  std::map<std::string, bool> is_train;
  std::vector<std::string> test_order;
  {
    std::ifstream in(dir / "split.csv");
    if (!in) throw std::runtime_error("cannot read " + (dir / "split.csv").string());
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto comma = line.find(',');
      const std::string id = line.substr(0, comma);
      const std::string role = line.substr(comma + 1);
      is_train[id] = (role == "train");
      if (role == "test") test_order.push_back(id);
    }
  }

  for (const auto& [user, item] : log.events) {
    const auto it = item_to_task.find(item);
    if (it == item_to_task.end())
      throw std::runtime_error("event references unknown item " + item);
    if (!is_train.at(user)) continue;
    const auto& u = users.users.at(user);
    auto& task = b.train.tasks[static_cast<std::size_t>(it->second)];
    task.samples.push_back(u.features);
    task.labels.push_back(u.labels[static_cast<std::size_t>(li)]);
  }
  for (const auto& id : test_order) {
    const auto& u = users.users.at(id);
    b.test_points.push_back(u.features);
    b.test_labels.push_back(u.labels[static_cast<std::size_t>(li)]);
  }
  return b;
}

// --- checkpoints -------------------------------------------------------------

json net_to_json(const nn::DenseNet& net) {
  json layers = json::array();
  for (const auto& l : net.layers) {
    layers.push_back({{"in", l.w.cols},
                      {"out", l.w.rows},
                      {"act", nn::to_string(l.act)},
                      {"dropout", l.dropout},
                      {"w", l.w.data},
                      {"b", l.b}});
  }
  return {{"layers", layers}};
}

nn::DenseNet net_from_json(const json& j) {
  nn::DenseNet net;
  for (const auto& lj : j.at("layers")) {
    nn::Layer l;
    l.w = nn::Matrix(lj.at("out").get<int>(), lj.at("in").get<int>());
    l.w.data = lj.at("w").get<std::vector<double>>();
    l.b = lj.at("b").get<std::vector<double>>();
    l.act = nn::activation_from_string(lj.at("act").get<std::string>());
    l.dropout = lj.at("dropout").get<double>();
    if (l.w.data.size() != static_cast<std::size_t>(l.w.rows) * l.w.cols ||
        l.b.size() != static_cast<std::size_t>(l.w.rows))
      throw std::runtime_error("corrupt checkpoint: layer shape mismatch");
    net.layers.push_back(std::move(l));
  }
  return net;
}

namespace {

json table_to_json(const EmbeddingTable& t) {
  return {{"dim", t.dim}, {"rows", t.rows}};
}

EmbeddingTable table_from_json(const json& j) {
  EmbeddingTable t;
  t.dim = j.at("dim").get<int>();
  t.rows = j.at("rows").get<std::vector<std::vector<double>>>();
  return t;
}

void save_checkpoint(const json& j, const fs::path& file) {
  write_text_file(file, j.dump() + "\n");
}

json load_checkpoint(const fs::path& file, const std::string& expected_kind) {
  json j = json::parse(read_text_file(file));
  const auto kind = j.at("kind").get<std::string>();
  if (kind != expected_kind)
    throw std::runtime_error("checkpoint " + file.string() + " holds a '" + kind +
                             "' model, expected '" + expected_kind + "'");
  return j;
}

}  // namespace

void save_ratio_model(const clr::RatioModel& m, const json& meta, const fs::path& file) {
  save_checkpoint({{"kind", "clr"},
                   {"feature_dim", m.feature_dim},
                   {"net", net_to_json(m.net)},
                   {"embeddings", table_to_json(m.embeddings)},
                   {"meta", meta}},
                  file);
}

std::pair<clr::RatioModel, json> load_ratio_model(const fs::path& file) {
  const json j = load_checkpoint(file, "clr");
  clr::RatioModel m;
  m.feature_dim = j.at("feature_dim").get<int>();
  m.net = net_from_json(j.at("net"));
  m.embeddings = table_from_json(j.at("embeddings"));
  return {std::move(m), j.at("meta")};
}

void save_pre_embedding(const embed::PreEmbeddingModel& m, const json& meta,
                        const fs::path& file) {
  save_checkpoint({{"kind", "pre_embedding"},
                   {"net", net_to_json(m.net)},
                   {"seed_task_ids", m.seed_task_ids},
                   {"meta", meta}},
                  file);
}

std::pair<embed::PreEmbeddingModel, json> load_pre_embedding(const fs::path& file) {
  const json j = load_checkpoint(file, "pre_embedding");
  embed::PreEmbeddingModel m;
  m.net = net_from_json(j.at("net"));
  m.seed_task_ids = j.at("seed_task_ids").get<std::vector<int>>();
  return {std::move(m), j.at("meta")};
}

void save_gaussian(const density::ConditionalGaussian& m, const json& meta,
                   const fs::path& file) {
  save_checkpoint({{"kind", "gaussian"},
                   {"feature_dim", m.feature_dim},
                   {"variance_floor", m.variance_floor},
                   {"net", net_to_json(m.net)},
                   {"embeddings", table_to_json(m.embeddings)},
                   {"meta", meta}},
                  file);
}

std::pair<density::ConditionalGaussian, json> load_gaussian(const fs::path& file) {
  const json j = load_checkpoint(file, "gaussian");
  density::ConditionalGaussian m;
  m.feature_dim = j.at("feature_dim").get<int>();
  m.variance_floor = j.at("variance_floor").get<double>();
  m.net = net_from_json(j.at("net"));
  m.embeddings = table_from_json(j.at("embeddings"));
  return {std::move(m), j.at("meta")};
}

void save_flow(const density::AffineFlow& m, const density::FlowConfig& cfg,
               const json& meta, const fs::path& file) {
  std::vector<double> params(m.param_count());
  m.copy_params_to(params);
  save_checkpoint({{"kind", "flow"},
                   {"feature_dim", m.feature_dim},
                   {"num_tasks", m.num_tasks()},
                   {"config",
                    {{"blocks", cfg.blocks},
                     {"conditioner_hidden", cfg.conditioner_hidden},
                     {"conditioner_layers", cfg.conditioner_layers},
                     {"alpha_clamp", cfg.alpha_clamp},
                     {"prior_mean_range", cfg.prior_mean_range}}},
                   {"actnorm_ready", m.actnorm_ready},
                   {"params", params},
                   {"conditioning", m.conditioning},
                   {"prior_means", m.prior_means},
                   {"meta", meta}},
                  file);
}

std::pair<density::AffineFlow, json> load_flow(const fs::path& file) {
  const json j = load_checkpoint(file, "flow");
  density::FlowConfig cfg;
  cfg.blocks = j.at("config").at("blocks").get<int>();
  cfg.conditioner_hidden = j.at("config").at("conditioner_hidden").get<int>();
  cfg.conditioner_layers = j.at("config").at("conditioner_layers").get<int>();
  cfg.alpha_clamp = j.at("config").at("alpha_clamp").get<double>();
  cfg.prior_mean_range = j.at("config").at("prior_mean_range").get<double>();
  Rng scratch(0);
  density::AffineFlow m = density::make_flow(j.at("feature_dim").get<int>(),
                                             j.at("num_tasks").get<int>(), cfg, scratch);
  const auto params = j.at("params").get<std::vector<double>>();
  if (params.size() != m.param_count())
    throw std::runtime_error("corrupt flow checkpoint: parameter count mismatch");
  m.set_params(params);
  m.conditioning = j.at("conditioning").get<std::vector<std::vector<double>>>();
  m.prior_means = j.at("prior_means").get<std::vector<std::vector<double>>>();
  m.actnorm_ready = j.at("actnorm_ready").get<bool>();
  return {std::move(m), j.at("meta")};
}

// --- text emitters -----------------------------------------------------------

void write_loss_trace_csv(const clr::LossTrace& trace, const fs::path& file) {
  std::string s = "epoch,train_loss,val_loss\n";
  for (std::size_t i = 0; i < trace.train_loss.size(); ++i)
    s += std::to_string(i) + ',' + format_double(trace.train_loss[i]) + ',' +
         format_double(trace.val_loss[i]) + '\n';
  write_text_file(file, s);
}

void write_embedding_csv(const EmbeddingTable& table, const fs::path& file) {
  std::string s = "task_id";
  for (int k = 0; k < table.dim; ++k) s += ",e_" + std::to_string(k + 1);
  s += '\n';
  for (std::size_t t = 0; t < table.size(); ++t) {
    s += std::to_string(t);
    for (double v : table.rows[t]) s += ',' + format_double(v);
    s += '\n';
  }
  write_text_file(file, s);
}

EmbeddingTable read_embedding_csv(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  EmbeddingTable t;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    std::vector<double> row;
    while (std::getline(ss, field, ',')) row.push_back(std::stod(field));
    t.rows.push_back(std::move(row));
  }
  if (!t.rows.empty()) t.dim = static_cast<int>(t.rows.front().size());
  return t;
}

void write_matrix_csv(const nn::Matrix& m, const fs::path& file) {
  std::string s;
  for (int i = 0; i < m.rows; ++i) {
    for (int j = 0; j < m.cols; ++j) {
      if (j) s += ',';
      s += format_double(m(i, j));
    }
    s += '\n';
  }
  write_text_file(file, s);
}

void write_report(const EvalReport& report, const std::string& experiment,
                  std::uint64_t seed, const fs::path& dir) {
  fs::create_directories(dir);
  json per_task = json::object();
  for (const auto& [t, a] : report.per_task_auc) per_task[std::to_string(t)] = a;
  const json j = {{"config_digest", report.config_digest},
                  {"mean_auc", report.mean_auc},
                  {"per_task_auc", per_task}};
  const std::string stem = "report_" + experiment + "_" + std::to_string(seed);
  write_text_file(dir / (stem + ".json"), j.dump(2) + "\n");

  std::string txt = "experiment: " + experiment + "\nconfig: " + report.config_digest +
                    "\nmean_auc: " + format_double(report.mean_auc) + "\n\ntask\tauc\n";
  for (const auto& [t, a] : report.per_task_auc)
    txt += std::to_string(t) + "\t" + format_double(a) + "\n";
  write_text_file(dir / (stem + ".txt"), txt);
}

}  // namespace mtad::io
