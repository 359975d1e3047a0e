#include "mtad/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mtad::data {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, ',')) fields.push_back(cur);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

[[noreturn]] void parse_error(const std::string& path, std::size_t line,
                              const std::string& what) {
  throw std::runtime_error("parse error: " + path + ":" + std::to_string(line) +
                           ": " + what);
}

}  // namespace

int UserTable::label_index(const std::string& key) const {
  for (std::size_t i = 0; i < label_keys.size(); ++i)
    if (label_keys[i] == key) return static_cast<int>(i);
  throw std::invalid_argument("unknown label key: " + key);
}

int UserTable::label_arity(const std::string& key) const {
  const int li = label_index(key);
  int mx = -1;
  for (const auto& [id, u] : users) mx = std::max(mx, u.labels[static_cast<std::size_t>(li)]);
  return mx + 1;
}

std::pair<EventLog, UserTable> load(const std::string& events_path,
                                    const std::string& users_path) {
  UserTable users;
  {
    std::ifstream in(users_path);
    if (!in) throw std::runtime_error("cannot open " + users_path);
    std::string line;
    if (!std::getline(in, line)) parse_error(users_path, 1, "missing header");
    auto header = split_csv_line(line);
    if (header.empty() || header[0] != "user_id")
      parse_error(users_path, 1, "first column must be user_id");
    std::size_t f_start = 1;
    for (std::size_t i = 1; i < header.size(); ++i) {
      if (header[i].rfind("label:", 0) == 0) {
        if (f_start != i) parse_error(users_path, 1, "label columns must precede features");
        users.label_keys.push_back(header[i].substr(6));
        f_start = i + 1;
      }
    }
    users.feature_dim = header.size() - f_start;
    if (users.feature_dim == 0) parse_error(users_path, 1, "no feature columns");

    std::size_t ln = 1;
    while (std::getline(in, line)) {
      ++ln;
      if (line.empty()) continue;
      auto f = split_csv_line(line);
      if (f.size() != header.size())
        parse_error(users_path, ln, "expected " + std::to_string(header.size()) + " fields");
      UserTable::User u;
      try {
        for (std::size_t i = 1; i < f_start; ++i) u.labels.push_back(std::stoi(f[i]));
        for (std::size_t i = f_start; i < f.size(); ++i)
          u.features.push_back(std::stod(f[i]));
      } catch (const std::exception&) {
        parse_error(users_path, ln, "bad numeric field");
      }
      for (double v : u.features)
        if (!std::isfinite(v)) parse_error(users_path, ln, "non-finite feature");
      if (!users.users.emplace(f[0], std::move(u)).second)
        parse_error(users_path, ln, "duplicate user id " + f[0]);
    }
  }

  EventLog log;
  {
    std::ifstream in(events_path);
    if (!in) throw std::runtime_error("cannot open " + events_path);
    std::string line;
    if (!std::getline(in, line)) parse_error(events_path, 1, "missing header");
    auto header = split_csv_line(line);
    if (header.size() != 2 || header[0] != "user_id" || header[1] != "item_id")
      parse_error(events_path, 1, "header must be user_id,item_id");
    std::set<std::pair<std::string, std::string>> seen;
    std::set<std::string> dangling;
    std::size_t ln = 1;
    while (std::getline(in, line)) {
      ++ln;
      if (line.empty()) continue;
      auto f = split_csv_line(line);
      if (f.size() != 2) parse_error(events_path, ln, "expected 2 fields");
      if (!users.users.count(f[0])) {
        dangling.insert(f[0]);
        continue;
      }
      if (seen.emplace(f[0], f[1]).second) log.events.emplace_back(f[0], f[1]);
    }
    if (!dangling.empty()) {
      std::string ids;
      for (const auto& id : dangling) ids += (ids.empty() ? "" : ", ") + id;
      throw std::runtime_error("events reference unknown users: " + ids);
    }
  }
  return {std::move(log), std::move(users)};
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_users(
    const UserTable& users, double ratio, Rng& rng) {
  if (!(ratio > 0.0) || !(ratio < 1.0))
    throw std::invalid_argument("split ratio must be in (0, 1)");
  std::vector<std::string> ids;
  ids.reserve(users.users.size());
  for (const auto& [id, u] : users.users) ids.push_back(id);
  rng.shuffle(ids);
  const std::size_t n_train = static_cast<std::size_t>(
      std::llround(ratio * static_cast<double>(ids.size())));
  std::vector<std::string> train(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::string> test(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  return {std::move(train), std::move(test)};
}

namespace {

std::map<std::string, std::vector<const std::string*>> exposures_by_item(
    const EventLog& log) {
  std::map<std::string, std::vector<const std::string*>> by_item;
  for (const auto& [user, item] : log.events) by_item[item].push_back(&user);
  return by_item;
}

double histogram_entropy(const std::map<int, int>& counts) {
  double n = 0.0;
  for (const auto& [c, k] : counts) n += k;
  double h = 0.0;
  for (const auto& [c, k] : counts) {
    if (k == 0) continue;
    const double p = k / n;
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace

std::vector<std::string> filter_tasks(const EventLog& log, const UserTable& users,
                                      int min_exposures, double keep_fraction,
                                      const std::string& label_key) {
  if (min_exposures < 1) throw std::invalid_argument("min_exposures must be >= 1");
  if (!(keep_fraction > 0.0) || keep_fraction > 1.0)
    throw std::invalid_argument("keep_fraction must be in (0, 1]");
  const int li = users.label_index(label_key);

  const auto by_item = exposures_by_item(log);
  std::vector<std::pair<double, std::string>> ranked;  // (entropy, item)
  for (const auto& [item, exposed] : by_item) {
    if (static_cast<int>(exposed.size()) < min_exposures) continue;
    std::map<int, int> counts;
    for (const auto* uid : exposed)
      counts[users.users.at(*uid).labels[static_cast<std::size_t>(li)]]++;
    ranked.emplace_back(histogram_entropy(counts), item);
  }
  if (ranked.empty()) throw std::runtime_error("no items survive the exposure filter");
  std::sort(ranked.begin(), ranked.end());  // entropy, then item id ascending
  const std::size_t keep = static_cast<std::size_t>(
      keep_fraction * static_cast<double>(ranked.size()));
  ranked.resize(std::max<std::size_t>(keep, 1));
  std::vector<std::string> items;
  items.reserve(ranked.size());
  for (auto& [h, item] : ranked) items.push_back(std::move(item));
  return items;
}

std::pair<int, int> label_task(const EventLog& log, const UserTable& users,
                               const std::string& item, const std::string& label_key) {
  const int li = users.label_index(label_key);
  std::map<int, int> counts;
  for (const auto& [user, it] : log.events)
    if (it == item) counts[users.users.at(user).labels[static_cast<std::size_t>(li)]]++;
  if (counts.empty()) throw std::invalid_argument("item has no exposures: " + item);
  if (counts.size() < 2)
    throw std::runtime_error("no anomalous class for item " + item +
                             " (single label category present)");
  int nominal = -1, anomalous = -1, max_c = -1, min_c = -1;
  for (const auto& [cat, k] : counts) {  // ascending category order breaks ties
    if (k > max_c) {
      max_c = k;
      nominal = cat;
    }
    if (min_c < 0 || k < min_c) {
      min_c = k;
      anomalous = cat;
    }
  }
  return {nominal, anomalous};
}

std::vector<std::string> task_order(const std::vector<std::string>& retained_items) {
  std::vector<std::string> order = retained_items;
  std::sort(order.begin(), order.end());
  return order;
}

TaskCollection build_collection(const EventLog& log, const UserTable& users,
                                const std::vector<std::string>& retained_items,
                                const std::vector<std::string>& train_ids,
                                const std::string& label_key) {
  const auto order = task_order(retained_items);
  const std::set<std::string> train_set(train_ids.begin(), train_ids.end());
  const int li = label_key.empty() ? -1 : users.label_index(label_key);

  std::map<std::string, int> item_to_task;
  for (std::size_t t = 0; t < order.size(); ++t)
    item_to_task[order[t]] = static_cast<int>(t);

  TaskCollection c;
  c.feature_dim = users.feature_dim;
  c.tasks.resize(order.size());
  for (std::size_t t = 0; t < order.size(); ++t) c.tasks[t].task_id = static_cast<int>(t);

  std::size_t total = 0;
  for (const auto& [user, item] : log.events) {
    const auto it = item_to_task.find(item);
    if (it == item_to_task.end() || !train_set.count(user)) continue;
    const auto& u = users.users.at(user);
    auto& task = c.tasks[static_cast<std::size_t>(it->second)];
    task.samples.push_back(u.features);
    if (li >= 0) task.labels.push_back(u.labels[static_cast<std::size_t>(li)]);
    ++total;
  }
  for (const auto& task : c.tasks)
    if (task.samples.empty())
      throw std::runtime_error("task for item " +
                               order[static_cast<std::size_t>(task.task_id)] +
                               " is empty after the train split");
  for (auto& task : c.tasks)
    task.weight = static_cast<double>(task.samples.size()) / static_cast<double>(total);
  return c;
}

}  // namespace mtad::data
