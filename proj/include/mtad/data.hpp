#pragma once

#include <map>
#include <string>

#include "mtad/core.hpp"
#include "mtad/rng.hpp"

namespace mtad::data {

/// Binary exposure events, deduplicated on load.
struct EventLog {
  std::vector<std::pair<std::string, std::string>> events;  // (user, item)
};

/// Per-user dense features plus categorical labels keyed by name.
struct UserTable {
  std::vector<std::string> label_keys;
  std::size_t feature_dim = 0;
  struct User {
    std::vector<int> labels;  // aligned with label_keys
    FeatureVector features;
  };
  std::map<std::string, User> users;

  int label_index(const std::string& key) const;
  /// Number of distinct values of a label, i.e. max id + 1.
  int label_arity(const std::string& key) const;
};

/// Parses the event and user CSVs. Events: header `user_id,item_id`.
/// Users: header `user_id,label:<k1>,...,f_0,...,f_{d-1}`. Duplicate
/// (user,item) rows collapse to one; an event naming an unknown user is an
/// error listing the ids.
std::pair<EventLog, UserTable> load(const std::string& events_path,
                                    const std::string& users_path);

/// Seeded disjoint user split; |train| = round(ratio * n).
std::pair<std::vector<std::string>, std::vector<std::string>> split_users(
    const UserTable& users, double ratio, Rng& rng);

/// Drops items with fewer than min_exposures events, then keeps the
/// floor(keep_fraction * n) items with the lowest label-histogram entropy
/// (natural log, ties by item id ascending).
std::vector<std::string> filter_tasks(const EventLog& log, const UserTable& users,
                                      int min_exposures, double keep_fraction,
                                      const std::string& label_key);

/// Most frequent label category among the item's exposed users (nominal)
/// and least frequent present category (anomalous), ties by category id
/// ascending. Throws if only one category is present.
std::pair<int, int> label_task(const EventLog& log, const UserTable& users,
                               const std::string& item, const std::string& label_key);

/// TaskCollection over the retained items: samples are the features of
/// exposed *training* users, weights are train-exposure shares, task ids
/// follow the items sorted ascending. label_key, when non-empty, attaches
/// that label to each sample.
TaskCollection build_collection(const EventLog& log, const UserTable& users,
                                const std::vector<std::string>& retained_items,
                                const std::vector<std::string>& train_ids,
                                const std::string& label_key = "");

/// Item ids in collection task order (retained items sorted ascending).
std::vector<std::string> task_order(const std::vector<std::string>& retained_items);

}  // namespace mtad::data
