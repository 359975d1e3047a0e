#include "mtad/core.hpp"

#include <cmath>

namespace mtad {

std::vector<std::pair<int, int>> TaskCollection::population() const {
  std::vector<std::pair<int, int>> pop;
  pop.reserve(population_size());
  for (std::size_t t = 0; t < tasks.size(); ++t)
    for (std::size_t i = 0; i < tasks[t].samples.size(); ++i)
      pop.emplace_back(static_cast<int>(t), static_cast<int>(i));
  return pop;
}

std::size_t TaskCollection::population_size() const {
  std::size_t n = 0;
  for (const auto& t : tasks) n += t.samples.size();
  return n;
}

void TaskCollection::reset_empirical_weights() {
  const double n = static_cast<double>(population_size());
  for (auto& t : tasks) t.weight = static_cast<double>(t.samples.size()) / n;
}

void EvalReport::finalize() {
  double s = 0.0;
  for (const auto& [id, auc] : per_task_auc) s += auc;
  mean_auc = per_task_auc.empty() ? 0.0 : s / static_cast<double>(per_task_auc.size());
}

void validate_collection(const TaskCollection& c) {
  if (c.tasks.empty()) throw std::invalid_argument("collection has no tasks");
  if (c.feature_dim == 0) throw std::invalid_argument("feature_dim must be positive");

  double weight_sum = 0.0;
  for (const auto& task : c.tasks) {
    const std::string tag = "task " + std::to_string(task.task_id);
    if (task.samples.empty())
      throw std::invalid_argument("empty-task: " + tag + " has no samples");
    if (!(task.weight > 0.0) || task.weight > 1.0)
      throw std::invalid_argument("weight error: " + tag + " weight " +
                                  std::to_string(task.weight) + " outside (0,1]");
    if (!task.labels.empty() && task.labels.size() != task.samples.size())
      throw std::invalid_argument("label error: " + tag +
                                  " labels not aligned with samples");
    for (const auto& x : task.samples) {
      if (x.size() != c.feature_dim)
        throw std::invalid_argument("dimension-mismatch: " + tag + " sample of length " +
                                    std::to_string(x.size()) + ", expected " +
                                    std::to_string(c.feature_dim));
      for (double v : x)
        if (!std::isfinite(v))
          throw std::invalid_argument("non-finite-value: " + tag);
    }
    weight_sum += task.weight;
  }
  if (std::abs(weight_sum - 1.0) > 1e-9)
    throw std::invalid_argument("weight-sum error: task weights sum to " +
                                std::to_string(weight_sum));
}

}  // namespace mtad
