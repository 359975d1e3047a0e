#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "mtad/clr.hpp"
#include "mtad/core.hpp"
#include "mtad/density.hpp"
#include "mtad/embed.hpp"
#include "mtad/synth.hpp"

namespace mtad::io {

using json = nlohmann::json;

/// On-disk experiment unit shared by the synthetic generator and the
/// ingestion pipeline. A benchmark directory holds:
///   meta.json   feature dim, label key/arity, provenance
///   users.csv   user_id,label:<key>,f_0..f_{d-1} (train and test users)
///   events.csv  user_id,item_id (training exposures; sample order)
///   tasks.csv   item_id,task_id,weight,nominal_categories,anomalous_categories
///   split.csv   user_id,role (train|test)
/// Nominal/anomalous category sets are pipe-separated label ids.
struct Benchmark {
  TaskCollection train;
  std::vector<FeatureVector> test_points;
  std::vector<int> test_labels;
  std::vector<std::vector<int>> nominal_categories;    // per task
  std::vector<std::vector<int>> anomalous_categories;  // per task
  std::vector<std::string> item_ids;                   // per task
  std::string label_key = "category";
  int label_arity = 0;
  json meta;

  std::vector<int> nominal_test(int task) const;
  std::vector<int> anomalous_test(int task) const;
  /// Active sets as ordered sets (synthetic benchmarks only).
  std::vector<std::set<int>> active_sets() const;
};

Benchmark from_synth(const synth::SynthBenchmark& sb);

void save_benchmark(const Benchmark& b, const std::filesystem::path& dir);
Benchmark load_benchmark(const std::filesystem::path& dir);

// --- model checkpoints (JSON; doubles round-trip exactly) ------------------

json net_to_json(const nn::DenseNet& net);
nn::DenseNet net_from_json(const json& j);

void save_ratio_model(const clr::RatioModel& m, const json& meta,
                      const std::filesystem::path& file);
std::pair<clr::RatioModel, json> load_ratio_model(const std::filesystem::path& file);

void save_pre_embedding(const embed::PreEmbeddingModel& m, const json& meta,
                        const std::filesystem::path& file);
std::pair<embed::PreEmbeddingModel, json> load_pre_embedding(
    const std::filesystem::path& file);

void save_gaussian(const density::ConditionalGaussian& m, const json& meta,
                   const std::filesystem::path& file);
std::pair<density::ConditionalGaussian, json> load_gaussian(
    const std::filesystem::path& file);

void save_flow(const density::AffineFlow& m, const density::FlowConfig& cfg,
               const json& meta, const std::filesystem::path& file);
std::pair<density::AffineFlow, json> load_flow(const std::filesystem::path& file);

// --- text emitters ----------------------------------------------------------

/// Doubles formatted with enough digits to round-trip exactly.
std::string format_double(double v);

void write_loss_trace_csv(const clr::LossTrace& trace,
                          const std::filesystem::path& file);
void write_embedding_csv(const EmbeddingTable& table,
                         const std::filesystem::path& file);
EmbeddingTable read_embedding_csv(const std::filesystem::path& file);
void write_matrix_csv(const nn::Matrix& m, const std::filesystem::path& file);

/// report_<experiment>_<seed>.json plus a readable .txt table.
void write_report(const EvalReport& report, const std::string& experiment,
                  std::uint64_t seed, const std::filesystem::path& dir);

void write_text_file(const std::filesystem::path& file, const std::string& text);

}  // namespace mtad::io
