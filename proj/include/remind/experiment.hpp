#pragma once

// Experiment configuration (YAML) and the pipelines behind the CLI
// subcommands. Every pipeline validates its inputs before touching the
// output directory, and writes only deterministic content.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "remind/drotrain.hpp"
#include "remind/evalharness.hpp"
#include "remind/gradanalysis.hpp"
#include "remind/moefusion.hpp"
#include "remind/synthdata.hpp"

namespace remind {

struct AnalysisConfig {
  int samples_per_group = 32;
  WholeDirection whole = WholeDirection::UnionOfDraws;
  int top_k = 3;
  double power_tol = 1e-10;
  int power_max_iter = 10000;
  double window_fraction = 0.25;  // trailing share of checkpoints summarised
};

struct MissingnessProtocolConfig {
  int modality = 1;  // 1-based
  double rate = 0.8;
  std::vector<TrainMode> modes{TrainMode::Remind, TrainMode::SharedMoe};
};

struct UnseenProtocolConfig {
  std::optional<std::uint32_t> heldout;  // bitmask; default: second most frequent group
  std::vector<FinetuneScope> scopes{{ScopeKind::Nothing},
                                    {ScopeKind::Head},
                                    {ScopeKind::HeadRouter},
                                    {ScopeKind::HeadRouterExperts, 1.0}};
  double adapt_fraction = 0.5;
  int finetune_steps = 1000;
  OptimizerConfig optimizer{OptimizerKind::Sgd, 0.05};
};

struct ExperimentConfig {
  DatasetSpec dataset;
  double test_fraction = 0.3;
  RouterConfig router;
  TrainConfig train;
  AnalysisConfig analysis;
  MissingnessProtocolConfig missingness;
  UnseenProtocolConfig unseen;
  std::vector<TrainMode> sweep_modes{TrainMode::Remind, TrainMode::NoDro, TrainMode::DroOnly, TrainMode::SharedMoe};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::uint64_t seed = 1;

  // Throws std::invalid_argument naming the offending key.
  void validate() const;
};

ExperimentConfig default_config();
// Strict: unknown keys and wrong types are std::invalid_argument.
ExperimentConfig parse_config(const std::string& yaml_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string dump_config(const ExperimentConfig& cfg);
// Copy with the run seed applied to data, split, model and batches.
ExperimentConfig with_seed(const ExperimentConfig& cfg, std::uint64_t seed);

struct DataSplit {
  Dataset train, test;
};

DataSplit split_dataset(const Dataset& data, const ExperimentConfig& cfg);
RemindModel make_model(const ExperimentConfig& cfg, const DatasetSpec& spec);
// Phase used for evaluation after `step` training steps under `mode`.
Phase phase_for(TrainMode mode, const TrainConfig& resolved, int step);
ModelFactory model_factory(const ExperimentConfig& cfg, TrainMode mode);

struct GcSummary {
  int head_group = -1;
  double head_median = 0.0;
  double tail_median = 0.0;
  std::size_t head_values = 0, tail_values = 0;
  std::vector<int> window_steps;
  bool defined = false;
};

// Medians over the trailing `window_fraction` of checkpoints; head = most
// frequent group, tail = frequency below `tail_threshold`.
GcSummary summarize_gc(std::span<const ConsistencyRecord> records, std::span<const double> frequencies,
                       double tail_threshold, double window_fraction);

// File layout inside the output directory.
namespace files {
inline constexpr const char* kDataset = "dataset.txt";
inline constexpr const char* kHistogram = "histogram.csv";
inline constexpr const char* kConfig = "config.yaml";
inline constexpr const char* kCheckpoints = "checkpoints";
inline constexpr const char* kHistory = "history.csv";
inline constexpr const char* kMetricsJson = "metrics.json";
inline constexpr const char* kMetricsCsv = "metrics.csv";
inline constexpr const char* kConsistency = "consistency.csv";
inline constexpr const char* kSpecializationCsv = "specialization.csv";
inline constexpr const char* kSpecializationGrid = "specialization.txt";
inline constexpr const char* kAnalysisJson = "analysis.json";
}  // namespace files

std::string checkpoint_name(int step);

struct TrainRunOptions {
  bool resume = false;
  int stop_after = -1;
};

struct TrainRunResult {
  int final_step = 0;
  std::uint64_t model_hash = 0;
  GroupMetrics test_metrics;
  bool resumed = false;
  int resumed_from = 0;
};

struct SweepRow {
  TrainMode mode;
  std::uint64_t seed;
  GroupMetrics metrics;
};

void run_generate(const ExperimentConfig& cfg, const std::filesystem::path& out);
TrainRunResult run_train(const ExperimentConfig& cfg, const std::filesystem::path& out, const TrainRunOptions& opt = {});
GcSummary run_analyze(const ExperimentConfig& cfg, const std::filesystem::path& out);
void run_protocol(const ExperimentConfig& cfg, const std::string& name, const std::filesystem::path& out);
std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const std::filesystem::path& out);

// Mean / sample standard deviation over seeds; rows = groups + entire set,
// columns = modes. `metric` is "accuracy" or "macro_f1".
void write_sweep_table(std::ostream& os, std::span<const SweepRow> rows, std::span<const TrainMode> modes,
                       int modalities, const std::string& metric, bool stddev);

}  // namespace remind
