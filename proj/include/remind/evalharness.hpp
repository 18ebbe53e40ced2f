#pragma once

// Per-group evaluation, expert specialization and the two protocols
// (extreme missingness of one modality, adaptation to an unseen group).

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "remind/drotrain.hpp"
#include "remind/moefusion.hpp"
#include "remind/synthdata.hpp"

namespace remind {

struct MetricBlock {
  std::size_t support = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  // Some class had precision or recall 0/0; its F1 was counted as 0.
  bool f1_zero_division = false;
};

// Macro-F1 averages over the classes that occur in labels or predictions.
MetricBlock compute_metrics(std::span<const int> predictions, std::span<const int> labels, int classes);

struct GroupMetrics {
  std::map<int, MetricBlock> groups;  // by group id; zero-support groups omitted
  std::map<int, bool> tail;
  std::vector<int> omitted;  // group ids with no support
  MetricBlock overall;
  MetricBlock tail_pooled;  // all samples from tail groups
  double worst_group_accuracy = 0.0;
  int worst_group = -1;
};

// Pure function of (predictions, labels, group ids). Tail flags come from
// `frequencies` (indexed by group id) and `tail_threshold`.
GroupMetrics group_metrics(std::span<const int> predictions, std::span<const int> labels,
                           std::span<const int> group_ids, int classes, std::span<const double> frequencies,
                           double tail_threshold);

// Empty `frequencies` means the evaluated dataset's own group frequencies.
GroupMetrics evaluate(RemindModel& model, const Dataset& data, Phase phase, std::span<const double> frequencies = {},
                      double tail_threshold = -1.0);

// Experts ranked by mean combine weight over tokens and slots; ties go to
// the lower expert index.
std::vector<int> top_k_experts(const Matrix& combine, int n_experts, int slots_per_expert, int k);

struct SpecializationMatrix {
  int k = 0;
  std::vector<int> groups;  // row order
  std::vector<std::size_t> support;
  Matrix freq;  // groups x experts
};

SpecializationMatrix specialization(RemindModel& model, const Dataset& data, int k, Phase phase);
void write_specialization_csv(std::ostream& os, const SpecializationMatrix& s, int modalities);
// Whitespace-aligned text grid for diffing.
void write_specialization_grid(std::ostream& os, const SpecializationMatrix& s, int modalities);

// Trains a fresh model on the given training set.
using ModelFactory = std::function<RemindModel(const Dataset& train)>;

struct ModalityRemoval {
  Dataset data;
  std::vector<std::size_t> removed;  // sorted sample indices
};

// Drops `modality` from a seeded floor(rate * n) subset. Requires every
// sample to carry every modality; rate in [0, 1), and a positive rate must
// remove at least one sample.
ModalityRemoval remove_modality(const Dataset& full, int modality, double rate, std::uint64_t seed);

struct MissingnessResult {
  int modality = 0;
  double rate = 0.0;
  std::size_t removed = 0;
  MetricBlock overall, available, absent;
  bool available_defined = true, absent_defined = true;
  std::vector<std::size_t> test_available, test_absent;  // indices into the modified dataset
  std::uint64_t hash_before_eval = 0, hash_after_eval = 0;
};

MissingnessResult extreme_missingness(const ModelFactory& factory, const Dataset& full, int modality, double rate,
                                      std::uint64_t seed, double test_fraction, Phase eval_phase);

enum class ScopeKind { Nothing, Head, HeadRouter, HeadRouterExperts };

struct FinetuneScope {
  ScopeKind kind = ScopeKind::Nothing;
  double expert_fraction = 1.0;  // HeadRouterExperts only

  std::string label() const;
};

// "nothing", "head", "head+router", "head+router+experts" with optional ":f".
FinetuneScope parse_scope(const std::string& s);

struct UnseenMcConfig {
  ModalityMask heldout;
  std::vector<FinetuneScope> scopes;
  double adapt_fraction = 0.5;
  int finetune_steps = 200;
  OptimizerConfig optimizer;  // plain SGD, full-batch by default
  LossKind loss = LossKind::Focal;
  double focal_gamma = 2.0;
  std::uint64_t seed = 0;
};

struct ScopeResult {
  FinetuneScope scope;
  std::vector<std::string> trained;  // names of unfrozen parameters
  double adapt_loss_before = 0.0;
  double adapt_loss_after = 0.0;
  MetricBlock test;
  std::uint64_t hash_before = 0, hash_after = 0;
  bool out_of_scope_identical = true;
};

struct UnseenMcResult {
  int heldout_group = 0;
  std::vector<std::size_t> adapt, test;  // indices into the held-out subset
  std::vector<ScopeResult> scopes;
};

// (training data without the held-out group, held-out samples)
std::pair<Dataset, Dataset> split_heldout(const Dataset& data, ModalityMask heldout);

// Fine-tunes a copy of `base` once per scope on the adaptation split.
UnseenMcResult adapt_scopes(const RemindModel& base, const Dataset& heldout, const UnseenMcConfig& cfg);
UnseenMcResult unseen_mc_protocol(const ModelFactory& factory, const Dataset& data, const UnseenMcConfig& cfg);

std::string metrics_json(const GroupMetrics& m, int modalities);
std::string missingness_json(const MissingnessResult& r);
std::string unseen_mc_json(const UnseenMcResult& r, int modalities);
void write_group_metrics_csv(std::ostream& os, const GroupMetrics& m, int modalities);

}  // namespace remind
