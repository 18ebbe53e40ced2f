#pragma once

// Synthetic long-tailed multimodal data.
//
// Each of m modalities is missing independently with probability p_i, so a
// sample's modality combination (MC) group g has mass
//   Pr(g) = prod_{i in g} (1 - p_i) * prod_{j not in g} p_j,
// conditioned here on g being non-empty. Labels follow a rule that differs
// per group (concept shift), so no single fusion function fits every group.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "remind/autodiff.hpp"
#include "remind/matrix.hpp"

namespace remind {

inline constexpr int kMaxModalities = 8;

struct ModalityMask {
  std::uint32_t bits = 0;

  bool has(int i) const { return (bits >> i) & 1u; }
  int count() const;
  bool empty() const { return bits == 0; }
  // Canonical index of this mask in enumerate_groups() order.
  int group_id() const { return static_cast<int>(bits) - 1; }
  static ModalityMask from_group_id(int id) { return {static_cast<std::uint32_t>(id + 1)}; }
  // "M1+M3" style label (1-based modality numbers).
  std::string label(int m) const;

  friend bool operator==(ModalityMask, ModalityMask) = default;
};

int group_count(int m);

// All 2^m - 1 non-empty masks in ascending bitmask order.
std::vector<ModalityMask> enumerate_groups(int m);

// Unnormalised product-form probability of observing exactly `mask`.
double group_probability(ModalityMask mask, std::span<const double> p);

// Group probabilities renormalised over the non-empty masks, indexed by group_id.
std::vector<double> group_distribution(std::span<const double> p);

struct ConceptShift {
  double shared_weight = 1.0;  // weight of the label functional common to all groups
  double group_weight = 1.0;   // weight of the group-specific functional
  double synergy = 0.0;        // M1 x M2 interaction, active only when both are present
  double label_noise = 0.0;    // probability of replacing the label by a uniform class
  double subset_keep = 1.0;    // chance that a present modality enters a group's rule
};

struct DatasetSpec {
  int modalities = 4;
  std::vector<double> missing_prob;
  int tokens_per_modality = 2;
  int embed_dim = 8;
  std::vector<int> raw_dims;
  int classes = 2;
  int n_samples = 1000;
  ConceptShift concept_shift;
  // 0 = independent missingness; rho in (0, 1] shares the uniform draw
  // across modalities with probability rho.
  double missing_correlation = 0.0;
  std::uint64_t seed = 0;
  double tail_threshold = 0.15;

  // Throws std::invalid_argument naming the first violated constraint.
  void validate() const;
};

struct Sample {
  std::vector<Matrix> raw;  // one entry per modality; empty when missing
  ModalityMask mask;
  int label = 0;
  int group_id = 0;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<Sample> samples;
  std::vector<std::size_t> histogram;  // counts indexed by group_id
  std::vector<std::string> warnings;

  std::vector<double> frequencies() const;
};

// Per-group label rule derived deterministically from spec.seed.
class LabelRule {
 public:
  explicit LabelRule(const DatasetSpec& spec);
  // Noise-free class for the given raw blocks under group `mask`.
  int classify(std::span<const Matrix> raw, ModalityMask mask) const;
  // Modalities that enter group g's rule.
  ModalityMask support(int group_id) const { return support_[static_cast<std::size_t>(group_id)]; }

 private:
  double score(std::span<const Matrix> raw, ModalityMask mask, int cls) const;

  DatasetSpec spec_;
  // [class][modality] raw_dim weights applied to the token average.
  std::vector<std::vector<std::vector<double>>> shared_;
  // [group][class][modality]
  std::vector<std::vector<std::vector<std::vector<double>>>> specific_;
  std::vector<ModalityMask> support_;
  std::vector<double> synergy_a_, synergy_b_;
};

Dataset sample_dataset(const DatasetSpec& spec);

// Draws n samples of one fixed group from the spec's generator (probe studies).
std::vector<Sample> sample_group(const DatasetSpec& spec, ModalityMask mask, std::size_t n, std::uint64_t seed);

// Recomputes histogram/warnings after samples were edited.
void refresh_histogram(Dataset& ds);

// Stratified-by-group split; returns (train, test) sample index lists.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(const Dataset& ds, double test_fraction,
                                                                            std::uint64_t seed);
Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);

// Group ids whose renormalised probability is below the tail threshold.
std::vector<bool> tail_flags(std::span<const double> frequencies, double threshold);

// Line-oriented text format:
//   remind-dataset 1
//   spec <json>
//   samples <n>
//   <group_id> <label> <values of present blocks, modality order, row-major>
// Values use the shortest round-trip decimal form, so read(write(x)) == x.
void write_dataset(std::ostream& os, const Dataset& ds);
Dataset read_dataset(std::istream& is);
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);
// group_id,mask,modalities,count,frequency,probability,tail
void write_histogram_csv(std::ostream& os, const Dataset& ds);

std::string spec_to_json(const DatasetSpec& spec);
DatasetSpec spec_from_json(const std::string& text);

// Learnable per-group vector B_k in R^d, broadcast into missing modality slots.
class EmbeddingBank {
 public:
  EmbeddingBank() = default;
  EmbeddingBank(int modalities, int embed_dim, std::uint64_t seed);

  std::size_t size() const { return vectors_.size(); }
  ad::Parameter& vector(int group_id) { return vectors_.at(static_cast<std::size_t>(group_id)); }
  const ad::Parameter& vector(int group_id) const { return vectors_.at(static_cast<std::size_t>(group_id)); }
  std::vector<ad::Parameter>& parameters() { return vectors_; }

 private:
  std::vector<ad::Parameter> vectors_;
};

// Per-modality linear map raw (l x raw_dim_i) -> l x d.
class ModalityEncoders {
 public:
  ModalityEncoders() = default;
  ModalityEncoders(std::span<const int> raw_dims, int embed_dim, std::uint64_t seed);

  int modalities() const { return static_cast<int>(weights_.size()); }
  int embed_dim() const { return embed_dim_; }
  ad::Var encode(ad::Tape& tape, int modality, const Matrix& raw);
  std::vector<ad::Parameter*> parameters();
  ad::Parameter& weight(int i) { return weights_.at(static_cast<std::size_t>(i)); }
  ad::Parameter& bias(int i) { return biases_.at(static_cast<std::size_t>(i)); }

 private:
  int embed_dim_ = 0;
  std::vector<ad::Parameter> weights_;
  std::vector<ad::Parameter> biases_;
};

// Token grid Z in R^{(l*m) x d}: present modalities encoded, each missing
// modality's l x d block filled with B_{group}. Blocks follow modality order.
ad::Var apply_missing(ad::Tape& tape, const Sample& sample, EmbeddingBank& bank, ModalityEncoders& encoders,
                      int tokens_per_modality);

}  // namespace remind
