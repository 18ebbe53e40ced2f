#pragma once

// Soft-MoE fusion with shared + per-group residual routing.
//
// Routing for group k uses Phi = Phi_shared + Phi_k, where Phi_k starts at
// zero and is consulted only when the shared routing is uncertain:
// entropy of the shared routing probabilities >= threshold (or KL from
// uniform <= threshold). Dispatch weights normalise over tokens, combine
// weights over expert slots.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "remind/autodiff.hpp"
#include "remind/synthdata.hpp"

namespace remind {

enum class GatingMetric { Entropy, KlUniform };
// Tokens: softmax over tokens per expert-slot column (Soft-MoE convention).
// Experts: softmax over experts per token and slot (appendix code variant).
enum class DispatchAxis { Tokens, Experts };
// PerToken: entropy over experts per token/slot, averaged.
// Global: one softmax over every (token, slot) logit.
enum class EntropyMode { PerToken, Global };
enum class Activation { Gelu, Relu };

struct RouterConfig {
  int embed_dim = 8;
  int n_experts = 4;
  int slots_per_expert = 1;
  double scale = 1.0;
  bool learn_scale = true;
  GatingMetric gating_metric = GatingMetric::Entropy;
  std::optional<double> threshold;  // defaults: 0.8 ln(n) for entropy, 0.1 for KL
  int expert_hidden = 16;
  DispatchAxis dispatch_axis = DispatchAxis::Tokens;
  EntropyMode entropy_mode = EntropyMode::PerToken;
  Activation activation = Activation::Gelu;

  int slots() const { return n_experts * slots_per_expert; }
  // Threshold actually applied; `tokens` matters only for the global entropy mode.
  double effective_threshold(int tokens = 1) const;
  void validate() const;
};

struct UncertaintyReport {
  // Each matrix is tokens x slots.
  Matrix entropy_nats, entropy_bits, normalized_certainty, max_prob, margin, gini, variance, kl_vs_uniform;
  double mean_entropy_nats = 0, mean_entropy_bits = 0, mean_normalized_certainty = 0, mean_max_prob = 0,
         mean_margin = 0, mean_gini = 0, mean_variance = 0, mean_kl_vs_uniform = 0;
};

// `prob` has one simplex row over the n experts per (token, slot), ordered
// token-major. Throws std::invalid_argument when a row sum is off by > 1e-6.
UncertaintyReport uncertainty_metrics(const Matrix& prob, std::size_t slots = 1);

struct NormalizedRouting {
  Matrix tokens;  // unit rows
  Matrix router;  // unit columns times s
  std::size_t guarded_rows = 0;
  std::size_t guarded_cols = 0;
};

NormalizedRouting normalize_for_routing(const Matrix& z, const Matrix& phi, double scale);
Matrix routing_logits(const Matrix& z_norm, const Matrix& phi_effective);
Matrix dispatch_weights(const Matrix& logits);
Matrix combine_weights(const Matrix& logits);
// Softmax over experts for every token and slot; rows ordered token-major.
Matrix expert_probabilities(const Matrix& logits, int n_experts, int slots_per_expert);

// True when the residual routing should be applied.
bool gate(const UncertaintyReport& report, const RouterConfig& cfg, int tokens = 1);

class Expert {
 public:
  Expert() = default;
  Expert(int index, int embed_dim, int hidden, std::uint64_t seed);
  ad::Var apply(ad::Tape& tape, ad::Var x, Activation act);
  std::vector<ad::Parameter*> parameters() { return {&w1, &b1, &w2, &b2}; }

  ad::Parameter w1, b1, w2, b2;
};

// Y = C * [f_j(D^T Z_norm)]_j for expert-slot rows ordered expert-major.
ad::Var apply_experts(ad::Tape& tape, ad::Var z_norm, ad::Var dispatch, ad::Var combine, std::span<Expert> experts,
                      int slots_per_expert, Activation act);

enum class Phase { Stage1SharedOnly, Stage2Gated };

struct RoutingMatrices {
  ad::Parameter shared;  // d x (n*P)
  ad::Parameter scale;   // 1 x 1
  std::map<std::uint32_t, ad::Parameter> residuals;  // keyed by group bitmask

  // Creates a zero residual for `mask` if absent; returns true when created.
  bool ensure_residual(ModalityMask mask);
  ad::Parameter* residual(ModalityMask mask);
};

struct FusionTrace {
  ad::Var fused;
  Matrix dispatch;
  Matrix combine;
  UncertaintyReport report;  // from the shared-only logits
  bool gate_fired = false;
  bool residual_created = false;
  bool residual_missing = false;  // gate fired but no residual existed and none was created
  std::size_t guarded = 0;
};

struct FusionOutput {
  Matrix fused;
  Matrix dispatch;
  Matrix combine;
  UncertaintyReport report;
  bool gate_fired = false;
  bool residual_created = false;
};

// Attention pre-mixer + router + experts.
class FusionBlock {
 public:
  FusionBlock() = default;
  FusionBlock(const RouterConfig& cfg, std::uint64_t seed);

  const RouterConfig& config() const { return cfg_; }
  RouterConfig& config() { return cfg_; }
  RoutingMatrices& routing() { return routing_; }
  const RoutingMatrices& routing() const { return routing_; }
  std::vector<Expert>& experts() { return experts_; }
  ad::Parameter& wq() { return wq_; }
  ad::Parameter& wk() { return wk_; }
  ad::Parameter& wv() { return wv_; }

  // `z` is the l*m x d token grid. In stage 2 a missing residual is created
  // (zero) when create_missing is set, otherwise treated as zero.
  FusionTrace fuse(ad::Tape& tape, ad::Var z, ModalityMask group, Phase phase, bool create_missing = true);

  std::vector<ad::Parameter*> attention_parameters() { return {&wq_, &wk_, &wv_}; }
  std::vector<ad::Parameter*> router_parameters();
  std::vector<ad::Parameter*> residual_parameters();
  std::vector<ad::Parameter*> expert_parameters(std::size_t count);

 private:
  ad::Var attend(ad::Tape& tape, ad::Var z);

  RouterConfig cfg_;
  ad::Parameter wq_, wk_, wv_;
  RoutingMatrices routing_;
  std::vector<Expert> experts_;
};

// Value-level fusion of a batch of token grids from one group.
std::vector<FusionOutput> fused_forward(FusionBlock& block, std::span<const Matrix> token_grids, ModalityMask group,
                                        Phase phase);

enum class LossKind { CrossEntropy, Focal };

struct ModelConfig {
  int modalities = 4;
  int tokens_per_modality = 2;
  std::vector<int> raw_dims;
  int classes = 2;
  RouterConfig router;
  std::uint64_t seed = 0;

  int tokens() const { return modalities * tokens_per_modality; }
  void validate() const;
  static ModelConfig from_spec(const DatasetSpec& spec, const RouterConfig& router, std::uint64_t seed);
};

// Flag set naming trainable parameter groups.
enum ParamGroup : unsigned {
  kEncoders = 1u << 0,
  kBank = 1u << 1,
  kAttention = 1u << 2,
  kRouter = 1u << 3,
  kResiduals = 1u << 4,
  kExperts = 1u << 5,
  kHead = 1u << 6,
  kFusion = kAttention | kRouter | kExperts,
  kAll = 0x7f,
};

struct SampleTrace {
  ad::Var logits;  // 1 x classes
  FusionTrace fusion;
};

// Encoders -> bank fill -> fusion block -> mean-pool -> linear head.
class RemindModel {
 public:
  RemindModel() = default;
  explicit RemindModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ModalityEncoders& encoders() { return encoders_; }
  EmbeddingBank& bank() { return bank_; }
  FusionBlock& fusion() { return fusion_; }
  ad::Parameter& head_weight() { return head_w_; }
  ad::Parameter& head_bias() { return head_b_; }

  SampleTrace forward(ad::Tape& tape, const Sample& sample, Phase phase, bool create_missing = true);
  // Loss of one sample built on `tape`.
  ad::Var loss(ad::Tape& tape, const Sample& sample, Phase phase, LossKind kind, double focal_gamma,
               bool create_missing = true, SampleTrace* trace = nullptr);

  // Class probabilities without mutating the model.
  std::vector<double> predict_proba(const Sample& sample, Phase phase);
  int predict(const Sample& sample, Phase phase);

  // Deterministic order: encoders, bank, attention, router, residuals, experts, head.
  std::vector<ad::Parameter*> parameters(unsigned groups = kAll, double expert_fraction = 1.0);
  std::vector<ad::Parameter*> parameters_by_name(std::span<const std::string> names);

  // FNV-1a over names and raw parameter bytes.
  std::uint64_t hash();

 private:
  ModelConfig cfg_;
  ModalityEncoders encoders_;
  EmbeddingBank bank_;
  FusionBlock fusion_;
  ad::Parameter head_w_, head_b_;
};

ad::Var focal_loss(ad::Var probs, int label, double gamma);
ad::Var cross_entropy_loss(ad::Var probs, int label);
double focal_loss_value(double p_label, double gamma);

// Checkpoint text layout:
//   remind-checkpoint 1
//   config <json>
//   param <name> <rows> <cols> <values...>      (one per parameter, residuals
//                                                named router.residual.<mask>)
//   end-model
// Any further lines are opaque sections owned by the trainer.
void write_model(std::ostream& os, RemindModel& model);
RemindModel read_model(std::istream& is);
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

GatingMetric parse_gating_metric(const std::string& s);
DispatchAxis parse_dispatch_axis(const std::string& s);
EntropyMode parse_entropy_mode(const std::string& s);
Activation parse_activation(const std::string& s);
LossKind parse_loss_kind(const std::string& s);
const char* to_string(GatingMetric v);
const char* to_string(DispatchAxis v);
const char* to_string(EntropyMode v);
const char* to_string(Activation v);
const char* to_string(LossKind v);

// Shortest round-trip decimal, shared by the text formats.
void append_double(std::string& out, double v);
double parse_double_token(std::string_view tok);

}  // namespace remind
