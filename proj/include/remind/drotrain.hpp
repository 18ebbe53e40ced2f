#pragma once

// Group-DRO training.
//
//   theta <- theta - eta * sum_k lambda_k grad R_k(theta)
//   lambda_k <- lambda_k exp(gamma R_k) / sum_j lambda_j exp(gamma R_j)
//
// Only groups present in a batch contribute to the theta step (lambda is
// renormalised over them) and absent groups keep their lambda factor of 1.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "remind/moefusion.hpp"
#include "remind/optim.hpp"
#include "remind/synthdata.hpp"

namespace remind {

struct GroupWeights {
  std::vector<double> lambda;

  static GroupWeights uniform(std::size_t groups);
  bool is_simplex(double tol = 1e-12) const;
};

// Group id -> value, for groups present in a batch.
using GroupValues = std::map<int, double>;

// Mean of per-sample losses within each group.
GroupValues group_means(std::span<const double> losses, std::span<const int> group_ids);

// Exponentiated update; groups missing from `losses` use R = 0. Throws on gamma <= 0.
GroupWeights update_lambda(const GroupWeights& lambda, const GroupValues& losses, double gamma);

enum class TrainMode {
  Remind,           // DRO + gated residual routing
  SharedMoe,        // ERM, shared routing only (plain Soft-MoE)
  DroOnly,          // DRO, shared routing only ("w/o expert specialisation")
  NoDro,            // ERM + gated residual routing ("w/o DRO")
};

bool uses_dro(TrainMode m);
bool uses_residuals(TrainMode m);
TrainMode parse_train_mode(const std::string& s);
const char* to_string(TrainMode m);

// Uniform draws from the training set; GroupBalanced picks a group uniformly,
// then a member.
enum class Sampler { Uniform, GroupBalanced };
Sampler parse_sampler(const std::string& s);
const char* to_string(Sampler s);

struct TrainConfig {
  TrainMode mode = TrainMode::Remind;
  double gamma = 0.02;
  OptimizerConfig optimizer;
  int refresh_period = 1;
  int warmup_steps = -1;   // -1: 10% of max_steps
  int stage2_start = -1;   // -1: equal to warmup_steps
  int batch_size = 32;
  int max_steps = 200;
  LossKind loss = LossKind::Focal;
  double focal_gamma = 2.0;
  Sampler sampler = Sampler::Uniform;
  std::uint64_t seed = 0;
  int checkpoint_every = -1;  // -1: 10% of max_steps

  // Copy with defaults resolved; throws std::invalid_argument on inconsistencies.
  TrainConfig resolved() const;
  void validate() const;
};

struct StepOutcome {
  GroupValues group_loss;
  std::map<int, int> group_count;
  std::map<int, int> gate_fired;
  double objective = 0.0;
  bool aborted = false;
  std::string diagnostic;
};

using SampleLossFn = std::function<ad::Var(ad::Tape&, std::size_t)>;

// One step on sum_k w_k R_k. With `lambda`, w_k = lambda_k renormalised over the
// present groups; without it (ERM), every sample weighs 1/B. Non-finite
// gradients abort the step without touching parameters.
// `params` is queried after the forward pass, so parameters created during
// it (fresh residuals) can be included; only those reached by the loss move.
using ParamProvider = std::function<std::vector<ad::Parameter*>()>;
StepOutcome dro_step(const SampleLossFn& loss_of, std::span<const int> group_ids, const GroupWeights* lambda,
                     Optimizer& optimizer, const ParamProvider& params);

// Per-group mean losses of `batch` under the model (no parameter change).
GroupValues group_losses(RemindModel& model, std::span<const Sample* const> batch, Phase phase, LossKind loss,
                         double focal_gamma);

struct StepRecord {
  int step = 0;
  int stage = 0;
  std::vector<double> lambda;  // snapshot after this step's update
  GroupValues group_loss;
  std::map<int, double> gate_rate;
  bool aborted = false;
};

struct TrainHistory {
  std::vector<StepRecord> records;
};

// step,group_id,loss,lambda,stage,gate_rate,aborted (one row per group with
// training data; loss/gate_rate are blank when the group missed the batch).
void write_history_header(std::ostream& os);
void write_history_rows(std::ostream& os, const StepRecord& rec, std::span<const int> groups);

struct TrainerState {
  int step = 0;
  GroupWeights lambda;
  std::vector<double> window_sum;
  std::vector<int> window_count;
};

class Trainer {
 public:
  Trainer(RemindModel& model, const Dataset& train_set, const TrainConfig& cfg);

  const TrainConfig& config() const { return cfg_; }
  const TrainerState& state() const { return state_; }
  TrainerState& state() { return state_; }
  Optimizer& optimizer() { return optimizer_; }
  bool done() const { return state_.step >= cfg_.max_steps; }
  int stage_at(int step) const;
  // Groups that have at least one training sample.
  const std::vector<int>& active_groups() const { return active_groups_; }

  StepRecord step();
  std::vector<std::size_t> batch_indices(int step) const;
  std::vector<ad::Parameter*> trainable(int stage);

  // Model section followed by trainer state; reload with load_training_checkpoint.
  void save(std::ostream& os);

 private:
  RemindModel& model_;
  const Dataset& data_;
  TrainConfig cfg_;
  TrainerState state_;
  Optimizer optimizer_;
  std::vector<std::vector<std::size_t>> members_;
  std::vector<int> active_groups_;
};

struct TrainCheckpoint {
  RemindModel model;
  bool has_state = false;
  TrainerState state;
  std::map<std::string, Optimizer::Moments> moments;
};

TrainCheckpoint load_training_checkpoint(std::istream& is);
// Restores optimizer moments and counters into a freshly built trainer.
void restore_trainer(Trainer& trainer, const TrainCheckpoint& ckpt);

struct TrainHooks {
  // Called at step 0, every checkpoint_every steps and at the final step.
  std::function<void(int step, Trainer&)> on_checkpoint;
  std::function<void(const StepRecord&)> on_step;
  int stop_after = -1;  // stop early (simulated interruption) once this step is reached
};

TrainHistory train(const Dataset& train_set, RemindModel& model, const TrainConfig& cfg, const TrainHooks& hooks = {});
// Continues a trainer (fresh or restored) until done or hooks.stop_after.
TrainHistory run_trainer(Trainer& trainer, const TrainHooks& hooks);

}  // namespace remind
