#pragma once

#include <map>
#include <span>
#include <string>

#include "remind/autodiff.hpp"

namespace remind {

enum class OptimizerKind { Sgd, AdamW };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Sgd;
  double lr = 1e-2;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Applies one update to each parameter from its current grad.
// AdamW moments are keyed by parameter name so they survive checkpointing.
class Optimizer {
 public:
  struct Moments {
    Matrix m;
    Matrix v;
    long long t = 0;
  };

  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  void step(std::span<ad::Parameter* const> params);
  const OptimizerConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  const std::map<std::string, Moments>& state() const { return state_; }
  std::map<std::string, Moments>& state() { return state_; }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Moments> state_;
};

OptimizerKind parse_optimizer_kind(const std::string& s);
const char* to_string(OptimizerKind k);

}  // namespace remind
