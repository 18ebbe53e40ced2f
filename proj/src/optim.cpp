#include "remind/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace remind {

void Optimizer::step(std::span<ad::Parameter* const> params) {
  for (ad::Parameter* p : params) {
    if (cfg_.kind == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < p->value.size(); ++i)
        p->value[i] -= cfg_.lr * (p->grad[i] + cfg_.weight_decay * p->value[i]);
      continue;
    }
    Moments& mo = state_[p->name];
    if (!mo.m.same_shape(p->value)) {
      mo.m = Matrix(p->value.rows(), p->value.cols());
      mo.v = Matrix(p->value.rows(), p->value.cols());
      mo.t = 0;
    }
    ++mo.t;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(mo.t));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(mo.t));
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * g;
      mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = mo.m[i] / bc1;
      const double vhat = mo.v[i] / bc2;
      p->value[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p->value[i]);
    }
  }
}

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adamw") return OptimizerKind::AdamW;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd or adamw)");
}

const char* to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adamw"; }

}  // namespace remind
