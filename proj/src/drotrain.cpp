#include "remind/drotrain.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "remind/rng.hpp"

namespace remind {

GroupWeights GroupWeights::uniform(std::size_t groups) {
  if (groups == 0) throw std::invalid_argument("group weights need at least one group");
  return {std::vector<double>(groups, 1.0 / static_cast<double>(groups))};
}

bool GroupWeights::is_simplex(double tol) const {
  double s = 0.0;
  for (double v : lambda) {
    if (!(v >= 0.0) || !std::isfinite(v)) return false;
    s += v;
  }
  return !lambda.empty() && std::abs(s - 1.0) <= tol;
}

GroupValues group_means(std::span<const double> losses, std::span<const int> group_ids) {
  if (losses.size() != group_ids.size()) throw std::invalid_argument("group_means: size mismatch");
  std::map<int, std::pair<double, int>> acc;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    auto& [s, n] = acc[group_ids[i]];
    s += losses[i];
    ++n;
  }
  GroupValues out;
  for (const auto& [g, sn] : acc) out[g] = sn.first / sn.second;
  return out;
}

GroupWeights update_lambda(const GroupWeights& lambda, const GroupValues& losses, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
  const std::size_t n = lambda.lambda.size();
  // log-domain so large gamma*R does not overflow
  std::vector<double> logw(n, -std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < n; ++k) {
    if (lambda.lambda[k] <= 0.0) continue;
    double r = 0.0;
    if (auto it = losses.find(static_cast<int>(k)); it != losses.end()) r = it->second;
    logw[k] = std::log(lambda.lambda[k]) + gamma * r;
  }
  const double mx = *std::max_element(logw.begin(), logw.end());
  if (!std::isfinite(mx)) throw std::invalid_argument("update_lambda: degenerate weights");
  GroupWeights out{std::vector<double>(n, 0.0)};
  double z = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (std::isfinite(logw[k])) out.lambda[k] = std::exp(logw[k] - mx);
    z += out.lambda[k];
  }
  for (double& v : out.lambda) v /= z;
  return out;
}

bool uses_dro(TrainMode m) { return m == TrainMode::Remind || m == TrainMode::DroOnly; }
bool uses_residuals(TrainMode m) { return m == TrainMode::Remind || m == TrainMode::NoDro; }

TrainMode parse_train_mode(const std::string& s) {
  if (s == "remind") return TrainMode::Remind;
  if (s == "shared-moe-ablation") return TrainMode::SharedMoe;
  if (s == "dro-only-ablation") return TrainMode::DroOnly;
  if (s == "no-dro-ablation") return TrainMode::NoDro;
  throw std::invalid_argument("unknown train mode '" + s +
                              "' (expected remind, shared-moe-ablation, dro-only-ablation, no-dro-ablation)");
}

const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Remind: return "remind";
    case TrainMode::SharedMoe: return "shared-moe-ablation";
    case TrainMode::DroOnly: return "dro-only-ablation";
    case TrainMode::NoDro: return "no-dro-ablation";
  }
  return "?";
}

Sampler parse_sampler(const std::string& s) {
  if (s == "uniform") return Sampler::Uniform;
  if (s == "group-balanced") return Sampler::GroupBalanced;
  throw std::invalid_argument("unknown sampler '" + s + "' (expected uniform, group-balanced)");
}

const char* to_string(Sampler s) {
  switch (s) {
    case Sampler::Uniform: return "uniform";
    case Sampler::GroupBalanced: return "group-balanced";
  }
  return "?";
}

TrainConfig TrainConfig::resolved() const {
  validate();
  TrainConfig c = *this;
  if (c.warmup_steps < 0) c.warmup_steps = c.max_steps / 10;
  if (c.stage2_start < 0) c.stage2_start = c.warmup_steps;
  if (c.checkpoint_every < 0) c.checkpoint_every = std::max(1, c.max_steps / 10);
  if (c.stage2_start < c.warmup_steps)
    throw std::invalid_argument("stage2_start (" + std::to_string(c.stage2_start) + ") precedes warmup_steps (" +
                                std::to_string(c.warmup_steps) + ")");
  return c;
}

void TrainConfig::validate() const {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("gamma must be positive");
  if (!(optimizer.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (optimizer.weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (refresh_period < 1) throw std::invalid_argument("refresh_period must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (max_steps < 0) throw std::invalid_argument("max_steps must be >= 0");
  if (warmup_steps < -1 || stage2_start < -1 || checkpoint_every < -1 || checkpoint_every == 0)
    throw std::invalid_argument("warmup_steps, stage2_start, checkpoint_every must be positive or -1 (default)");
  if (focal_gamma < 0.0) throw std::invalid_argument("focal_gamma must be >= 0");
}

StepOutcome dro_step(const SampleLossFn& loss_of, std::span<const int> group_ids, const GroupWeights* lambda,
                     Optimizer& optimizer, const ParamProvider& params) {
  const std::size_t b = group_ids.size();
  if (b == 0) throw std::invalid_argument("dro_step: empty batch");
  StepOutcome out;
  for (int g : group_ids) ++out.group_count[g];

  std::vector<double> weight(b, 1.0 / static_cast<double>(b));
  if (lambda) {
    double total = 0.0;
    for (const auto& [g, n] : out.group_count) {
      if (g < 0 || static_cast<std::size_t>(g) >= lambda->lambda.size())
        throw std::invalid_argument("dro_step: group id " + std::to_string(g) + " outside lambda");
      total += lambda->lambda[g];
    }
    for (std::size_t i = 0; i < b; ++i) {
      const int g = group_ids[i];
      const double lk = total > 0.0 ? lambda->lambda[g] / total : 1.0 / static_cast<double>(out.group_count.size());
      weight[i] = lk / out.group_count[g];
    }
  }

  ad::Tape tape;
  std::vector<double> losses(b);
  ad::Var objective;
  for (std::size_t i = 0; i < b; ++i) {
    ad::Var l = loss_of(tape, i);
    losses[i] = l.value()(0, 0);
    ad::Var w = ad::scale(l, weight[i]);
    objective = i == 0 ? w : ad::add(objective, w);
  }
  out.group_loss = group_means(losses, group_ids);
  out.objective = objective.value()(0, 0);

  std::vector<ad::Parameter*> reached;
  for (ad::Parameter* p : params())
    if (tape.bound(*p)) reached.push_back(p);
  if (!std::isfinite(out.objective)) {
    out.aborted = true;
    out.diagnostic = "non-finite objective";
    return out;
  }
  tape.backward(objective);
  for (ad::Parameter* p : reached) {
    if (!p->grad.all_finite()) {
      out.aborted = true;
      out.diagnostic = "non-finite gradient in " + p->name;
      return out;
    }
  }
  optimizer.step(reached);
  return out;
}

GroupValues group_losses(RemindModel& model, std::span<const Sample* const> batch, Phase phase, LossKind loss,
                         double focal_gamma) {
  std::vector<double> losses;
  std::vector<int> ids;
  for (const Sample* s : batch) {
    ad::Tape tape;
    losses.push_back(model.loss(tape, *s, phase, loss, focal_gamma, false).value()(0, 0));
    ids.push_back(s->group_id);
  }
  return group_means(losses, ids);
}

void write_history_header(std::ostream& os) { os << "step,group_id,loss,lambda,stage,gate_rate,aborted\n"; }

void write_history_rows(std::ostream& os, const StepRecord& rec, std::span<const int> groups) {
  std::string line;
  for (int g : groups) {
    line = std::to_string(rec.step) + ',' + std::to_string(g) + ',';
    if (auto it = rec.group_loss.find(g); it != rec.group_loss.end()) append_double(line, it->second);
    line += ',';
    append_double(line, rec.lambda.at(static_cast<std::size_t>(g)));
    line += ',' + std::to_string(rec.stage) + ',';
    if (auto it = rec.gate_rate.find(g); it != rec.gate_rate.end()) append_double(line, it->second);
    line += rec.aborted ? ",1\n" : ",0\n";
    os << line;
  }
}

Trainer::Trainer(RemindModel& model, const Dataset& train_set, const TrainConfig& cfg)
    : model_(model), data_(train_set), cfg_(cfg.resolved()), optimizer_(cfg_.optimizer) {
  if (train_set.samples.empty()) throw std::invalid_argument("training set is empty");
  const std::size_t groups = group_count(train_set.spec.modalities);
  members_.resize(groups);
  for (std::size_t i = 0; i < train_set.samples.size(); ++i) {
    const int g = train_set.samples[i].group_id;
    if (g < 0 || static_cast<std::size_t>(g) >= groups) throw std::invalid_argument("sample group id out of range");
    members_[g].push_back(i);
  }
  for (std::size_t g = 0; g < groups; ++g)
    if (!members_[g].empty()) active_groups_.push_back(static_cast<int>(g));
  state_.lambda = GroupWeights::uniform(groups);
  state_.window_sum.assign(groups, 0.0);
  state_.window_count.assign(groups, 0);
}

int Trainer::stage_at(int step) const {
  if (step < cfg_.warmup_steps) return 0;
  if (uses_residuals(cfg_.mode) && step >= cfg_.stage2_start) return 2;
  return 1;
}

std::vector<std::size_t> Trainer::batch_indices(int step) const {
  Rng rng = make_rng(mix_seed(cfg_.seed, static_cast<std::uint64_t>(step)), stream::kBatches);
  std::vector<std::size_t> out(static_cast<std::size_t>(cfg_.batch_size));
  if (cfg_.sampler == Sampler::GroupBalanced) {
    std::uniform_int_distribution<std::size_t> pick_group(0, active_groups_.size() - 1);
    for (auto& idx : out) {
      const auto& m = members_[active_groups_[pick_group(rng)]];
      idx = m[std::uniform_int_distribution<std::size_t>(0, m.size() - 1)(rng)];
    }
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, data_.samples.size() - 1);
    for (auto& idx : out) idx = pick(rng);
  }
  return out;
}

std::vector<ad::Parameter*> Trainer::trainable(int stage) {
  unsigned groups = kBank | kAttention | kRouter | kExperts | kHead;
  if (stage == 0) groups |= kEncoders;
  if (stage == 2) groups |= kResiduals;
  return model_.parameters(groups);
}

StepRecord Trainer::step() {
  if (done()) throw std::logic_error("trainer already finished");
  const int t = state_.step;
  const int stage = stage_at(t);
  const Phase phase = stage == 2 ? Phase::Stage2Gated : Phase::Stage1SharedOnly;
  const auto idx = batch_indices(t);
  std::vector<int> ids(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) ids[i] = data_.samples[idx[i]].group_id;

  std::vector<char> fired(idx.size(), 0);
  SampleLossFn loss_of = [&](ad::Tape& tape, std::size_t i) {
    SampleTrace tr;
    ad::Var l = model_.loss(tape, data_.samples[idx[i]], phase, cfg_.loss, cfg_.focal_gamma, true, &tr);
    fired[i] = tr.fusion.gate_fired ? 1 : 0;
    return l;
  };
  ParamProvider params = [&] { return trainable(stage); };

  const bool dro = uses_dro(cfg_.mode);
  GroupWeights frozen;
  const GroupWeights* weights = nullptr;
  if (dro) {
    if (stage == 0) {
      frozen = GroupWeights::uniform(state_.lambda.lambda.size());
      weights = &frozen;
    } else {
      weights = &state_.lambda;
    }
  }
  StepOutcome res = dro_step(loss_of, ids, weights, optimizer_, params);

  if (dro && stage >= 1 && !res.aborted) {
    for (const auto& [g, r] : res.group_loss) {
      state_.window_sum[g] += r;
      ++state_.window_count[g];
    }
    if ((t - cfg_.warmup_steps + 1) % cfg_.refresh_period == 0) {
      GroupValues window;
      for (std::size_t g = 0; g < state_.window_sum.size(); ++g)
        if (state_.window_count[g] > 0) window[static_cast<int>(g)] = state_.window_sum[g] / state_.window_count[g];
      state_.lambda = update_lambda(state_.lambda, window, cfg_.gamma);
      std::fill(state_.window_sum.begin(), state_.window_sum.end(), 0.0);
      std::fill(state_.window_count.begin(), state_.window_count.end(), 0);
    }
  }

  StepRecord rec;
  rec.step = t;
  rec.stage = stage;
  rec.lambda = state_.lambda.lambda;
  rec.group_loss = res.group_loss;
  rec.aborted = res.aborted;
  if (stage == 2) {
    std::map<int, int> hits;
    for (std::size_t i = 0; i < ids.size(); ++i) hits[ids[i]] += fired[i];
    for (const auto& [g, n] : res.group_count) rec.gate_rate[g] = static_cast<double>(hits[g]) / n;
  }
  ++state_.step;
  return rec;
}

namespace {

void append_values(std::string& line, std::span<const double> vals) {
  for (double v : vals) {
    line += ' ';
    append_double(line, v);
  }
}

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> out;
  for (std::string tok; ss >> tok;) out.push_back(tok);
  return out;
}

}  // namespace

void Trainer::save(std::ostream& os) {
  write_model(os, model_);
  os << "trainer-state 1\n";
  os << "step " << state_.step << '\n';
  std::string line = "lambda";
  append_values(line, state_.lambda.lambda);
  os << line << '\n';
  line = "window_sum";
  append_values(line, state_.window_sum);
  os << line << '\n';
  os << "window_count";
  for (int c : state_.window_count) os << ' ' << c;
  os << '\n';
  for (const auto& [name, mo] : optimizer_.state()) {
    line = "moment " + name + ' ' + std::to_string(mo.t) + ' ' + std::to_string(mo.m.rows()) + ' ' +
           std::to_string(mo.m.cols());
    append_values(line, mo.m.values());
    append_values(line, mo.v.values());
    os << line << '\n';
  }
  os << "end-trainer\n";
}

TrainCheckpoint load_training_checkpoint(std::istream& is) {
  TrainCheckpoint ck;
  ck.model = read_model(is);
  std::string line;
  if (!std::getline(is, line)) return ck;
  if (line != "trainer-state 1") throw std::runtime_error("checkpoint: unexpected section '" + line + "'");
  ck.has_state = true;
  bool ended = false;
  while (std::getline(is, line)) {
    if (line == "end-trainer") {
      ended = true;
      break;
    }
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    const std::string& key = toks[0];
    auto doubles_from = [&](std::size_t first, std::size_t count) {
      if (toks.size() < first + count) throw std::runtime_error("checkpoint: short line '" + key + "'");
      std::vector<double> v(count);
      for (std::size_t i = 0; i < count; ++i) v[i] = parse_double_token(toks[first + i]);
      return v;
    };
    if (key == "step") {
      ck.state.step = std::stoi(toks.at(1));
    } else if (key == "lambda") {
      ck.state.lambda.lambda = doubles_from(1, toks.size() - 1);
    } else if (key == "window_sum") {
      ck.state.window_sum = doubles_from(1, toks.size() - 1);
    } else if (key == "window_count") {
      ck.state.window_count.clear();
      for (std::size_t i = 1; i < toks.size(); ++i) ck.state.window_count.push_back(std::stoi(toks[i]));
    } else if (key == "moment") {
      if (toks.size() < 5) throw std::runtime_error("checkpoint: malformed moment line");
      Optimizer::Moments mo;
      mo.t = std::stoll(toks[2]);
      const auto r = static_cast<std::size_t>(std::stoull(toks[3]));
      const auto c = static_cast<std::size_t>(std::stoull(toks[4]));
      if (toks.size() != 5 + 2 * r * c) throw std::runtime_error("checkpoint: moment size mismatch for " + toks[1]);
      mo.m = Matrix(r, c, doubles_from(5, r * c));
      mo.v = Matrix(r, c, doubles_from(5 + r * c, r * c));
      ck.moments[toks[1]] = std::move(mo);
    } else {
      throw std::runtime_error("checkpoint: unknown trainer key '" + key + "'");
    }
  }
  if (!ended) throw std::runtime_error("checkpoint: missing end-trainer");
  return ck;
}

void restore_trainer(Trainer& trainer, const TrainCheckpoint& ckpt) {
  if (!ckpt.has_state) throw std::invalid_argument("checkpoint carries no trainer state");
  TrainerState& s = trainer.state();
  if (ckpt.state.lambda.lambda.size() != s.lambda.lambda.size() ||
      ckpt.state.window_sum.size() != s.window_sum.size() || ckpt.state.window_count.size() != s.window_count.size())
    throw std::invalid_argument("checkpoint trainer state does not match the dataset's group count");
  if (ckpt.state.step < 0 || ckpt.state.step > trainer.config().max_steps)
    throw std::invalid_argument("checkpoint step " + std::to_string(ckpt.state.step) + " outside [0, max_steps]");
  s = ckpt.state;
  trainer.optimizer().state() = ckpt.moments;
}

TrainHistory run_trainer(Trainer& trainer, const TrainHooks& hooks) {
  TrainHistory hist;
  const int every = trainer.config().checkpoint_every;
  const int last = trainer.config().max_steps;
  if (hooks.on_checkpoint && trainer.state().step == 0) hooks.on_checkpoint(0, trainer);
  while (!trainer.done()) {
    if (hooks.stop_after >= 0 && trainer.state().step >= hooks.stop_after) break;
    StepRecord rec = trainer.step();
    if (hooks.on_step) hooks.on_step(rec);
    hist.records.push_back(std::move(rec));
    const int s = trainer.state().step;
    if (hooks.on_checkpoint && (s % every == 0 || s == last)) hooks.on_checkpoint(s, trainer);
  }
  return hist;
}

TrainHistory train(const Dataset& train_set, RemindModel& model, const TrainConfig& cfg, const TrainHooks& hooks) {
  Trainer trainer(model, train_set, cfg);
  return run_trainer(trainer, hooks);
}

}  // namespace remind
