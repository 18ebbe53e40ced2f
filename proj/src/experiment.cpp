#include "remind/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

namespace remind {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// ---- config parsing ----

namespace {

void check_keys(const YAML::Node& node, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!node || node.IsNull()) return;
  if (!node.IsMap()) throw std::invalid_argument(section + ": expected a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw std::invalid_argument("unknown key '" + (section.empty() ? key : section + "." + key) + "'");
  }
}

template <class T>
void read(const YAML::Node& node, const char* key, const std::string& section, T& out) {
  if (!node || !node[key]) return;
  try {
    out = node[key].as<T>();
  } catch (const YAML::Exception&) {
    throw std::invalid_argument(section + "." + key + ": wrong type");
  }
}

template <class E, class Parse>
void read_enum(const YAML::Node& node, const char* key, const std::string& section, E& out, Parse parse) {
  std::string s;
  read(node, key, section, s);
  if (s.empty()) return;
  try {
    out = parse(s);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(section + "." + key + ": " + e.what());
  }
}

std::vector<TrainMode> read_modes(const YAML::Node& node, const char* key, const std::string& section,
                                  std::vector<TrainMode> fallback) {
  std::vector<std::string> names;
  read(node, key, section, names);
  if (!node || !node[key]) return fallback;
  std::vector<TrainMode> out;
  for (const auto& n : names) out.push_back(parse_train_mode(n));
  return out;
}

ModalityMask parse_mask_label(const std::string& s, int m) {
  ModalityMask mask;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, '+');) {
    if (part.size() < 2 || (part[0] != 'M' && part[0] != 'm'))
      throw std::invalid_argument("modality combination '" + s + "' (expected e.g. M1+M3)");
    const int i = std::stoi(part.substr(1));
    if (i < 1 || i > m) throw std::invalid_argument("modality M" + std::to_string(i) + " out of range");
    mask.bits |= 1u << (i - 1);
  }
  if (mask.empty()) throw std::invalid_argument("empty modality combination");
  return mask;
}

}  // namespace

void ExperimentConfig::validate() const {
  dataset.validate();
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("dataset.test_fraction must be in (0, 1)");
  RouterConfig r = router;
  r.embed_dim = dataset.embed_dim;
  r.validate();
  if (router.embed_dim != dataset.embed_dim)
    throw std::invalid_argument("router.embed_dim (" + std::to_string(router.embed_dim) + ") does not match dataset.embed_dim (" +
                                std::to_string(dataset.embed_dim) + ")");
  train.resolved();
  if (analysis.samples_per_group < 1) throw std::invalid_argument("analysis.samples_per_group must be >= 1");
  if (analysis.top_k < 1 || analysis.top_k > router.n_experts)
    throw std::invalid_argument("analysis.top_k must be in [1, router.n_experts]");
  if (!(analysis.power_tol > 0.0) || analysis.power_max_iter < 1)
    throw std::invalid_argument("analysis.power_tol must be > 0 and power_max_iter >= 1");
  if (!(analysis.window_fraction > 0.0 && analysis.window_fraction <= 1.0))
    throw std::invalid_argument("analysis.window_fraction must be in (0, 1]");
  if (missingness.modality < 1 || missingness.modality > dataset.modalities)
    throw std::invalid_argument("protocol.extreme_missingness.modality out of range");
  if (!(missingness.rate >= 0.0 && missingness.rate < 1.0))
    throw std::invalid_argument("protocol.extreme_missingness.rate must be in [0, 1)");
  if (missingness.modes.empty()) throw std::invalid_argument("protocol.extreme_missingness.modes is empty");
  if (unseen.heldout && (*unseen.heldout == 0 || *unseen.heldout >= (1u << dataset.modalities)))
    throw std::invalid_argument("protocol.unseen_mc.heldout out of range");
  if (unseen.scopes.empty()) throw std::invalid_argument("protocol.unseen_mc.scopes is empty");
  if (!(unseen.adapt_fraction > 0.0 && unseen.adapt_fraction < 1.0))
    throw std::invalid_argument("protocol.unseen_mc.adapt_fraction must be in (0, 1)");
  if (unseen.finetune_steps < 0) throw std::invalid_argument("protocol.unseen_mc.finetune_steps must be >= 0");
  if (!(unseen.optimizer.lr > 0.0)) throw std::invalid_argument("protocol.unseen_mc.lr must be > 0");
  if (sweep_modes.empty()) throw std::invalid_argument("sweep.modes is empty");
  if (seeds.empty()) throw std::invalid_argument("seeds is empty");
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.dataset.modalities = 4;
  c.dataset.missing_prob = {0.08, 0.12, 0.15, 0.15};
  c.dataset.tokens_per_modality = 2;
  c.dataset.embed_dim = 8;
  c.dataset.raw_dims = {4, 4, 4, 4};
  c.dataset.classes = 2;
  c.dataset.n_samples = 4000;
  c.router.embed_dim = 8;
  c.train.optimizer.kind = OptimizerKind::AdamW;
  c.train.optimizer.lr = 0.01;
  c.train.max_steps = 2000;
  return c;
}

ExperimentConfig parse_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  ExperimentConfig c = default_config();
  if (!root || root.IsNull()) return c;
  check_keys(root, "", {"seed", "seeds", "dataset", "router", "train", "analysis", "protocol", "sweep"});
  read(root, "seed", "", c.seed);
  read(root, "seeds", "", c.seeds);

  const YAML::Node d = root["dataset"];
  check_keys(d, "dataset",
             {"modalities", "missing_prob", "tokens_per_modality", "embed_dim", "raw_dims", "classes", "n_samples",
              "missing_correlation", "tail_threshold", "test_fraction", "concept_shift"});
  const int old_m = c.dataset.modalities;
  read(d, "modalities", "dataset", c.dataset.modalities);
  if (c.dataset.modalities != old_m && d && (!d["missing_prob"] || !d["raw_dims"]))
    throw std::invalid_argument("dataset: changing modalities requires missing_prob and raw_dims");
  read(d, "missing_prob", "dataset", c.dataset.missing_prob);
  read(d, "tokens_per_modality", "dataset", c.dataset.tokens_per_modality);
  read(d, "embed_dim", "dataset", c.dataset.embed_dim);
  read(d, "raw_dims", "dataset", c.dataset.raw_dims);
  read(d, "classes", "dataset", c.dataset.classes);
  read(d, "n_samples", "dataset", c.dataset.n_samples);
  read(d, "missing_correlation", "dataset", c.dataset.missing_correlation);
  read(d, "tail_threshold", "dataset", c.dataset.tail_threshold);
  read(d, "test_fraction", "dataset", c.test_fraction);
  const YAML::Node cs = d ? d["concept_shift"] : YAML::Node();
  check_keys(cs, "dataset.concept_shift", {"shared_weight", "group_weight", "synergy", "label_noise", "subset_keep"});
  read(cs, "shared_weight", "dataset.concept_shift", c.dataset.concept_shift.shared_weight);
  read(cs, "group_weight", "dataset.concept_shift", c.dataset.concept_shift.group_weight);
  read(cs, "synergy", "dataset.concept_shift", c.dataset.concept_shift.synergy);
  read(cs, "label_noise", "dataset.concept_shift", c.dataset.concept_shift.label_noise);
  read(cs, "subset_keep", "dataset.concept_shift", c.dataset.concept_shift.subset_keep);

  const YAML::Node r = root["router"];
  check_keys(r, "router",
             {"embed_dim", "n_experts", "slots_per_expert", "scale", "learn_scale", "gating_metric", "threshold",
              "expert_hidden", "dispatch_axis", "entropy_mode", "activation"});
  c.router.embed_dim = c.dataset.embed_dim;
  read(r, "embed_dim", "router", c.router.embed_dim);
  read(r, "n_experts", "router", c.router.n_experts);
  read(r, "slots_per_expert", "router", c.router.slots_per_expert);
  read(r, "scale", "router", c.router.scale);
  read(r, "learn_scale", "router", c.router.learn_scale);
  read_enum(r, "gating_metric", "router", c.router.gating_metric, parse_gating_metric);
  if (r && r["threshold"] && !r["threshold"].IsNull()) {
    double t = 0.0;
    read(r, "threshold", "router", t);
    c.router.threshold = t;
  }
  read(r, "expert_hidden", "router", c.router.expert_hidden);
  read_enum(r, "dispatch_axis", "router", c.router.dispatch_axis, parse_dispatch_axis);
  read_enum(r, "entropy_mode", "router", c.router.entropy_mode, parse_entropy_mode);
  read_enum(r, "activation", "router", c.router.activation, parse_activation);

  const YAML::Node t = root["train"];
  check_keys(t, "train",
             {"mode", "gamma", "optimizer", "lr", "weight_decay", "refresh_period", "warmup_steps", "stage2_start",
              "batch_size", "max_steps", "loss", "focal_gamma", "sampler", "checkpoint_every"});
  read_enum(t, "mode", "train", c.train.mode, parse_train_mode);
  read(t, "gamma", "train", c.train.gamma);
  read_enum(t, "optimizer", "train", c.train.optimizer.kind, parse_optimizer_kind);
  read(t, "lr", "train", c.train.optimizer.lr);
  read(t, "weight_decay", "train", c.train.optimizer.weight_decay);
  read(t, "refresh_period", "train", c.train.refresh_period);
  read(t, "warmup_steps", "train", c.train.warmup_steps);
  read(t, "stage2_start", "train", c.train.stage2_start);
  read(t, "batch_size", "train", c.train.batch_size);
  read(t, "max_steps", "train", c.train.max_steps);
  read_enum(t, "loss", "train", c.train.loss, parse_loss_kind);
  read(t, "focal_gamma", "train", c.train.focal_gamma);
  read_enum(t, "sampler", "train", c.train.sampler, parse_sampler);
  read(t, "checkpoint_every", "train", c.train.checkpoint_every);

  const YAML::Node a = root["analysis"];
  check_keys(a, "analysis", {"samples_per_group", "whole_direction", "top_k", "power_tol", "power_max_iter", "window_fraction"});
  read(a, "samples_per_group", "analysis", c.analysis.samples_per_group);
  read_enum(a, "whole_direction", "analysis", c.analysis.whole, parse_whole_direction);
  read(a, "top_k", "analysis", c.analysis.top_k);
  read(a, "power_tol", "analysis", c.analysis.power_tol);
  read(a, "power_max_iter", "analysis", c.analysis.power_max_iter);
  read(a, "window_fraction", "analysis", c.analysis.window_fraction);

  const YAML::Node p = root["protocol"];
  check_keys(p, "protocol", {"extreme_missingness", "unseen_mc"});
  const YAML::Node em = p ? p["extreme_missingness"] : YAML::Node();
  check_keys(em, "protocol.extreme_missingness", {"modality", "rate", "modes"});
  read(em, "modality", "protocol.extreme_missingness", c.missingness.modality);
  read(em, "rate", "protocol.extreme_missingness", c.missingness.rate);
  c.missingness.modes = read_modes(em, "modes", "protocol.extreme_missingness", c.missingness.modes);
  const YAML::Node um = p ? p["unseen_mc"] : YAML::Node();
  check_keys(um, "protocol.unseen_mc", {"heldout", "scopes", "adapt_fraction", "finetune_steps", "optimizer", "lr"});
  if (um && um["heldout"] && !um["heldout"].IsNull()) {
    std::string label;
    read(um, "heldout", "protocol.unseen_mc", label);
    c.unseen.heldout = parse_mask_label(label, c.dataset.modalities).bits;
  }
  if (um && um["scopes"]) {
    std::vector<std::string> names;
    read(um, "scopes", "protocol.unseen_mc", names);
    c.unseen.scopes.clear();
    for (const auto& n : names) c.unseen.scopes.push_back(parse_scope(n));
  }
  read(um, "adapt_fraction", "protocol.unseen_mc", c.unseen.adapt_fraction);
  read(um, "finetune_steps", "protocol.unseen_mc", c.unseen.finetune_steps);
  read_enum(um, "optimizer", "protocol.unseen_mc", c.unseen.optimizer.kind, parse_optimizer_kind);
  read(um, "lr", "protocol.unseen_mc", c.unseen.optimizer.lr);

  const YAML::Node sw = root["sweep"];
  check_keys(sw, "sweep", {"modes"});
  c.sweep_modes = read_modes(sw, "modes", "sweep", c.sweep_modes);

  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

namespace {

template <class Seq>
void emit_seq(YAML::Emitter& e, const char* key, const Seq& seq) {
  e << YAML::Key << key << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (const auto& v : seq) e << v;
  e << YAML::EndSeq;
}

std::string double_text(double v) {
  std::string s;
  append_double(s, v);
  return s;
}

std::vector<std::string> mode_names(std::span<const TrainMode> modes) {
  std::vector<std::string> out;
  for (TrainMode m : modes) out.emplace_back(to_string(m));
  return out;
}

}  // namespace

std::string dump_config(const ExperimentConfig& c) {
  YAML::Emitter e;
  e << YAML::BeginMap;
  e << YAML::Key << "seed" << YAML::Value << c.seed;
  emit_seq(e, "seeds", c.seeds);

  e << YAML::Key << "dataset" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "modalities" << YAML::Value << c.dataset.modalities;
  std::vector<std::string> mp;
  for (double p : c.dataset.missing_prob) mp.push_back(double_text(p));
  emit_seq(e, "missing_prob", mp);
  e << YAML::Key << "tokens_per_modality" << YAML::Value << c.dataset.tokens_per_modality;
  e << YAML::Key << "embed_dim" << YAML::Value << c.dataset.embed_dim;
  emit_seq(e, "raw_dims", c.dataset.raw_dims);
  e << YAML::Key << "classes" << YAML::Value << c.dataset.classes;
  e << YAML::Key << "n_samples" << YAML::Value << c.dataset.n_samples;
  e << YAML::Key << "missing_correlation" << YAML::Value << double_text(c.dataset.missing_correlation);
  e << YAML::Key << "tail_threshold" << YAML::Value << double_text(c.dataset.tail_threshold);
  e << YAML::Key << "test_fraction" << YAML::Value << double_text(c.test_fraction);
  e << YAML::Key << "concept_shift" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "shared_weight" << YAML::Value << double_text(c.dataset.concept_shift.shared_weight);
  e << YAML::Key << "group_weight" << YAML::Value << double_text(c.dataset.concept_shift.group_weight);
  e << YAML::Key << "synergy" << YAML::Value << double_text(c.dataset.concept_shift.synergy);
  e << YAML::Key << "label_noise" << YAML::Value << double_text(c.dataset.concept_shift.label_noise);
  e << YAML::Key << "subset_keep" << YAML::Value << double_text(c.dataset.concept_shift.subset_keep);
  e << YAML::EndMap << YAML::EndMap;

  e << YAML::Key << "router" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "embed_dim" << YAML::Value << c.router.embed_dim;
  e << YAML::Key << "n_experts" << YAML::Value << c.router.n_experts;
  e << YAML::Key << "slots_per_expert" << YAML::Value << c.router.slots_per_expert;
  e << YAML::Key << "scale" << YAML::Value << double_text(c.router.scale);
  e << YAML::Key << "learn_scale" << YAML::Value << c.router.learn_scale;
  e << YAML::Key << "gating_metric" << YAML::Value << to_string(c.router.gating_metric);
  e << YAML::Key << "threshold" << YAML::Value;
  if (c.router.threshold)
    e << double_text(*c.router.threshold);
  else
    e << YAML::Null;
  e << YAML::Key << "expert_hidden" << YAML::Value << c.router.expert_hidden;
  e << YAML::Key << "dispatch_axis" << YAML::Value << to_string(c.router.dispatch_axis);
  e << YAML::Key << "entropy_mode" << YAML::Value << to_string(c.router.entropy_mode);
  e << YAML::Key << "activation" << YAML::Value << to_string(c.router.activation);
  e << YAML::EndMap;

  const TrainConfig& t = c.train;
  e << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "mode" << YAML::Value << to_string(t.mode);
  e << YAML::Key << "gamma" << YAML::Value << double_text(t.gamma);
  e << YAML::Key << "optimizer" << YAML::Value << to_string(t.optimizer.kind);
  e << YAML::Key << "lr" << YAML::Value << double_text(t.optimizer.lr);
  e << YAML::Key << "weight_decay" << YAML::Value << double_text(t.optimizer.weight_decay);
  e << YAML::Key << "refresh_period" << YAML::Value << t.refresh_period;
  e << YAML::Key << "warmup_steps" << YAML::Value << t.warmup_steps;
  e << YAML::Key << "stage2_start" << YAML::Value << t.stage2_start;
  e << YAML::Key << "batch_size" << YAML::Value << t.batch_size;
  e << YAML::Key << "max_steps" << YAML::Value << t.max_steps;
  e << YAML::Key << "loss" << YAML::Value << to_string(t.loss);
  e << YAML::Key << "focal_gamma" << YAML::Value << double_text(t.focal_gamma);
  e << YAML::Key << "sampler" << YAML::Value << to_string(t.sampler);
  e << YAML::Key << "checkpoint_every" << YAML::Value << t.checkpoint_every;
  e << YAML::EndMap;

  e << YAML::Key << "analysis" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "samples_per_group" << YAML::Value << c.analysis.samples_per_group;
  e << YAML::Key << "whole_direction" << YAML::Value << to_string(c.analysis.whole);
  e << YAML::Key << "top_k" << YAML::Value << c.analysis.top_k;
  e << YAML::Key << "power_tol" << YAML::Value << double_text(c.analysis.power_tol);
  e << YAML::Key << "power_max_iter" << YAML::Value << c.analysis.power_max_iter;
  e << YAML::Key << "window_fraction" << YAML::Value << double_text(c.analysis.window_fraction);
  e << YAML::EndMap;

  e << YAML::Key << "protocol" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "extreme_missingness" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "modality" << YAML::Value << c.missingness.modality;
  e << YAML::Key << "rate" << YAML::Value << double_text(c.missingness.rate);
  emit_seq(e, "modes", mode_names(c.missingness.modes));
  e << YAML::EndMap;
  e << YAML::Key << "unseen_mc" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "heldout" << YAML::Value;
  if (c.unseen.heldout)
    e << ModalityMask{*c.unseen.heldout}.label(c.dataset.modalities);
  else
    e << YAML::Null;
  std::vector<std::string> scopes;
  for (const auto& s : c.unseen.scopes) scopes.push_back(s.label());
  emit_seq(e, "scopes", scopes);
  e << YAML::Key << "adapt_fraction" << YAML::Value << double_text(c.unseen.adapt_fraction);
  e << YAML::Key << "finetune_steps" << YAML::Value << c.unseen.finetune_steps;
  e << YAML::Key << "optimizer" << YAML::Value << to_string(c.unseen.optimizer.kind);
  e << YAML::Key << "lr" << YAML::Value << double_text(c.unseen.optimizer.lr);
  e << YAML::EndMap << YAML::EndMap;

  e << YAML::Key << "sweep" << YAML::Value << YAML::BeginMap;
  emit_seq(e, "modes", mode_names(c.sweep_modes));
  e << YAML::EndMap;
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

ExperimentConfig with_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  ExperimentConfig c = cfg;
  c.seed = seed;
  c.dataset.seed = seed;
  c.train.seed = seed;
  return c;
}

// ---- building blocks ----

DataSplit split_dataset(const Dataset& data, const ExperimentConfig& cfg) {
  const auto [tr, te] = split_indices(data, cfg.test_fraction, cfg.seed);
  return {subset(data, tr), subset(data, te)};
}

RemindModel make_model(const ExperimentConfig& cfg, const DatasetSpec& spec) {
  RouterConfig r = cfg.router;
  if (r.embed_dim != spec.embed_dim)
    throw std::invalid_argument("router.embed_dim (" + std::to_string(r.embed_dim) + ") does not match the dataset's embed_dim (" +
                                std::to_string(spec.embed_dim) + ")");
  return RemindModel(ModelConfig::from_spec(spec, r, cfg.seed));
}

Phase phase_for(TrainMode mode, const TrainConfig& resolved, int step) {
  return uses_residuals(mode) && step > resolved.stage2_start ? Phase::Stage2Gated : Phase::Stage1SharedOnly;
}

ModelFactory model_factory(const ExperimentConfig& cfg, TrainMode mode) {
  return [cfg, mode](const Dataset& train_set) {
    RemindModel model = make_model(cfg, train_set.spec);
    TrainConfig tc = cfg.train;
    tc.mode = mode;
    train(train_set, model, tc);
    return model;
  };
}

GcSummary summarize_gc(std::span<const ConsistencyRecord> records, std::span<const double> frequencies,
                       double tail_threshold, double window_fraction) {
  GcSummary s;
  std::vector<int> steps;
  for (const auto& r : records)
    if (steps.empty() || steps.back() != r.step) steps.push_back(r.step);
  std::sort(steps.begin(), steps.end());
  steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
  if (steps.empty()) return s;
  const auto n = static_cast<std::size_t>(std::ceil(window_fraction * static_cast<double>(steps.size()) - 1e-9));
  s.window_steps.assign(steps.end() - static_cast<std::ptrdiff_t>(std::max<std::size_t>(n, 1)), steps.end());
  s.head_group = static_cast<int>(std::max_element(frequencies.begin(), frequencies.end()) - frequencies.begin());
  const auto tails = tail_flags(frequencies, tail_threshold);

  std::vector<double> head, tail;
  for (const auto& r : records) {
    if (r.group_bitmask == 0 || !r.defined) continue;
    if (!std::binary_search(s.window_steps.begin(), s.window_steps.end(), r.step)) continue;
    const int g = ModalityMask{r.group_bitmask}.group_id();
    if (g == s.head_group)
      head.push_back(r.gc);
    else if (tails[static_cast<std::size_t>(g)])
      tail.push_back(r.gc);
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t k = v.size();
    return k % 2 ? v[k / 2] : 0.5 * (v[k / 2 - 1] + v[k / 2]);
  };
  s.head_values = head.size();
  s.tail_values = tail.size();
  s.defined = !head.empty() && !tail.empty();
  if (!head.empty()) s.head_median = median(head);
  if (!tail.empty()) s.tail_median = median(tail);
  return s;
}

std::string checkpoint_name(int step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%07d.ckpt", step);
  return buf;
}

// ---- pipelines ----

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

template <class Fn>
void write_with(const fs::path& path, Fn&& fn) {
  std::ostringstream ss;
  fn(ss);
  write_text(path, ss.str());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir.string());
}

Dataset load_run_dataset(const fs::path& out) {
  const fs::path p = out / files::kDataset;
  if (!fs::exists(p)) throw std::runtime_error("dataset file " + p.string() + " not found (run `generate` first)");
  return load_dataset(p);
}

std::vector<std::pair<int, fs::path>> list_checkpoints(const fs::path& dir) {
  std::vector<std::pair<int, fs::path>> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("step_", 0) != 0 || e.path().extension() != ".ckpt") continue;
    out.emplace_back(std::stoi(name.substr(5)), e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

TrainCheckpoint read_checkpoint_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read checkpoint " + p.string());
  return load_training_checkpoint(in);
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void run_generate(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  const ExperimentConfig c = with_seed(cfg, cfg.seed);
  const Dataset ds = sample_dataset(c.dataset);
  ensure_dir(out);
  save_dataset(out / files::kDataset, ds);
  write_with(out / files::kHistogram, [&](std::ostream& os) { write_histogram_csv(os, ds); });
  write_text(out / files::kConfig, dump_config(c));
}

TrainRunResult run_train(const ExperimentConfig& cfg, const fs::path& out, const TrainRunOptions& opt) {
  cfg.validate();
  const ExperimentConfig c = with_seed(cfg, cfg.seed);
  const Dataset ds = load_run_dataset(out);
  RemindModel model = make_model(c, ds.spec);
  const DataSplit split = split_dataset(ds, c);
  const fs::path ckdir = out / files::kCheckpoints;

  TrainRunResult result;
  Trainer trainer(model, split.train, c.train);
  std::vector<std::string> kept_history;
  if (opt.resume) {
    const auto cks = list_checkpoints(ckdir);
    if (cks.empty()) throw std::runtime_error("nothing to resume: no checkpoints in " + ckdir.string());
    TrainCheckpoint ck = read_checkpoint_file(cks.back().second);
    if (!ck.has_state) throw std::runtime_error("checkpoint " + cks.back().second.string() + " has no trainer state");
    if (model_config_to_json(ck.model.config()) != model_config_to_json(model.config()))
      throw std::invalid_argument("checkpoint model configuration differs from the current config");
    model = std::move(ck.model);
    restore_trainer(trainer, ck);
    result.resumed = true;
    result.resumed_from = ck.state.step;
    std::ifstream hist(out / files::kHistory);
    std::string line;
    if (hist && std::getline(hist, line)) {
      while (std::getline(hist, line)) {
        const int step = std::stoi(line.substr(0, line.find(',')));
        if (step < result.resumed_from) kept_history.push_back(line);
      }
    }
  } else {
    std::error_code ec;
    fs::remove_all(ckdir, ec);
  }
  ensure_dir(ckdir);

  TrainHooks hooks;
  hooks.stop_after = opt.stop_after;
  hooks.on_checkpoint = [&](int step, Trainer& t) {
    write_with(ckdir / checkpoint_name(step), [&](std::ostream& os) { t.save(os); });
  };
  const TrainHistory hist = run_trainer(trainer, hooks);

  write_with(out / files::kHistory, [&](std::ostream& os) {
    write_history_header(os);
    for (const auto& l : kept_history) os << l << '\n';
    for (const auto& rec : hist.records) write_history_rows(os, rec, trainer.active_groups());
  });

  result.final_step = trainer.state().step;
  result.model_hash = model.hash();
  if (!trainer.done()) return result;  // interrupted: no final metrics

  const TrainConfig resolved = c.train.resolved();
  const Phase ph = phase_for(c.train.mode, resolved, result.final_step);
  const auto freqs = split.train.frequencies();
  result.test_metrics = evaluate(model, split.test, ph, freqs, c.dataset.tail_threshold);
  const int m = ds.spec.modalities;
  write_with(out / files::kMetricsCsv, [&](std::ostream& os) { write_group_metrics_csv(os, result.test_metrics, m); });
  ojson summary = {{"mode", to_string(c.train.mode)},
                   {"seed", c.seed},
                   {"steps", result.final_step},
                   {"model_hash", hex64(result.model_hash)},
                   {"lambda", trainer.state().lambda.lambda},
                   {"test", ojson::parse(metrics_json(result.test_metrics, m))}};
  write_text(out / files::kMetricsJson, summary.dump(2) + "\n");
  return result;
}

GcSummary run_analyze(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  const ExperimentConfig c = with_seed(cfg, cfg.seed);
  const Dataset ds = load_run_dataset(out);
  const auto cks = list_checkpoints(out / files::kCheckpoints);
  if (cks.empty()) throw std::runtime_error("no checkpoints found in " + (out / files::kCheckpoints).string());
  const DataSplit split = split_dataset(ds, c);
  const TrainConfig resolved = c.train.resolved();

  TrackOptions to;
  to.samples_per_group = c.analysis.samples_per_group;
  to.seed = c.seed;
  to.whole = c.analysis.whole;
  to.loss = c.train.loss;
  to.focal_gamma = c.train.focal_gamma;
  to.power = {c.analysis.power_tol, c.analysis.power_max_iter, c.seed};

  std::vector<ConsistencyRecord> records;
  RemindModel last;
  for (const auto& [step, path] : cks) {
    TrainCheckpoint ck = read_checkpoint_file(path);
    to.phase = phase_for(c.train.mode, resolved, step);
    auto recs = analyze_checkpoint(ck.model, step, split.train, to);
    records.insert(records.end(), recs.begin(), recs.end());
    last = std::move(ck.model);
  }
  const int m = ds.spec.modalities;
  write_with(out / files::kConsistency, [&](std::ostream& os) { write_consistency_csv(os, records); });

  const Phase ph = phase_for(c.train.mode, resolved, cks.back().first);
  const SpecializationMatrix spec = specialization(last, split.test, c.analysis.top_k, ph);
  write_with(out / files::kSpecializationCsv, [&](std::ostream& os) { write_specialization_csv(os, spec, m); });
  write_with(out / files::kSpecializationGrid, [&](std::ostream& os) { write_specialization_grid(os, spec, m); });

  const auto freqs = split.train.frequencies();
  const GcSummary s = summarize_gc(records, freqs, c.dataset.tail_threshold, c.analysis.window_fraction);
  ojson j = {{"mode", to_string(c.train.mode)},
             {"seed", c.seed},
             {"checkpoints", cks.size()},
             {"whole_direction", to_string(c.analysis.whole)},
             {"samples_per_group", c.analysis.samples_per_group},
             {"window_steps", s.window_steps},
             {"head_group", ModalityMask::from_group_id(s.head_group).label(m)},
             {"head_gc_median", s.defined ? ojson(s.head_median) : ojson()},
             {"tail_gc_median", s.defined ? ojson(s.tail_median) : ojson()},
             {"head_minus_tail", s.defined ? ojson(s.head_median - s.tail_median) : ojson()},
             {"specialization_k", spec.k}};
  write_text(out / files::kAnalysisJson, j.dump(2) + "\n");
  return s;
}

void run_protocol(const ExperimentConfig& cfg, const std::string& name, const fs::path& out) {
  if (name != "extreme-missingness" && name != "unseen-mc")
    throw std::invalid_argument("unknown protocol '" + name + "' (expected extreme-missingness, unseen-mc)");
  cfg.validate();
  const ExperimentConfig c = with_seed(cfg, cfg.seed);
  const int m = c.dataset.modalities;

  if (name == "extreme-missingness") {
    DatasetSpec full = c.dataset;
    full.missing_prob.assign(static_cast<std::size_t>(m), 0.0);
    full.missing_correlation = 0.0;
    const Dataset ds = sample_dataset(full);
    ojson results = ojson::array();
    for (TrainMode mode : c.missingness.modes) {
      const MissingnessResult r = extreme_missingness(model_factory(c, mode), ds, c.missingness.modality - 1,
                                                      c.missingness.rate, c.seed, c.test_fraction,
                                                      phase_for(mode, c.train.resolved(), c.train.max_steps));
      ojson block = ojson::parse(missingness_json(r));
      ojson entry = {{"mode", to_string(mode)}};
      entry.update(block);
      results.push_back(entry);
    }
    ensure_dir(out);
    ojson j = {{"protocol", name}, {"seed", c.seed}, {"results", results}};
    write_text(out / "protocol_extreme-missingness.json", j.dump(2) + "\n");
    return;
  }

  const Dataset ds = sample_dataset(c.dataset);
  UnseenMcConfig uc;
  if (c.unseen.heldout) {
    uc.heldout = {*c.unseen.heldout};
  } else {
    // second most frequent group: large enough to split, yet not the head
    std::vector<std::size_t> order(ds.histogram.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ds.histogram[a] > ds.histogram[b]; });
    uc.heldout = ModalityMask::from_group_id(static_cast<int>(order.at(1)));
  }
  uc.scopes = c.unseen.scopes;
  uc.adapt_fraction = c.unseen.adapt_fraction;
  uc.finetune_steps = c.unseen.finetune_steps;
  uc.optimizer = c.unseen.optimizer;
  uc.loss = c.train.loss;
  uc.focal_gamma = c.train.focal_gamma;
  uc.seed = c.seed;
  const UnseenMcResult r = unseen_mc_protocol(model_factory(c, c.train.mode), ds, uc);
  ensure_dir(out);
  ojson j = ojson::parse(unseen_mc_json(r, m));
  j["mode"] = to_string(c.train.mode);
  j["seed"] = c.seed;
  write_text(out / "protocol_unseen-mc.json", j.dump(2) + "\n");
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  std::vector<SweepRow> rows;
  int m = cfg.dataset.modalities;
  std::vector<std::pair<std::string, std::string>> per_run;
  for (std::uint64_t seed : cfg.seeds) {
    const ExperimentConfig c = with_seed(cfg, seed);
    const Dataset ds = sample_dataset(c.dataset);
    const DataSplit split = split_dataset(ds, c);
    const auto freqs = split.train.frequencies();
    for (TrainMode mode : c.sweep_modes) {
      RemindModel model = model_factory(c, mode)(split.train);
      const Phase ph = phase_for(mode, c.train.resolved(), c.train.max_steps);
      GroupMetrics gm = evaluate(model, split.test, ph, freqs, c.dataset.tail_threshold);
      per_run.emplace_back("seed_" + std::to_string(seed) + "/" + to_string(mode), metrics_json(gm, m));
      rows.push_back({mode, seed, std::move(gm)});
    }
  }
  ensure_dir(out);
  for (const auto& [rel, text] : per_run) {
    ensure_dir(out / rel);
    write_text(out / rel / files::kMetricsJson, text + "\n");
  }
  for (const char* metric : {"accuracy", "macro_f1"}) {
    for (bool sd : {false, true}) {
      const std::string file = std::string("sweep_") + metric + (sd ? "_std" : "_mean") + ".csv";
      write_with(out / file, [&](std::ostream& os) { write_sweep_table(os, rows, cfg.sweep_modes, m, metric, sd); });
    }
  }
  // Compact per-mode summary including the pooled tail accuracy.
  ojson modes = ojson::array();
  for (TrainMode mode : cfg.sweep_modes) {
    std::vector<double> overall, tail, worst;
    for (const auto& r : rows) {
      if (r.mode != mode) continue;
      overall.push_back(r.metrics.overall.accuracy);
      tail.push_back(r.metrics.tail_pooled.accuracy);
      worst.push_back(r.metrics.worst_group_accuracy);
    }
    auto stats = [](const std::vector<double>& v) {
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
      return ojson{{"mean", mean}, {"std", sd}, {"values", v}};
    };
    modes.push_back({{"mode", to_string(mode)},
                     {"overall_accuracy", stats(overall)},
                     {"tail_accuracy", stats(tail)},
                     {"worst_group_accuracy", stats(worst)}});
  }
  ojson j = {{"seeds", cfg.seeds}, {"modes", modes}};
  write_text(out / "sweep.json", j.dump(2) + "\n");
  return rows;
}

void write_sweep_table(std::ostream& os, std::span<const SweepRow> rows, std::span<const TrainMode> modes,
                       int modalities, const std::string& metric, bool stddev) {
  if (metric != "accuracy" && metric != "macro_f1") throw std::invalid_argument("unknown sweep metric '" + metric + "'");
  auto pick = [&](const MetricBlock& b) { return metric == "accuracy" ? b.accuracy : b.macro_f1; };
  auto summarise = [&](const std::vector<double>& v) {
    if (v.empty()) return std::string();
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double out = mean;
    if (stddev) {
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      out = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
    }
    std::string s;
    append_double(s, out);
    return s;
  };

  for (int i = 0; i < modalities; ++i) os << 'M' << i + 1 << ',';
  for (std::size_t k = 0; k < modes.size(); ++k) os << to_string(modes[k]) << (k + 1 < modes.size() ? "," : "\n");
  for (int g = 0; g < group_count(modalities); ++g) {
    const ModalityMask mask = ModalityMask::from_group_id(g);
    std::string line;
    for (int i = 0; i < modalities; ++i) line += mask.has(i) ? "1," : "0,";
    for (std::size_t k = 0; k < modes.size(); ++k) {
      std::vector<double> v;
      for (const auto& r : rows)
        if (r.mode == modes[k])
          if (auto it = r.metrics.groups.find(g); it != r.metrics.groups.end()) v.push_back(pick(it->second));
      line += summarise(v);
      line += k + 1 < modes.size() ? "," : "\n";
    }
    os << line;
  }
  std::string line;
  for (int i = 0; i < modalities; ++i) line += i == 0 ? "Entire Dataset," : ",";
  for (std::size_t k = 0; k < modes.size(); ++k) {
    std::vector<double> v;
    for (const auto& r : rows)
      if (r.mode == modes[k]) v.push_back(pick(r.metrics.overall));
    line += summarise(v);
    line += k + 1 < modes.size() ? "," : "\n";
  }
  os << line;
}

}  // namespace remind
