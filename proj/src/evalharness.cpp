#include "remind/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "remind/rng.hpp"

namespace remind {

using ojson = nlohmann::ordered_json;

MetricBlock compute_metrics(std::span<const int> predictions, std::span<const int> labels, int classes) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("compute_metrics: size mismatch");
  if (classes < 1) throw std::invalid_argument("compute_metrics: classes must be >= 1");
  MetricBlock m;
  m.support = labels.size();
  if (labels.empty()) return m;
  std::vector<std::size_t> tp(classes), fp(classes), fn(classes);
  std::set<int> seen;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i], p = predictions[i];
    if (y < 0 || y >= classes || p < 0 || p >= classes) throw std::invalid_argument("compute_metrics: class out of range");
    seen.insert(y);
    seen.insert(p);
    if (y == p) {
      ++correct;
      ++tp[y];
    } else {
      ++fp[p];
      ++fn[y];
    }
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  // classes seen in labels or predictions, as scikit-learn does
  double f1_sum = 0.0;
  for (int c : seen) {
    const std::size_t pd = tp[c] + fp[c], ld = tp[c] + fn[c];
    if (pd == 0 || ld == 0) {
      m.f1_zero_division = true;
      continue;
    }
    const double prec = static_cast<double>(tp[c]) / pd, rec = static_cast<double>(tp[c]) / ld;
    if (prec + rec > 0.0) f1_sum += 2.0 * prec * rec / (prec + rec);
  }
  m.macro_f1 = f1_sum / static_cast<double>(seen.size());
  return m;
}

GroupMetrics group_metrics(std::span<const int> predictions, std::span<const int> labels,
                           std::span<const int> group_ids, int classes, std::span<const double> frequencies,
                           double tail_threshold) {
  if (predictions.size() != labels.size() || labels.size() != group_ids.size())
    throw std::invalid_argument("group_metrics: size mismatch");
  GroupMetrics out;
  out.overall = compute_metrics(predictions, labels, classes);
  const auto tails = tail_flags(frequencies, tail_threshold);
  std::map<int, std::pair<std::vector<int>, std::vector<int>>> by_group;
  std::vector<int> tail_p, tail_y;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int g = group_ids[i];
    if (g < 0 || static_cast<std::size_t>(g) >= frequencies.size())
      throw std::invalid_argument("group_metrics: group id " + std::to_string(g) + " outside frequency table");
    by_group[g].first.push_back(predictions[i]);
    by_group[g].second.push_back(labels[i]);
    if (tails[g]) {
      tail_p.push_back(predictions[i]);
      tail_y.push_back(labels[i]);
    }
  }
  out.tail_pooled = compute_metrics(tail_p, tail_y, classes);
  out.worst_group_accuracy = 1.0;
  for (std::size_t g = 0; g < frequencies.size(); ++g) {
    auto it = by_group.find(static_cast<int>(g));
    if (it == by_group.end()) {
      out.omitted.push_back(static_cast<int>(g));
      continue;
    }
    const MetricBlock mb = compute_metrics(it->second.first, it->second.second, classes);
    out.groups[static_cast<int>(g)] = mb;
    out.tail[static_cast<int>(g)] = tails[g];
    if (out.worst_group < 0 || mb.accuracy < out.worst_group_accuracy) {
      out.worst_group_accuracy = mb.accuracy;
      out.worst_group = static_cast<int>(g);
    }
  }
  if (out.worst_group < 0) out.worst_group_accuracy = 0.0;
  return out;
}

GroupMetrics evaluate(RemindModel& model, const Dataset& data, Phase phase, std::span<const double> frequencies,
                      double tail_threshold) {
  std::vector<int> pred, lab, gid;
  for (const Sample& s : data.samples) {
    pred.push_back(model.predict(s, phase));
    lab.push_back(s.label);
    gid.push_back(s.group_id);
  }
  const std::vector<double> own = data.frequencies();
  if (frequencies.empty()) frequencies = own;
  if (tail_threshold < 0.0) tail_threshold = data.spec.tail_threshold;
  return group_metrics(pred, lab, gid, model.config().classes, frequencies, tail_threshold);
}

std::vector<int> top_k_experts(const Matrix& combine, int n_experts, int slots_per_expert, int k) {
  if (n_experts < 1 || slots_per_expert < 1 || combine.cols() != static_cast<std::size_t>(n_experts * slots_per_expert))
    throw ShapeError("top_k_experts: combine has " + std::to_string(combine.cols()) + " columns, expected " +
                     std::to_string(n_experts * slots_per_expert));
  if (k < 1 || k > n_experts) throw std::invalid_argument("top_k_experts: k must be in [1, n_experts]");
  std::vector<double> w(n_experts, 0.0);
  for (std::size_t r = 0; r < combine.rows(); ++r)
    for (int e = 0; e < n_experts; ++e)
      for (int p = 0; p < slots_per_expert; ++p) w[e] += combine(r, static_cast<std::size_t>(e * slots_per_expert + p));
  std::vector<int> order(n_experts);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return w[a] > w[b]; });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

SpecializationMatrix specialization(RemindModel& model, const Dataset& data, int k, Phase phase) {
  const RouterConfig& rc = model.config().router;
  if (k < 1 || k > rc.n_experts) throw std::invalid_argument("specialization: k must be in [1, n_experts]");
  std::map<int, std::pair<std::vector<double>, std::size_t>> acc;
  for (const Sample& s : data.samples) {
    ad::Tape tape;
    const SampleTrace tr = model.forward(tape, s, phase, false);
    auto& [counts, n] = acc[s.group_id];
    counts.resize(rc.n_experts, 0.0);
    for (int e : top_k_experts(tr.fusion.combine, rc.n_experts, rc.slots_per_expert, k)) counts[e] += 1.0;
    ++n;
  }
  SpecializationMatrix out;
  out.k = k;
  out.freq = Matrix(acc.size(), static_cast<std::size_t>(rc.n_experts));
  std::size_t r = 0;
  for (const auto& [g, cn] : acc) {
    out.groups.push_back(g);
    out.support.push_back(cn.second);
    for (int e = 0; e < rc.n_experts; ++e) out.freq(r, e) = cn.first[e] / static_cast<double>(cn.second);
    ++r;
  }
  return out;
}

void write_specialization_csv(std::ostream& os, const SpecializationMatrix& s, int modalities) {
  os << "group_id,mask,support";
  for (std::size_t e = 0; e < s.freq.cols(); ++e) os << ",expert_" << e + 1;
  os << '\n';
  std::string line;
  for (std::size_t r = 0; r < s.groups.size(); ++r) {
    line = std::to_string(s.groups[r]) + ',' + ModalityMask::from_group_id(s.groups[r]).label(modalities) + ',' +
           std::to_string(s.support[r]);
    for (std::size_t e = 0; e < s.freq.cols(); ++e) {
      line += ',';
      append_double(line, s.freq(r, e));
    }
    os << line << '\n';
  }
}

void write_specialization_grid(std::ostream& os, const SpecializationMatrix& s, int modalities) {
  std::size_t width = 5;
  for (int g : s.groups) width = std::max(width, ModalityMask::from_group_id(g).label(modalities).size());
  os << "top-" << s.k << '\n' << std::left << std::setw(static_cast<int>(width)) << "group";
  for (std::size_t e = 0; e < s.freq.cols(); ++e) os << "  E" << std::setw(5) << e + 1;
  os << '\n';
  for (std::size_t r = 0; r < s.groups.size(); ++r) {
    os << std::left << std::setw(static_cast<int>(width)) << ModalityMask::from_group_id(s.groups[r]).label(modalities);
    for (std::size_t e = 0; e < s.freq.cols(); ++e) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(3) << s.freq(r, e);
      os << "  " << std::setw(6) << cell.str();
    }
    os << '\n';
  }
}

ModalityRemoval remove_modality(const Dataset& full, int modality, double rate, std::uint64_t seed) {
  const int m = full.spec.modalities;
  if (modality < 0 || modality >= m) throw std::invalid_argument("modality index out of range");
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("removal rate must be in [0, 1)");
  const std::uint32_t all = (1u << m) - 1u;
  for (const Sample& s : full.samples)
    if (s.mask.bits != all) throw std::invalid_argument("extreme missingness needs every modality present in every sample");
  const auto count = static_cast<std::size_t>(std::floor(rate * static_cast<double>(full.samples.size())));
  if (rate > 0.0 && count < 1) throw std::invalid_argument("removal rate selects no sample");

  std::vector<std::size_t> idx(full.samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = make_rng(seed, stream::kProtocol);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());

  ModalityRemoval out{full, idx};
  for (std::size_t i : idx) {
    Sample& s = out.data.samples[i];
    s.raw[static_cast<std::size_t>(modality)] = Matrix();
    s.mask.bits &= ~(1u << modality);
    s.group_id = s.mask.group_id();
  }
  refresh_histogram(out.data);
  return out;
}

MissingnessResult extreme_missingness(const ModelFactory& factory, const Dataset& full, int modality, double rate,
                                      std::uint64_t seed, double test_fraction, Phase eval_phase) {
  const ModalityRemoval rem = remove_modality(full, modality, rate, seed);
  const auto [train_idx, test_idx] = split_indices(rem.data, test_fraction, seed);
  RemindModel model = factory(subset(rem.data, train_idx));

  MissingnessResult r;
  r.modality = modality;
  r.rate = rate;
  r.removed = rem.removed.size();
  r.hash_before_eval = model.hash();
  const int classes = model.config().classes;
  std::vector<int> p_all, y_all, p_av, y_av, p_ab, y_ab;
  for (std::size_t i : test_idx) {
    const Sample& s = rem.data.samples[i];
    const int p = model.predict(s, eval_phase);
    p_all.push_back(p);
    y_all.push_back(s.label);
    if (std::binary_search(rem.removed.begin(), rem.removed.end(), i)) {
      p_ab.push_back(p);
      y_ab.push_back(s.label);
      r.test_absent.push_back(i);
    } else {
      p_av.push_back(p);
      y_av.push_back(s.label);
      r.test_available.push_back(i);
    }
  }
  r.hash_after_eval = model.hash();
  r.overall = compute_metrics(p_all, y_all, classes);
  r.available = compute_metrics(p_av, y_av, classes);
  r.absent = compute_metrics(p_ab, y_ab, classes);
  r.available_defined = !p_av.empty();
  r.absent_defined = !p_ab.empty();
  return r;
}

std::string FinetuneScope::label() const {
  switch (kind) {
    case ScopeKind::Nothing: return "nothing";
    case ScopeKind::Head: return "head";
    case ScopeKind::HeadRouter: return "head+router";
    case ScopeKind::HeadRouterExperts: {
      std::string s = "head+router+experts:";
      append_double(s, expert_fraction);
      return s;
    }
  }
  return "?";
}

FinetuneScope parse_scope(const std::string& s) {
  if (s == "nothing") return {ScopeKind::Nothing};
  if (s == "head") return {ScopeKind::Head};
  if (s == "head+router") return {ScopeKind::HeadRouter};
  const std::string ex = "head+router+experts";
  if (s.rfind(ex, 0) == 0) {
    FinetuneScope f{ScopeKind::HeadRouterExperts, 1.0};
    if (s.size() > ex.size()) {
      if (s[ex.size()] != ':') throw std::invalid_argument("unknown fine-tune scope '" + s + "'");
      f.expert_fraction = parse_double_token(s.substr(ex.size() + 1));
      if (!(f.expert_fraction > 0.0 && f.expert_fraction <= 1.0))
        throw std::invalid_argument("expert fraction must be in (0, 1]");
    }
    return f;
  }
  throw std::invalid_argument("unknown fine-tune scope '" + s +
                              "' (expected nothing, head, head+router, head+router+experts[:f])");
}

std::pair<Dataset, Dataset> split_heldout(const Dataset& data, ModalityMask heldout) {
  std::vector<std::size_t> rest, held;
  for (std::size_t i = 0; i < data.samples.size(); ++i)
    (data.samples[i].mask.bits == heldout.bits ? held : rest).push_back(i);
  if (held.empty())
    throw std::invalid_argument("held-out group " + heldout.label(data.spec.modalities) + " has no samples");
  return {subset(data, rest), subset(data, held)};
}

namespace {

double mean_loss(RemindModel& model, const Dataset& data, std::span<const std::size_t> idx, const UnseenMcConfig& cfg) {
  double s = 0.0;
  for (std::size_t i : idx) {
    ad::Tape tape;
    s += model.loss(tape, data.samples[i], Phase::Stage2Gated, cfg.loss, cfg.focal_gamma, false).value()(0, 0);
  }
  return s / static_cast<double>(idx.size());
}

std::vector<ad::Parameter*> scope_parameters(RemindModel& model, const FinetuneScope& scope, ModalityMask heldout) {
  std::vector<ad::Parameter*> out;
  if (scope.kind == ScopeKind::Nothing) return out;
  out = model.parameters(kHead);
  if (scope.kind == ScopeKind::Head) return out;
  for (ad::Parameter* p : model.fusion().router_parameters()) out.push_back(p);
  out.push_back(model.fusion().routing().residual(heldout));
  if (scope.kind == ScopeKind::HeadRouter) return out;
  for (ad::Parameter* p : model.parameters(kExperts, scope.expert_fraction)) out.push_back(p);
  return out;
}

}  // namespace

UnseenMcResult adapt_scopes(const RemindModel& base, const Dataset& heldout, const UnseenMcConfig& cfg) {
  if (heldout.samples.size() < 2) throw std::invalid_argument("held-out group needs at least 2 samples");
  if (!(cfg.adapt_fraction > 0.0 && cfg.adapt_fraction < 1.0))
    throw std::invalid_argument("adapt_fraction must be in (0, 1)");
  if (cfg.finetune_steps < 0) throw std::invalid_argument("finetune_steps must be >= 0");
  for (const Sample& s : heldout.samples)
    if (s.mask.bits != cfg.heldout.bits) throw std::invalid_argument("held-out set mixes modality combinations");

  UnseenMcResult res;
  res.heldout_group = cfg.heldout.group_id();
  std::vector<std::size_t> idx(heldout.samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = make_rng(mix_seed(cfg.seed, 0x5C), stream::kProtocol);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n = idx.size();
  const auto n_adapt =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(cfg.adapt_fraction * static_cast<double>(n))), 1, n - 1);
  res.adapt.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_adapt));
  res.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_adapt), idx.end());
  std::sort(res.adapt.begin(), res.adapt.end());
  std::sort(res.test.begin(), res.test.end());

  for (const FinetuneScope& scope : cfg.scopes) {
    RemindModel model = base;
    ScopeResult sr;
    sr.scope = scope;
    sr.hash_before = model.hash();
    if (scope.kind != ScopeKind::Nothing) model.fusion().routing().ensure_residual(cfg.heldout);

    std::map<std::string, Matrix> snapshot;
    for (ad::Parameter* p : model.parameters(kAll)) snapshot[p->name] = p->value;
    snapshot[model.fusion().routing().scale.name] = model.fusion().routing().scale.value;

    const auto params = scope_parameters(model, scope, cfg.heldout);
    for (const ad::Parameter* p : params) sr.trained.push_back(p->name);
    sr.adapt_loss_before = mean_loss(model, heldout, res.adapt, cfg);

    if (!params.empty()) {
      Optimizer opt(cfg.optimizer);
      const double w = 1.0 / static_cast<double>(res.adapt.size());
      for (int step = 0; step < cfg.finetune_steps; ++step) {
        ad::Tape tape;
        ad::Var total;
        for (std::size_t i = 0; i < res.adapt.size(); ++i) {
          ad::Var l = ad::scale(model.loss(tape, heldout.samples[res.adapt[i]], Phase::Stage2Gated, cfg.loss,
                                           cfg.focal_gamma, false),
                                w);
          total = i == 0 ? l : ad::add(total, l);
        }
        for (ad::Parameter* p : params) p->zero_grad();
        tape.backward(total);
        opt.step(params);
      }
    }
    sr.adapt_loss_after = mean_loss(model, heldout, res.adapt, cfg);

    std::vector<int> pred, lab;
    for (std::size_t i : res.test) {
      pred.push_back(model.predict(heldout.samples[i], Phase::Stage2Gated));
      lab.push_back(heldout.samples[i].label);
    }
    sr.test = compute_metrics(pred, lab, model.config().classes);

    for (ad::Parameter* p : model.parameters(kAll)) {
      if (std::find(sr.trained.begin(), sr.trained.end(), p->name) != sr.trained.end()) continue;
      auto it = snapshot.find(p->name);
      if (it == snapshot.end() || !(it->second == p->value)) sr.out_of_scope_identical = false;
    }
    sr.hash_after = model.hash();
    res.scopes.push_back(std::move(sr));
  }
  return res;
}

UnseenMcResult unseen_mc_protocol(const ModelFactory& factory, const Dataset& data, const UnseenMcConfig& cfg) {
  auto [rest, held] = split_heldout(data, cfg.heldout);
  if (rest.samples.empty()) throw std::invalid_argument("no training data left after holding out a group");
  RemindModel model = factory(rest);
  return adapt_scopes(model, held, cfg);
}

namespace {

ojson block_json(const MetricBlock& m, bool defined = true) {
  if (!defined) return ojson{{"support", 0}, {"defined", false}};
  return ojson{{"support", m.support},
               {"accuracy", m.accuracy},
               {"macro_f1", m.macro_f1},
               {"f1_zero_division", m.f1_zero_division}};
}

}  // namespace

std::string metrics_json(const GroupMetrics& m, int modalities) {
  ojson groups = ojson::array();
  for (const auto& [g, mb] : m.groups) {
    ojson row = {{"group_id", g}, {"mask", ModalityMask::from_group_id(g).label(modalities)}, {"tail", m.tail.at(g)}};
    row.update(block_json(mb));
    groups.push_back(row);
  }
  ojson j = {{"overall", block_json(m.overall)},
             {"tail_pooled", block_json(m.tail_pooled, m.tail_pooled.support > 0)},
             {"worst_group", {{"group_id", m.worst_group}, {"accuracy", m.worst_group_accuracy}}},
             {"groups", groups},
             {"omitted_groups", m.omitted}};
  return j.dump(2);
}

std::string missingness_json(const MissingnessResult& r) {
  ojson j = {{"protocol", "extreme-missingness"},
             {"modality", r.modality + 1},
             {"rate", r.rate},
             {"removed_samples", r.removed},
             {"overall", block_json(r.overall)},
             {"available", block_json(r.available, r.available_defined)},
             {"absent", block_json(r.absent, r.absent_defined)},
             {"model_unchanged_by_evaluation", r.hash_before_eval == r.hash_after_eval}};
  return j.dump(2);
}

std::string unseen_mc_json(const UnseenMcResult& r, int modalities) {
  ojson scopes = ojson::array();
  for (const auto& s : r.scopes) {
    scopes.push_back({{"scope", s.scope.label()},
                      {"trained_parameters", s.trained},
                      {"adapt_loss_before", s.adapt_loss_before},
                      {"adapt_loss_after", s.adapt_loss_after},
                      {"test", block_json(s.test)},
                      {"out_of_scope_identical", s.out_of_scope_identical},
                      {"hash_unchanged", s.hash_before == s.hash_after}});
  }
  ojson j = {{"protocol", "unseen-mc"},
             {"heldout_group", r.heldout_group},
             {"heldout_mask", ModalityMask::from_group_id(r.heldout_group).label(modalities)},
             {"adapt_samples", r.adapt.size()},
             {"test_samples", r.test.size()},
             {"scopes", scopes}};
  return j.dump(2);
}

void write_group_metrics_csv(std::ostream& os, const GroupMetrics& m, int modalities) {
  os << "group_id,mask,tail,support,accuracy,macro_f1,f1_zero_division\n";
  std::string line;
  for (const auto& [g, mb] : m.groups) {
    line = std::to_string(g) + ',' + ModalityMask::from_group_id(g).label(modalities) + ',' +
           (m.tail.at(g) ? "1" : "0") + ',' + std::to_string(mb.support) + ',';
    append_double(line, mb.accuracy);
    line += ',';
    append_double(line, mb.macro_f1);
    line += mb.f1_zero_division ? ",1\n" : ",0\n";
    os << line;
  }
}

}  // namespace remind
