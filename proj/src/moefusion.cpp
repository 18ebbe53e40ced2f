#include "remind/moefusion.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <istream>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include "json.hpp"
#include "remind/rng.hpp"

namespace remind {

namespace {

constexpr double kLogEps = 1e-8;

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::normal_distribution<double> nd(0.0, stddev);
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = nd(rng);
  return m;
}

double mean_of(const Matrix& m) {
  double s = 0.0;
  for (double v : m.values()) s += v;
  return m.empty() ? 0.0 : s / static_cast<double>(m.size());
}

}  // namespace

// ---- config ----

double RouterConfig::effective_threshold(int tokens) const {
  if (threshold) return *threshold;
  if (gating_metric == GatingMetric::KlUniform) return 0.1;
  const double outcomes = entropy_mode == EntropyMode::Global ? static_cast<double>(tokens) * slots() : n_experts;
  return 0.8 * std::log(outcomes);
}

void RouterConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("router config: " + what); };
  if (embed_dim < 2) fail("embed_dim must be >= 2");
  if (n_experts < 2) fail("n_experts must be >= 2");
  if (slots_per_expert < 1) fail("slots_per_expert must be >= 1");
  if (!(scale > 0.0)) fail("scale must be positive");
  if (expert_hidden < 1) fail("expert_hidden must be >= 1");
  if (threshold) {
    const double xi = *threshold;
    if (gating_metric == GatingMetric::Entropy) {
      if (!(xi > 0.0)) fail("entropy threshold must be positive");
      if (entropy_mode == EntropyMode::PerToken && xi > std::log(static_cast<double>(n_experts)))
        fail("entropy threshold must not exceed ln(n_experts)");
    } else if (!(xi >= 0.0)) {
      fail("KL threshold must be non-negative");
    }
  }
}

void ModelConfig::validate() const {
  if (modalities < 1 || modalities > kMaxModalities) throw std::invalid_argument("model config: modalities out of range");
  if (tokens_per_modality < 1) throw std::invalid_argument("model config: tokens_per_modality must be >= 1");
  if (raw_dims.size() != static_cast<std::size_t>(modalities))
    throw std::invalid_argument("model config: raw_dims needs one entry per modality");
  if (classes < 2) throw std::invalid_argument("model config: classes must be >= 2");
  router.validate();
}

ModelConfig ModelConfig::from_spec(const DatasetSpec& spec, const RouterConfig& router, std::uint64_t seed) {
  if (spec.embed_dim != router.embed_dim)
    throw std::invalid_argument("dataset embed_dim " + std::to_string(spec.embed_dim) + " does not match router embed_dim " +
                                std::to_string(router.embed_dim));
  ModelConfig cfg;
  cfg.modalities = spec.modalities;
  cfg.tokens_per_modality = spec.tokens_per_modality;
  cfg.raw_dims = spec.raw_dims;
  cfg.classes = spec.classes;
  cfg.router = router;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

// ---- routing primitives ----

UncertaintyReport uncertainty_metrics(const Matrix& prob, std::size_t slots) {
  if (slots == 0 || prob.rows() % slots != 0)
    throw std::invalid_argument("uncertainty_metrics: row count " + std::to_string(prob.rows()) +
                                " is not a multiple of slots " + std::to_string(slots));
  const std::size_t n = prob.cols();
  if (n == 0) throw std::invalid_argument("uncertainty_metrics: no experts");
  const double ln_n = std::log(static_cast<double>(n));
  const std::size_t tokens = prob.rows() / slots;

  UncertaintyReport r;
  for (Matrix* m : {&r.entropy_nats, &r.entropy_bits, &r.normalized_certainty, &r.max_prob, &r.margin, &r.gini,
                    &r.variance, &r.kl_vs_uniform})
    *m = Matrix(tokens, slots);

  std::vector<double> sorted(n);
  for (std::size_t row = 0; row < prob.rows(); ++row) {
    const auto p = prob.row_span(row);
    double total = 0.0;
    for (double v : p) {
      if (!(v >= 0.0)) throw std::invalid_argument("uncertainty_metrics: negative or NaN probability in row " + std::to_string(row));
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-6)
      throw std::invalid_argument("uncertainty_metrics: row " + std::to_string(row) + " sums to " + std::to_string(total));

    double h = 0.0, sq = 0.0, var = 0.0;
    for (double v : p) {
      h -= v * std::log(v + kLogEps);
      sq += v * v;
      const double d = v - 1.0 / static_cast<double>(n);
      var += d * d;
    }
    h = std::max(h, 0.0);
    std::copy(p.begin(), p.end(), sorted.begin());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());

    const std::size_t t = row / slots, s = row % slots;
    r.entropy_nats(t, s) = h;
    r.entropy_bits(t, s) = h / std::numbers::ln2;
    r.normalized_certainty(t, s) = n > 1 ? 1.0 - h / ln_n : 1.0;
    r.max_prob(t, s) = sorted[0];
    r.margin(t, s) = n > 1 ? sorted[0] - sorted[1] : sorted[0];
    r.gini(t, s) = 1.0 - sq;
    r.variance(t, s) = var;
    // Equal to sum p (ln p - ln(1/n)) up to the log epsilon; written against
    // the clamped entropy so KL + H = ln n holds exactly.
    r.kl_vs_uniform(t, s) = ln_n - h;
  }
  r.mean_entropy_nats = mean_of(r.entropy_nats);
  r.mean_entropy_bits = mean_of(r.entropy_bits);
  r.mean_normalized_certainty = mean_of(r.normalized_certainty);
  r.mean_max_prob = mean_of(r.max_prob);
  r.mean_margin = mean_of(r.margin);
  r.mean_gini = mean_of(r.gini);
  r.mean_variance = mean_of(r.variance);
  r.mean_kl_vs_uniform = mean_of(r.kl_vs_uniform);
  return r;
}

NormalizedRouting normalize_for_routing(const Matrix& z, const Matrix& phi, double scale) {
  if (z.cols() != phi.rows())
    throw ShapeError("normalize_for_routing: tokens " + z.shape_str() + " vs router " + phi.shape_str());
  ad::Tape t;
  ad::Var zn = ad::normalize_rows(t.constant(z));
  ad::Var pn = ad::normalize_cols(t.constant(phi));
  NormalizedRouting out;
  out.tokens = zn.value();
  out.router = pn.value();
  for (auto& v : out.router.values()) v *= scale;
  out.guarded_rows = t.guarded(zn);
  out.guarded_cols = t.guarded(pn);
  return out;
}

Matrix routing_logits(const Matrix& z_norm, const Matrix& phi_effective) {
  if (z_norm.cols() != phi_effective.rows())
    throw ShapeError("routing_logits: tokens " + z_norm.shape_str() + " vs router " + phi_effective.shape_str());
  return matmul(z_norm, phi_effective);
}

Matrix dispatch_weights(const Matrix& logits) { return ad::softmax_cols(logits); }
Matrix combine_weights(const Matrix& logits) { return ad::softmax_rows(logits); }

Matrix expert_probabilities(const Matrix& logits, int n_experts, int slots_per_expert) {
  const auto n = static_cast<std::size_t>(n_experts), P = static_cast<std::size_t>(slots_per_expert);
  if (logits.cols() != n * P) throw ShapeError("expert_probabilities: logits " + logits.shape_str());
  Matrix grouped(logits.rows() * P, n);
  for (std::size_t t = 0; t < logits.rows(); ++t)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t i = 0; i < n; ++i) grouped(t * P + p, i) = logits(t, i * P + p);
  return ad::softmax_rows(grouped);
}

bool gate(const UncertaintyReport& report, const RouterConfig& cfg, int tokens) {
  const double xi = cfg.effective_threshold(tokens);
  if (cfg.gating_metric == GatingMetric::Entropy) return report.mean_entropy_nats >= xi;
  return report.mean_kl_vs_uniform <= xi;
}

// ---- experts ----

Expert::Expert(int index, int embed_dim, int hidden, std::uint64_t seed) {
  Rng rng = make_rng(seed, stream::kModelInit + 300 + static_cast<std::uint64_t>(index));
  const auto d = static_cast<std::size_t>(embed_dim), h = static_cast<std::size_t>(hidden);
  const std::string p = "expert." + std::to_string(index) + ".";
  w1 = ad::Parameter(p + "w1", gaussian(rng, d, h, 1.0 / std::sqrt(static_cast<double>(d))));
  b1 = ad::Parameter(p + "b1", Matrix(1, h));
  w2 = ad::Parameter(p + "w2", gaussian(rng, h, d, 1.0 / std::sqrt(static_cast<double>(h))));
  b2 = ad::Parameter(p + "b2", Matrix(1, d));
}

ad::Var Expert::apply(ad::Tape& tape, ad::Var x, Activation act) {
  ad::Var h = ad::add(ad::matmul(x, tape.param(w1)), tape.param(b1));
  h = act == Activation::Gelu ? ad::gelu(h) : ad::relu(h);
  return ad::add(ad::matmul(h, tape.param(w2)), tape.param(b2));
}

ad::Var apply_experts(ad::Tape& tape, ad::Var z_norm, ad::Var dispatch, ad::Var combine, std::span<Expert> experts,
                      int slots_per_expert, Activation act) {
  const auto P = static_cast<std::size_t>(slots_per_expert);
  if (dispatch.cols() != experts.size() * P)
    throw ShapeError("apply_experts: dispatch " + dispatch.value().shape_str() + " for " + std::to_string(experts.size()) +
                     " experts x " + std::to_string(P) + " slots");
  ad::Var slot_inputs = ad::matmul(ad::transpose(dispatch), z_norm);
  std::vector<ad::Var> outs;
  outs.reserve(experts.size());
  for (std::size_t j = 0; j < experts.size(); ++j) {
    ad::Var y = experts[j].apply(tape, ad::slice_rows(slot_inputs, j * P, P), act);
    if (y.cols() != z_norm.cols())
      throw ShapeError("apply_experts: expert " + std::to_string(j) + " outputs " + std::to_string(y.cols()) +
                       " features, expected " + std::to_string(z_norm.cols()));
    outs.push_back(y);
  }
  return ad::matmul(combine, ad::concat_rows(outs));
}

// ---- routing matrices ----

bool RoutingMatrices::ensure_residual(ModalityMask mask) {
  if (residuals.contains(mask.bits)) return false;
  residuals.emplace(mask.bits, ad::Parameter("router.residual." + std::to_string(mask.bits),
                                             Matrix(shared.value.rows(), shared.value.cols())));
  return true;
}

ad::Parameter* RoutingMatrices::residual(ModalityMask mask) {
  auto it = residuals.find(mask.bits);
  return it == residuals.end() ? nullptr : &it->second;
}

// ---- fusion block ----

FusionBlock::FusionBlock(const RouterConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = make_rng(seed, stream::kModelInit + 200);
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  wq_ = ad::Parameter("attention.wq", gaussian(rng, d, d, sd));
  wk_ = ad::Parameter("attention.wk", gaussian(rng, d, d, sd));
  wv_ = ad::Parameter("attention.wv", gaussian(rng, d, d, sd));
  routing_.shared = ad::Parameter("router.shared", gaussian(rng, d, static_cast<std::size_t>(cfg.slots()), 1.0));
  routing_.scale = ad::Parameter("router.scale", Matrix(1, 1, cfg.scale));
  for (int j = 0; j < cfg.n_experts; ++j) experts_.emplace_back(j, cfg.embed_dim, cfg.expert_hidden, seed);
}

ad::Var FusionBlock::attend(ad::Tape& tape, ad::Var z) {
  ad::Var q = ad::matmul(z, tape.param(wq_));
  ad::Var k = ad::matmul(z, tape.param(wk_));
  ad::Var v = ad::matmul(z, tape.param(wv_));
  const double inv = 1.0 / std::sqrt(static_cast<double>(cfg_.embed_dim));
  ad::Var attn = ad::row_softmax(ad::scale(ad::matmul(q, ad::transpose(k)), inv));
  return ad::add(z, ad::matmul(attn, v));
}

FusionTrace FusionBlock::fuse(ad::Tape& tape, ad::Var z, ModalityMask group, Phase phase, bool create_missing) {
  if (z.cols() != static_cast<std::size_t>(cfg_.embed_dim))
    throw ShapeError("fuse: token grid " + z.value().shape_str() + " does not match embed_dim " +
                     std::to_string(cfg_.embed_dim));
  FusionTrace tr;
  ad::Var zn = ad::normalize_rows(attend(tape, z));
  tr.guarded = tape.guarded(zn);
  ad::Var phi_shared = tape.param(routing_.shared);
  ad::Var s = cfg_.learn_scale ? tape.param(routing_.scale) : tape.constant(routing_.scale.value);
  auto route = [&](ad::Var phi) {
    ad::Var pn = ad::normalize_cols(phi);
    tr.guarded += tape.guarded(pn);
    return ad::scale_by(pn, s);
  };

  ad::Var logits = ad::matmul(zn, route(phi_shared));
  const int tokens = static_cast<int>(z.rows());
  tr.report = uncertainty_metrics(expert_probabilities(logits.value(), cfg_.n_experts, cfg_.slots_per_expert),
                                  static_cast<std::size_t>(cfg_.slots_per_expert));

  if (phase == Phase::Stage2Gated) {
    if (cfg_.entropy_mode == EntropyMode::Global) {
      const Matrix& lv = logits.value();
      const Matrix flat = ad::softmax_rows(Matrix(1, lv.size(), std::vector<double>(lv.values().begin(), lv.values().end())));
      tr.gate_fired = gate(uncertainty_metrics(flat), cfg_, tokens);
    } else {
      tr.gate_fired = gate(tr.report, cfg_, tokens);
    }
    if (tr.gate_fired) {
      ad::Parameter* res = routing_.residual(group);
      if (!res && create_missing) {
        tr.residual_created = routing_.ensure_residual(group);
        res = routing_.residual(group);
      }
      if (res) {
        logits = ad::matmul(zn, route(ad::add(phi_shared, tape.param(*res))));
      } else {
        tr.residual_missing = true;
      }
    }
  }

  ad::Var dispatch;
  if (cfg_.dispatch_axis == DispatchAxis::Tokens) {
    dispatch = ad::col_softmax(logits);
  } else {
    // Softmax over experts separately for each slot index p, via selection
    // matrices that gather columns {i*P + p}.
    const auto n = static_cast<std::size_t>(cfg_.n_experts), P = static_cast<std::size_t>(cfg_.slots_per_expert);
    if (P == 1) {
      dispatch = ad::row_softmax(logits);
    } else {
      std::vector<ad::Var> parts;
      for (std::size_t p = 0; p < P; ++p) {
        Matrix sel(n * P, n);
        for (std::size_t i = 0; i < n; ++i) sel(i * P + p, i) = 1.0;
        ad::Var selv = tape.constant(sel);
        parts.push_back(ad::matmul(ad::row_softmax(ad::matmul(logits, selv)), ad::transpose(selv)));
      }
      dispatch = parts[0];
      for (std::size_t p = 1; p < P; ++p) dispatch = ad::add(dispatch, parts[p]);
    }
  }
  ad::Var combine = ad::row_softmax(logits);
  tr.dispatch = dispatch.value();
  tr.combine = combine.value();
  tr.fused = apply_experts(tape, zn, dispatch, combine, experts_, cfg_.slots_per_expert, cfg_.activation);
  return tr;
}

std::vector<ad::Parameter*> FusionBlock::router_parameters() {
  std::vector<ad::Parameter*> out{&routing_.shared};
  if (cfg_.learn_scale) out.push_back(&routing_.scale);
  return out;
}

std::vector<ad::Parameter*> FusionBlock::residual_parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& [bits, p] : routing_.residuals) out.push_back(&p);
  return out;
}

std::vector<ad::Parameter*> FusionBlock::expert_parameters(std::size_t count) {
  std::vector<ad::Parameter*> out;
  for (std::size_t j = 0; j < std::min(count, experts_.size()); ++j)
    for (ad::Parameter* p : experts_[j].parameters()) out.push_back(p);
  return out;
}

std::vector<FusionOutput> fused_forward(FusionBlock& block, std::span<const Matrix> token_grids, ModalityMask group,
                                        Phase phase) {
  std::vector<FusionOutput> out;
  out.reserve(token_grids.size());
  for (const Matrix& z : token_grids) {
    ad::Tape tape;
    FusionTrace tr = block.fuse(tape, tape.constant(z), group, phase);
    out.push_back({tr.fused.value(), std::move(tr.dispatch), std::move(tr.combine), std::move(tr.report), tr.gate_fired,
                   tr.residual_created});
  }
  return out;
}

// ---- model ----

RemindModel::RemindModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  encoders_ = ModalityEncoders(cfg.raw_dims, cfg.router.embed_dim, cfg.seed);
  bank_ = EmbeddingBank(cfg.modalities, cfg.router.embed_dim, cfg.seed);
  fusion_ = FusionBlock(cfg.router, cfg.seed);
  Rng rng = make_rng(cfg.seed, stream::kModelInit + 400);
  const auto d = static_cast<std::size_t>(cfg.router.embed_dim);
  head_w_ = ad::Parameter("head.weight", gaussian(rng, d, static_cast<std::size_t>(cfg.classes), 1.0 / std::sqrt(static_cast<double>(d))));
  head_b_ = ad::Parameter("head.bias", Matrix(1, static_cast<std::size_t>(cfg.classes)));
}

SampleTrace RemindModel::forward(ad::Tape& tape, const Sample& sample, Phase phase, bool create_missing) {
  ad::Var z = apply_missing(tape, sample, bank_, encoders_, cfg_.tokens_per_modality);
  SampleTrace st;
  st.fusion = fusion_.fuse(tape, z, sample.mask, phase, create_missing);
  ad::Var pooled = ad::mean_rows(st.fusion.fused);
  st.logits = ad::add(ad::matmul(pooled, tape.param(head_w_)), tape.param(head_b_));
  return st;
}

ad::Var focal_loss(ad::Var probs, int label, double gamma) {
  if (gamma < 0.0) throw std::invalid_argument("focal_loss: gamma must be >= 0");
  ad::Var p = ad::pick(probs, 0, static_cast<std::size_t>(label));
  ad::Var nll = ad::scale(ad::log(p, kLogEps), -1.0);
  if (gamma == 0.0) return nll;
  ad::Var weight = ad::pow(ad::add_scalar(ad::scale(p, -1.0), 1.0), gamma);
  return ad::mul(weight, nll);
}

ad::Var cross_entropy_loss(ad::Var probs, int label) { return focal_loss(probs, label, 0.0); }

double focal_loss_value(double p_label, double gamma) {
  if (gamma < 0.0) throw std::invalid_argument("focal_loss: gamma must be >= 0");
  const double nll = -std::log(p_label + kLogEps);
  return gamma == 0.0 ? nll : std::pow(1.0 - p_label, gamma) * nll;
}

ad::Var RemindModel::loss(ad::Tape& tape, const Sample& sample, Phase phase, LossKind kind, double focal_gamma,
                          bool create_missing, SampleTrace* trace) {
  SampleTrace st = forward(tape, sample, phase, create_missing);
  ad::Var probs = ad::row_softmax(st.logits);
  ad::Var l = kind == LossKind::Focal ? focal_loss(probs, sample.label, focal_gamma) : cross_entropy_loss(probs, sample.label);
  if (trace) *trace = std::move(st);
  return l;
}

std::vector<double> RemindModel::predict_proba(const Sample& sample, Phase phase) {
  ad::Tape tape;
  SampleTrace st = forward(tape, sample, phase, false);
  const Matrix p = ad::softmax_rows(st.logits.value());
  return {p.values().begin(), p.values().end()};
}

int RemindModel::predict(const Sample& sample, Phase phase) {
  const auto p = predict_proba(sample, phase);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

std::vector<ad::Parameter*> RemindModel::parameters(unsigned groups, double expert_fraction) {
  std::vector<ad::Parameter*> out;
  if (groups & kEncoders)
    for (auto* p : encoders_.parameters()) out.push_back(p);
  if (groups & kBank)
    for (auto& p : bank_.parameters()) out.push_back(&p);
  if (groups & kAttention)
    for (auto* p : fusion_.attention_parameters()) out.push_back(p);
  if (groups & kRouter)
    for (auto* p : fusion_.router_parameters()) out.push_back(p);
  if (groups & kResiduals)
    for (auto* p : fusion_.residual_parameters()) out.push_back(p);
  if (groups & kExperts) {
    const auto n = static_cast<double>(fusion_.experts().size());
    const auto count = static_cast<std::size_t>(std::ceil(std::clamp(expert_fraction, 0.0, 1.0) * n - 1e-9));
    for (auto* p : fusion_.expert_parameters(count)) out.push_back(p);
  }
  if (groups & kHead) {
    out.push_back(&head_w_);
    out.push_back(&head_b_);
  }
  return out;
}

std::vector<ad::Parameter*> RemindModel::parameters_by_name(std::span<const std::string> names) {
  std::vector<ad::Parameter*> out;
  auto all = parameters(kAll);
  // learn_scale=false keeps the scale out of kRouter; still addressable by name.
  all.push_back(&fusion_.routing().scale);
  for (const auto& name : names) {
    auto it = std::find_if(all.begin(), all.end(), [&](ad::Parameter* p) { return p->name == name; });
    if (it == all.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
    out.push_back(*it);
  }
  return out;
}

std::uint64_t RemindModel::hash() {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  auto params = parameters(kAll);
  if (!fusion_.config().learn_scale) params.push_back(&fusion_.routing().scale);
  for (ad::Parameter* p : params) {
    feed(p->name.data(), p->name.size());
    feed(p->value.values().data(), p->value.size() * sizeof(double));
  }
  return h;
}

// ---- enums ----

GatingMetric parse_gating_metric(const std::string& s) {
  if (s == "entropy") return GatingMetric::Entropy;
  if (s == "kl" || s == "kl-vs-uniform") return GatingMetric::KlUniform;
  throw std::invalid_argument("unknown gating metric '" + s + "' (expected entropy or kl-vs-uniform)");
}
DispatchAxis parse_dispatch_axis(const std::string& s) {
  if (s == "tokens") return DispatchAxis::Tokens;
  if (s == "experts") return DispatchAxis::Experts;
  throw std::invalid_argument("unknown dispatch axis '" + s + "' (expected tokens or experts)");
}
EntropyMode parse_entropy_mode(const std::string& s) {
  if (s == "per-token") return EntropyMode::PerToken;
  if (s == "global") return EntropyMode::Global;
  throw std::invalid_argument("unknown entropy mode '" + s + "' (expected per-token or global)");
}
Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::Gelu;
  if (s == "relu") return Activation::Relu;
  throw std::invalid_argument("unknown activation '" + s + "' (expected gelu or relu)");
}
LossKind parse_loss_kind(const std::string& s) {
  if (s == "focal") return LossKind::Focal;
  if (s == "cross-entropy") return LossKind::CrossEntropy;
  throw std::invalid_argument("unknown loss '" + s + "' (expected focal or cross-entropy)");
}
const char* to_string(GatingMetric v) { return v == GatingMetric::Entropy ? "entropy" : "kl-vs-uniform"; }
const char* to_string(DispatchAxis v) { return v == DispatchAxis::Tokens ? "tokens" : "experts"; }
const char* to_string(EntropyMode v) { return v == EntropyMode::PerToken ? "per-token" : "global"; }
const char* to_string(Activation v) { return v == Activation::Gelu ? "gelu" : "relu"; }
const char* to_string(LossKind v) { return v == LossKind::Focal ? "focal" : "cross-entropy"; }

// ---- checkpoint io ----

void append_double(std::string& out, double v) {
  char tmp[64];
  auto [end, ec] = std::to_chars(tmp, tmp + sizeof tmp, v);
  out.append(tmp, end);
}

double parse_double_token(std::string_view tok) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw std::runtime_error("malformed number '" + std::string(tok) + "'");
  return v;
}

std::string model_config_to_json(const ModelConfig& cfg) {
  const RouterConfig& r = cfg.router;
  nlohmann::ordered_json router = {{"embed_dim", r.embed_dim},
                                   {"n_experts", r.n_experts},
                                   {"slots_per_expert", r.slots_per_expert},
                                   {"scale", r.scale},
                                   {"learn_scale", r.learn_scale},
                                   {"gating_metric", to_string(r.gating_metric)},
                                   {"threshold", r.threshold ? nlohmann::ordered_json(*r.threshold) : nlohmann::ordered_json()},
                                   {"expert_hidden", r.expert_hidden},
                                   {"dispatch_axis", to_string(r.dispatch_axis)},
                                   {"entropy_mode", to_string(r.entropy_mode)},
                                   {"activation", to_string(r.activation)}};
  nlohmann::ordered_json j = {{"modalities", cfg.modalities},
                              {"tokens_per_modality", cfg.tokens_per_modality},
                              {"raw_dims", cfg.raw_dims},
                              {"classes", cfg.classes},
                              {"seed", cfg.seed},
                              {"router", router}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig cfg;
  cfg.modalities = j.at("modalities").get<int>();
  cfg.tokens_per_modality = j.at("tokens_per_modality").get<int>();
  cfg.raw_dims = j.at("raw_dims").get<std::vector<int>>();
  cfg.classes = j.at("classes").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  const auto& r = j.at("router");
  cfg.router.embed_dim = r.at("embed_dim").get<int>();
  cfg.router.n_experts = r.at("n_experts").get<int>();
  cfg.router.slots_per_expert = r.at("slots_per_expert").get<int>();
  cfg.router.scale = r.at("scale").get<double>();
  cfg.router.learn_scale = r.at("learn_scale").get<bool>();
  cfg.router.gating_metric = parse_gating_metric(r.at("gating_metric").get<std::string>());
  if (!r.at("threshold").is_null()) cfg.router.threshold = r.at("threshold").get<double>();
  cfg.router.expert_hidden = r.at("expert_hidden").get<int>();
  cfg.router.dispatch_axis = parse_dispatch_axis(r.at("dispatch_axis").get<std::string>());
  cfg.router.entropy_mode = parse_entropy_mode(r.at("entropy_mode").get<std::string>());
  cfg.router.activation = parse_activation(r.at("activation").get<std::string>());
  return cfg;
}

void write_model(std::ostream& os, RemindModel& model) {
  os << "remind-checkpoint 1\n";
  os << "config " << model_config_to_json(model.config()) << '\n';
  auto params = model.parameters(kAll);
  if (!model.config().router.learn_scale) params.push_back(&model.fusion().routing().scale);
  std::string line;
  for (ad::Parameter* p : params) {
    line = "param " + p->name + ' ' + std::to_string(p->value.rows()) + ' ' + std::to_string(p->value.cols());
    for (double v : p->value.values()) {
      line += ' ';
      append_double(line, v);
    }
    line += '\n';
    os << line;
  }
  os << "end-model\n";
}

RemindModel read_model(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "remind-checkpoint 1") throw std::runtime_error("checkpoint: bad header");
  if (!std::getline(is, line) || line.rfind("config ", 0) != 0) throw std::runtime_error("checkpoint: missing config");
  RemindModel model(model_config_from_json(line.substr(7)));
  const std::string residual_prefix = "router.residual.";
  while (std::getline(is, line)) {
    if (line == "end-model") return model;
    if (line.rfind("param ", 0) != 0) throw std::runtime_error("checkpoint: unexpected line in model section");
    std::vector<std::string_view> toks;
    std::string_view rest(line);
    while (!rest.empty()) {
      const auto sp = rest.find(' ');
      toks.push_back(rest.substr(0, sp));
      if (sp == std::string_view::npos) break;
      rest.remove_prefix(sp + 1);
    }
    if (toks.size() < 4) throw std::runtime_error("checkpoint: malformed param line");
    const std::string name(toks[1]);
    const auto rows = static_cast<std::size_t>(std::stoull(std::string(toks[2])));
    const auto cols = static_cast<std::size_t>(std::stoull(std::string(toks[3])));
    if (toks.size() != 4 + rows * cols) throw std::runtime_error("checkpoint: value count mismatch for " + name);
    std::vector<double> vals(rows * cols);
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = parse_double_token(toks[4 + i]);

    ad::Parameter* target = nullptr;
    if (name.rfind(residual_prefix, 0) == 0) {
      const auto bits = static_cast<std::uint32_t>(std::stoul(name.substr(residual_prefix.size())));
      model.fusion().routing().ensure_residual({bits});
      target = model.fusion().routing().residual({bits});
    } else {
      const std::string names[] = {name};
      target = model.parameters_by_name(names).front();
    }
    if (target->value.rows() != rows || target->value.cols() != cols)
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    target->value = Matrix(rows, cols, std::move(vals));
    target->grad = Matrix(rows, cols);
  }
  throw std::runtime_error("checkpoint: missing end-model");
}

}  // namespace remind
