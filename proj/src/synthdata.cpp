#include "remind/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "remind/rng.hpp"

namespace remind {

int ModalityMask::count() const { return std::popcount(bits); }

std::string ModalityMask::label(int m) const {
  std::string s;
  for (int i = 0; i < m; ++i) {
    if (!has(i)) continue;
    if (!s.empty()) s += '+';
    s += "M" + std::to_string(i + 1);
  }
  return s;
}

int group_count(int m) { return (1 << m) - 1; }

std::vector<ModalityMask> enumerate_groups(int m) {
  if (m < 1) throw std::invalid_argument("enumerate_groups: need at least one modality");
  if (m > 30) throw std::invalid_argument("enumerate_groups: too many modalities");
  std::vector<ModalityMask> out;
  out.reserve(static_cast<std::size_t>(group_count(m)));
  for (std::uint32_t b = 1; b <= static_cast<std::uint32_t>(group_count(m)); ++b) out.push_back({b});
  return out;
}

double group_probability(ModalityMask mask, std::span<const double> p) {
  if (mask.empty()) throw std::invalid_argument("group_probability: empty modality combination");
  if (p.size() < 32 && (mask.bits >> p.size()) != 0)
    throw std::invalid_argument("group_probability: mask references a modality beyond m = " + std::to_string(p.size()));
  double prob = 1.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0 && p[i] < 1.0))
      throw std::invalid_argument("group_probability: missing probability p" + std::to_string(i + 1) +
                                  " must lie in [0, 1)");
    prob *= mask.has(static_cast<int>(i)) ? 1.0 - p[i] : p[i];
  }
  return prob;
}

std::vector<double> group_distribution(std::span<const double> p) {
  const int m = static_cast<int>(p.size());
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(group_count(m)));
  for (ModalityMask g : enumerate_groups(m)) out.push_back(group_probability(g, p));
  const double total = std::accumulate(out.begin(), out.end(), 0.0);
  for (auto& v : out) v /= total;
  return out;
}

void DatasetSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("dataset spec: " + what); };
  if (modalities < 2 || modalities > kMaxModalities) fail("modalities must be in [2, 8]");
  if (missing_prob.size() != static_cast<std::size_t>(modalities)) fail("missing_prob needs one entry per modality");
  for (double p : missing_prob)
    if (!(p >= 0.0 && p < 1.0)) fail("missing probabilities must lie in [0, 1)");
  if (tokens_per_modality < 1) fail("tokens_per_modality must be >= 1");
  if (embed_dim < 2) fail("embed_dim must be >= 2");
  if (raw_dims.size() != static_cast<std::size_t>(modalities)) fail("raw_dims needs one entry per modality");
  for (int r : raw_dims)
    if (r < 1) fail("raw_dims entries must be >= 1");
  if (classes < 2) fail("classes must be >= 2");
  if (n_samples < 1) fail("n_samples must be >= 1");
  if (!(missing_correlation >= 0.0 && missing_correlation <= 1.0)) fail("missing_correlation must lie in [0, 1]");
  if (!(tail_threshold > 0.0 && tail_threshold < 1.0)) fail("tail_threshold must lie in (0, 1)");
  const auto& cs = concept_shift;
  if (!(cs.label_noise >= 0.0 && cs.label_noise <= 1.0)) fail("label_noise must lie in [0, 1]");
  if (!(cs.subset_keep > 0.0 && cs.subset_keep <= 1.0)) fail("subset_keep must lie in (0, 1]");
}

std::vector<double> Dataset::frequencies() const {
  const double n = static_cast<double>(samples.size());
  std::vector<double> f(histogram.size());
  for (std::size_t k = 0; k < f.size(); ++k) f[k] = n > 0 ? static_cast<double>(histogram[k]) / n : 0.0;
  return f;
}

namespace {

std::vector<double> unit_gaussian(Rng& rng, std::size_t n) {
  std::normal_distribution<double> nd;
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  const double nr = norm2(v);
  for (auto& x : v) x /= nr;
  return v;
}

// Rules read the token average, so they do not depend on token order.
std::vector<double> token_mean(const Matrix& block) {
  std::vector<double> m(block.cols(), 0.0);
  for (std::size_t r = 0; r < block.rows(); ++r)
    for (std::size_t c = 0; c < block.cols(); ++c) m[c] += block(r, c);
  // scaled by sqrt(l) rather than l so the score variance does not shrink with l
  for (double& v : m) v /= std::sqrt(static_cast<double>(block.rows()));
  return m;
}

Matrix gaussian_block(Rng& rng, int rows, int cols) {
  std::normal_distribution<double> nd;
  Matrix m(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
  for (auto& x : m.values()) x = nd(rng);
  return m;
}

ModalityMask draw_mask(const DatasetSpec& spec, std::discrete_distribution<int>& groups, Rng& rng) {
  if (spec.missing_correlation == 0.0) return ModalityMask::from_group_id(groups(rng));
  std::uniform_real_distribution<double> u01;
  std::bernoulli_distribution share(spec.missing_correlation);
  while (true) {
    const double shared = u01(rng);
    ModalityMask mask;
    for (int i = 0; i < spec.modalities; ++i) {
      const double u = share(rng) ? shared : u01(rng);
      if (u >= spec.missing_prob[static_cast<std::size_t>(i)]) mask.bits |= 1u << i;
    }
    if (!mask.empty()) return mask;
  }
}

Sample draw_sample(const DatasetSpec& spec, const LabelRule& rule, ModalityMask mask, Rng& rng) {
  Sample s;
  s.mask = mask;
  s.group_id = mask.group_id();
  s.raw.resize(static_cast<std::size_t>(spec.modalities));
  for (int i = 0; i < spec.modalities; ++i)
    if (mask.has(i)) s.raw[static_cast<std::size_t>(i)] = gaussian_block(rng, spec.tokens_per_modality, spec.raw_dims[static_cast<std::size_t>(i)]);
  s.label = rule.classify(s.raw, mask);
  if (spec.concept_shift.label_noise > 0.0) {
    std::bernoulli_distribution flip(spec.concept_shift.label_noise);
    std::uniform_int_distribution<int> cls(0, spec.classes - 1);
    if (flip(rng)) s.label = cls(rng);
  }
  return s;
}

}  // namespace

LabelRule::LabelRule(const DatasetSpec& spec) : spec_(spec) {
  spec.validate();
  Rng rng = make_rng(spec.seed, stream::kLabelRule);
  const auto m = static_cast<std::size_t>(spec.modalities);
  const auto classes = static_cast<std::size_t>(spec.classes);
  auto block = [&](std::size_t i) {
    return static_cast<std::size_t>(spec.raw_dims[i]);
  };

  shared_.assign(classes, std::vector<std::vector<double>>(m));
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < m; ++i) shared_[c][i] = unit_gaussian(rng, block(i));

  const int groups = group_count(spec.modalities);
  specific_.resize(static_cast<std::size_t>(groups));
  std::bernoulli_distribution keep(spec.concept_shift.subset_keep);
  for (int g = 0; g < groups; ++g) {
    auto& per_class = specific_[static_cast<std::size_t>(g)];
    per_class.assign(classes, std::vector<std::vector<double>>(m));
    for (std::size_t c = 0; c < classes; ++c)
      for (std::size_t i = 0; i < m; ++i) per_class[c][i] = unit_gaussian(rng, block(i));

    const ModalityMask mask = ModalityMask::from_group_id(g);
    ModalityMask sup;
    for (int i = 0; i < spec.modalities; ++i)
      if (mask.has(i) && keep(rng)) sup.bits |= 1u << i;
    if (sup.empty()) {
      std::vector<int> present;
      for (int i = 0; i < spec.modalities; ++i)
        if (mask.has(i)) present.push_back(i);
      std::uniform_int_distribution<std::size_t> pick(0, present.size() - 1);
      sup.bits = 1u << present[pick(rng)];
    }
    support_.push_back(sup);
  }
  synergy_a_ = unit_gaussian(rng, block(0));
  synergy_b_ = unit_gaussian(rng, block(1));
}

double LabelRule::score(std::span<const Matrix> raw, ModalityMask mask, int cls) const {
  const auto g = static_cast<std::size_t>(mask.group_id());
  const auto c = static_cast<std::size_t>(cls);
  const ModalityMask sup = support_[g];
  double s = 0.0;
  for (int i = 0; i < spec_.modalities; ++i) {
    if (!sup.has(i)) continue;
    const auto ii = static_cast<std::size_t>(i);
    const auto x = token_mean(raw[ii]);
    s += spec_.concept_shift.shared_weight * dot(shared_[c][ii], x) +
         spec_.concept_shift.group_weight * dot(specific_[g][c][ii], x);
  }
  s /= std::sqrt(static_cast<double>(sup.count()));
  if (spec_.concept_shift.synergy != 0.0 && mask.has(0) && mask.has(1) && cls < 2) {
    const double t = spec_.concept_shift.synergy * dot(synergy_a_, token_mean(raw[0])) * dot(synergy_b_, token_mean(raw[1]));
    s += cls == 0 ? t : -t;
  }
  return s;
}

int LabelRule::classify(std::span<const Matrix> raw, ModalityMask mask) const {
  int best = 0;
  double best_score = score(raw, mask, 0);
  for (int c = 1; c < spec_.classes; ++c) {
    const double s = score(raw, mask, c);
    if (s > best_score) {
      best = c;
      best_score = s;
    }
  }
  return best;
}

void refresh_histogram(Dataset& ds) {
  const int groups = group_count(ds.spec.modalities);
  ds.histogram.assign(static_cast<std::size_t>(groups), 0);
  for (const auto& s : ds.samples) ++ds.histogram.at(static_cast<std::size_t>(s.group_id));
}

Dataset sample_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  const LabelRule rule(spec);
  const std::vector<double> probs = group_distribution(spec.missing_prob);
  for (std::size_t g = 0; g < probs.size(); ++g) {
    if (probs[g] == 0.0)
      ds.warnings.push_back("group " + ModalityMask::from_group_id(static_cast<int>(g)).label(spec.modalities) +
                            " has zero probability and will not be sampled");
  }
  std::discrete_distribution<int> groups(probs.begin(), probs.end());
  Rng rng = make_rng(spec.seed, stream::kSamples);
  ds.samples.reserve(static_cast<std::size_t>(spec.n_samples));
  for (int n = 0; n < spec.n_samples; ++n) ds.samples.push_back(draw_sample(spec, rule, draw_mask(spec, groups, rng), rng));
  refresh_histogram(ds);
  return ds;
}

std::vector<Sample> sample_group(const DatasetSpec& spec, ModalityMask mask, std::size_t n, std::uint64_t seed) {
  const LabelRule rule(spec);
  Rng rng = make_rng(seed, stream::kSamples);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(draw_sample(spec, rule, mask, rng));
  return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(const Dataset& ds, double test_fraction,
                                                                            std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw std::invalid_argument("test_fraction must lie in [0, 1)");
  std::vector<std::vector<std::size_t>> by_group(ds.histogram.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    by_group.at(static_cast<std::size_t>(ds.samples[i].group_id)).push_back(i);
  Rng rng = make_rng(seed, stream::kSplit);
  std::vector<std::size_t> train, test;
  for (auto& members : by_group) {
    std::shuffle(members.begin(), members.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(members.size())));
    test.insert(test.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_test), members.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.spec = ds.spec;
  out.warnings = ds.warnings;
  out.samples.reserve(indices.size());
  for (std::size_t i : indices) out.samples.push_back(ds.samples.at(i));
  refresh_histogram(out);
  return out;
}

std::vector<bool> tail_flags(std::span<const double> frequencies, double threshold) {
  std::vector<bool> out(frequencies.size());
  for (std::size_t k = 0; k < frequencies.size(); ++k) out[k] = frequencies[k] < threshold;
  return out;
}

// ---- serialization ----

namespace {

void put_double(std::string& buf, double v) {
  char tmp[64];
  auto [end, ec] = std::to_chars(tmp, tmp + sizeof tmp, v);
  buf.append(tmp, end);
}

double parse_double(std::string_view tok) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw std::runtime_error("dataset: malformed number '" + std::string(tok) + "'");
  return v;
}

}  // namespace

std::string spec_to_json(const DatasetSpec& spec) {
  nlohmann::ordered_json j;
  j["modalities"] = spec.modalities;
  j["missing_prob"] = spec.missing_prob;
  j["tokens_per_modality"] = spec.tokens_per_modality;
  j["embed_dim"] = spec.embed_dim;
  j["raw_dims"] = spec.raw_dims;
  j["classes"] = spec.classes;
  j["n_samples"] = spec.n_samples;
  j["concept_shift"] = {{"shared_weight", spec.concept_shift.shared_weight},
                        {"group_weight", spec.concept_shift.group_weight},
                        {"synergy", spec.concept_shift.synergy},
                        {"label_noise", spec.concept_shift.label_noise},
                        {"subset_keep", spec.concept_shift.subset_keep}};
  j["missing_correlation"] = spec.missing_correlation;
  j["seed"] = spec.seed;
  j["tail_threshold"] = spec.tail_threshold;
  return j.dump();
}

DatasetSpec spec_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  DatasetSpec s;
  s.modalities = j.at("modalities").get<int>();
  s.missing_prob = j.at("missing_prob").get<std::vector<double>>();
  s.tokens_per_modality = j.at("tokens_per_modality").get<int>();
  s.embed_dim = j.at("embed_dim").get<int>();
  s.raw_dims = j.at("raw_dims").get<std::vector<int>>();
  s.classes = j.at("classes").get<int>();
  s.n_samples = j.at("n_samples").get<int>();
  const auto& cs = j.at("concept_shift");
  s.concept_shift.shared_weight = cs.at("shared_weight").get<double>();
  s.concept_shift.group_weight = cs.at("group_weight").get<double>();
  s.concept_shift.synergy = cs.at("synergy").get<double>();
  s.concept_shift.label_noise = cs.at("label_noise").get<double>();
  s.concept_shift.subset_keep = cs.at("subset_keep").get<double>();
  s.missing_correlation = j.at("missing_correlation").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.tail_threshold = j.at("tail_threshold").get<double>();
  return s;
}

void write_dataset(std::ostream& os, const Dataset& ds) {
  os << "remind-dataset 1\n";
  os << "spec " << spec_to_json(ds.spec) << '\n';
  os << "samples " << ds.samples.size() << '\n';
  std::string line;
  for (const auto& s : ds.samples) {
    line.clear();
    line += std::to_string(s.group_id);
    line += ' ';
    line += std::to_string(s.label);
    for (const auto& block : s.raw)
      for (double v : block.values()) {
        line += ' ';
        put_double(line, v);
      }
    line += '\n';
    os << line;
  }
}

Dataset read_dataset(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "remind-dataset 1") throw std::runtime_error("dataset: bad header");
  if (!std::getline(is, line) || line.rfind("spec ", 0) != 0) throw std::runtime_error("dataset: missing spec line");
  Dataset ds;
  ds.spec = spec_from_json(line.substr(5));
  ds.spec.validate();
  if (!std::getline(is, line) || line.rfind("samples ", 0) != 0) throw std::runtime_error("dataset: missing sample count");
  const std::size_t n = std::stoull(line.substr(8));
  const int groups = group_count(ds.spec.modalities);
  ds.samples.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (!std::getline(is, line)) throw std::runtime_error("dataset: truncated at sample " + std::to_string(k));
    std::vector<std::string_view> toks;
    std::string_view rest(line);
    while (!rest.empty()) {
      const auto sp = rest.find(' ');
      toks.push_back(rest.substr(0, sp));
      if (sp == std::string_view::npos) break;
      rest.remove_prefix(sp + 1);
    }
    if (toks.size() < 2) throw std::runtime_error("dataset: malformed sample line " + std::to_string(k));
    Sample s;
    s.group_id = std::stoi(std::string(toks[0]));
    s.label = std::stoi(std::string(toks[1]));
    if (s.group_id < 0 || s.group_id >= groups) throw std::runtime_error("dataset: group id out of range");
    if (s.label < 0 || s.label >= ds.spec.classes) throw std::runtime_error("dataset: label out of range");
    s.mask = ModalityMask::from_group_id(s.group_id);
    s.raw.resize(static_cast<std::size_t>(ds.spec.modalities));
    std::size_t pos = 2;
    for (int i = 0; i < ds.spec.modalities; ++i) {
      if (!s.mask.has(i)) continue;
      Matrix block(static_cast<std::size_t>(ds.spec.tokens_per_modality),
                   static_cast<std::size_t>(ds.spec.raw_dims[static_cast<std::size_t>(i)]));
      for (auto& v : block.values()) {
        if (pos >= toks.size()) throw std::runtime_error("dataset: sample " + std::to_string(k) + " too short");
        v = parse_double(toks[pos++]);
      }
      s.raw[static_cast<std::size_t>(i)] = std::move(block);
    }
    if (pos != toks.size()) throw std::runtime_error("dataset: sample " + std::to_string(k) + " has trailing values");
    ds.samples.push_back(std::move(s));
  }
  refresh_histogram(ds);
  const auto probs = group_distribution(ds.spec.missing_prob);
  for (std::size_t g = 0; g < probs.size(); ++g)
    if (probs[g] == 0.0)
      ds.warnings.push_back("group " + ModalityMask::from_group_id(static_cast<int>(g)).label(ds.spec.modalities) +
                            " has zero probability and will not be sampled");
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_dataset(os, ds);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_dataset(is);
}

void write_histogram_csv(std::ostream& os, const Dataset& ds) {
  const auto probs = group_distribution(ds.spec.missing_prob);
  const auto freq = ds.frequencies();
  os << "group_id,mask,modalities,count,frequency,probability,tail\n";
  std::string line;
  for (std::size_t g = 0; g < ds.histogram.size(); ++g) {
    const auto mask = ModalityMask::from_group_id(static_cast<int>(g));
    line = std::to_string(g) + ',' + std::to_string(mask.bits) + ',' + mask.label(ds.spec.modalities) + ',' +
           std::to_string(ds.histogram[g]) + ',';
    put_double(line, freq[g]);
    line += ',';
    put_double(line, probs[g]);
    line += probs[g] < ds.spec.tail_threshold ? ",1\n" : ",0\n";
    os << line;
  }
}

// ---- embedding bank / encoders ----

EmbeddingBank::EmbeddingBank(int modalities, int embed_dim, std::uint64_t seed) {
  Rng rng = make_rng(seed, stream::kModelInit);
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(embed_dim)));
  const int groups = group_count(modalities);
  vectors_.reserve(static_cast<std::size_t>(groups));
  for (int g = 0; g < groups; ++g) {
    Matrix v(1, static_cast<std::size_t>(embed_dim));
    for (auto& x : v.values()) x = nd(rng);
    vectors_.emplace_back("bank." + std::to_string(g + 1), std::move(v));
  }
}

ModalityEncoders::ModalityEncoders(std::span<const int> raw_dims, int embed_dim, std::uint64_t seed)
    : embed_dim_(embed_dim) {
  Rng rng = make_rng(seed, stream::kModelInit + 100);
  for (std::size_t i = 0; i < raw_dims.size(); ++i) {
    const auto r = static_cast<std::size_t>(raw_dims[i]);
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(r)));
    Matrix w(r, static_cast<std::size_t>(embed_dim));
    for (auto& x : w.values()) x = nd(rng);
    weights_.emplace_back("encoder." + std::to_string(i + 1) + ".weight", std::move(w));
    biases_.emplace_back("encoder." + std::to_string(i + 1) + ".bias", Matrix(1, static_cast<std::size_t>(embed_dim)));
  }
}

ad::Var ModalityEncoders::encode(ad::Tape& tape, int modality, const Matrix& raw) {
  auto& w = weights_.at(static_cast<std::size_t>(modality));
  if (raw.cols() != w.value.rows())
    throw ShapeError("encoder " + std::to_string(modality + 1) + ": raw block " + raw.shape_str() +
                     " does not match input width " + std::to_string(w.value.rows()));
  ad::Var out = ad::add(ad::matmul(tape.constant(raw), tape.param(w)), tape.param(biases_[static_cast<std::size_t>(modality)]));
  if (out.cols() != static_cast<std::size_t>(embed_dim_))
    throw ShapeError("encoder output " + out.value().shape_str() + " does not match embed_dim " + std::to_string(embed_dim_));
  return out;
}

std::vector<ad::Parameter*> ModalityEncoders::parameters() {
  std::vector<ad::Parameter*> out;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back(&weights_[i]);
    out.push_back(&biases_[i]);
  }
  return out;
}

ad::Var apply_missing(ad::Tape& tape, const Sample& sample, EmbeddingBank& bank, ModalityEncoders& encoders,
                      int tokens_per_modality) {
  const int m = encoders.modalities();
  if (static_cast<int>(sample.raw.size()) != m)
    throw ShapeError("apply_missing: sample has " + std::to_string(sample.raw.size()) + " modality slots, model expects " +
                     std::to_string(m));
  std::vector<ad::Var> blocks;
  blocks.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    if (sample.mask.has(i)) {
      ad::Var z = encoders.encode(tape, i, sample.raw[static_cast<std::size_t>(i)]);
      if (z.rows() != static_cast<std::size_t>(tokens_per_modality))
        throw ShapeError("apply_missing: modality " + std::to_string(i + 1) + " produced " + std::to_string(z.rows()) +
                         " tokens, expected " + std::to_string(tokens_per_modality));
      blocks.push_back(z);
    } else {
      blocks.push_back(ad::broadcast_rows(tape.param(bank.vector(sample.group_id)), static_cast<std::size_t>(tokens_per_modality)));
    }
  }
  return ad::concat_rows(blocks);
}

}  // namespace remind
