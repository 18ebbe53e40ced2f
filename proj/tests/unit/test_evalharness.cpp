#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "remind/evalharness.hpp"

using namespace remind;

namespace {

RemindModel model_for(const DatasetSpec& spec, std::uint64_t seed) {
  RouterConfig r;
  r.embed_dim = spec.embed_dim;
  r.n_experts = 3;
  r.expert_hidden = 4;
  return RemindModel(ModelConfig::from_spec(spec, r, seed));
}

ModelFactory quick_factory(std::uint64_t seed) {
  return [seed](const Dataset& tr) {
    RemindModel m = model_for(tr.spec, seed);
    TrainConfig c;
    c.mode = TrainMode::Remind;
    c.max_steps = 20;
    c.batch_size = 8;
    c.seed = seed;
    train(tr, m, c);
    return m;
  };
}

DatasetSpec full_spec(std::uint64_t seed, int n) {
  DatasetSpec s = oracle::small_spec(seed, n);
  s.missing_prob = {0.0, 0.0, 0.0};
  return s;
}

}  // namespace

TEST_CASE("metrics by hand") {
  const std::vector<int> pred{0, 1, 1, 0, 1}, lab{0, 1, 0, 0, 1};
  const auto m = compute_metrics(pred, lab, 2);
  CHECK(m.support == 5);
  CHECK(m.accuracy == doctest::Approx(0.8));
  // class 0: P = 1, R = 2/3 -> 0.8; class 1: P = 2/3, R = 1 -> 0.8
  CHECK(m.macro_f1 == doctest::Approx(0.8));
  CHECK_FALSE(m.f1_zero_division);
}

TEST_CASE("perfect predictions give F1 one even for a single-class subset") {
  const std::vector<int> y{2, 2, 2};
  const auto m = compute_metrics(y, y, 4);
  CHECK(m.accuracy == 1.0);
  CHECK(m.macro_f1 == 1.0);
}

TEST_CASE("zero-division classes count as zero and are flagged") {
  const std::vector<int> pred{1, 1}, lab{0, 0};
  const auto m = compute_metrics(pred, lab, 2);
  CHECK(m.accuracy == 0.0);
  CHECK(m.macro_f1 == 0.0);
  CHECK(m.f1_zero_division);
  CHECK_THROWS_AS(compute_metrics(std::vector<int>{3}, std::vector<int>{0}, 2), std::invalid_argument);
}

TEST_CASE("group metrics partition the evaluated samples") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> cls(0, 2), grp(0, 6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 60;
    std::vector<int> p(n), y(n), g(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = cls(rng);
      y[i] = cls(rng);
      g[i] = grp(rng);
    }
    std::vector<double> freq{0.5, 0.2, 0.1, 0.1, 0.05, 0.03, 0.02};
    const auto gm = group_metrics(p, y, g, 3, freq, 0.15);
    std::size_t support = 0;
    double correct = 0.0;
    for (const auto& [id, mb] : gm.groups) {
      support += mb.support;
      correct += mb.accuracy * static_cast<double>(mb.support);
    }
    CHECK(support == n);
    CHECK(gm.groups.size() + gm.omitted.size() == 7);
    CHECK(std::abs(correct / n - gm.overall.accuracy) < 1e-12);

    // pooled tail accuracy from scratch
    std::size_t tn = 0, tc = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (freq[g[i]] < 0.15) {
        ++tn;
        tc += p[i] == y[i];
      }
    CHECK(gm.tail_pooled.support == tn);
    if (tn) CHECK(gm.tail_pooled.accuracy == doctest::Approx(static_cast<double>(tc) / tn));
    double worst = 1.0;
    for (const auto& [id, mb] : gm.groups) worst = std::min(worst, mb.accuracy);
    CHECK(gm.worst_group_accuracy == worst);
  }
}

TEST_CASE("top-k experts: mean combine weight, ties to the lower index") {
  Matrix c(2, 4);  // 4 experts, 1 slot
  c(0, 0) = 0.1; c(0, 1) = 0.4; c(0, 2) = 0.4; c(0, 3) = 0.1;
  c(1, 0) = 0.1; c(1, 1) = 0.4; c(1, 2) = 0.4; c(1, 3) = 0.1;
  CHECK(top_k_experts(c, 4, 1, 1) == std::vector<int>{1});
  CHECK(top_k_experts(c, 4, 1, 3) == std::vector<int>{1, 2, 0});
}

TEST_CASE("specialization with k equal to the expert count is all ones") {
  const Dataset ds = sample_dataset(oracle::small_spec(4, 80));
  RemindModel model = model_for(ds.spec, 4);
  const auto s = specialization(model, ds, 3, Phase::Stage1SharedOnly);
  for (double v : s.freq.values()) CHECK(v == 1.0);
  const auto s1 = specialization(model, ds, 1, Phase::Stage1SharedOnly);
  for (std::size_t r = 0; r < s1.freq.rows(); ++r) {
    double row = 0.0;
    for (double v : s1.freq.row_span(r)) row += v;
    CHECK(row == doctest::Approx(1.0));
  }
}

TEST_CASE("modality removal edits exactly floor(rate n) samples") {
  const Dataset full = sample_dataset(full_spec(3, 101));
  const auto rem = remove_modality(full, 1, 0.8, 9);
  CHECK(rem.removed.size() == 80);
  std::set<std::size_t> removed(rem.removed.begin(), rem.removed.end());
  for (std::size_t i = 0; i < full.samples.size(); ++i) {
    const Sample& s = rem.data.samples[i];
    if (removed.contains(i)) {
      CHECK_FALSE(s.mask.has(1));
      CHECK(s.raw[1].empty());
      CHECK(s.group_id == s.mask.group_id());
    } else {
      CHECK(s.mask.count() == 3);
    }
    CHECK(s.raw[0] == full.samples[i].raw[0]);
    CHECK(s.label == full.samples[i].label);
  }
  CHECK_THROWS_AS(remove_modality(full, 1, 1.0, 9), std::invalid_argument);
  CHECK_THROWS_AS(remove_modality(full, 3, 0.5, 9), std::invalid_argument);
  const Dataset partial = sample_dataset(oracle::small_spec(3, 50));
  CHECK_THROWS_AS(remove_modality(partial, 0, 0.5, 9), std::invalid_argument);
}

TEST_CASE("extreme missingness splits the test set into available and absent") {
  const Dataset full = sample_dataset(full_spec(5, 200));
  const auto r = extreme_missingness(quick_factory(5), full, 0, 0.8, 5, 0.3, Phase::Stage2Gated);
  CHECK(r.overall.support == r.available.support + r.absent.support);
  std::set<std::size_t> a(r.test_available.begin(), r.test_available.end());
  for (std::size_t i : r.test_absent) CHECK_FALSE(a.contains(i));
  CHECK(r.hash_before_eval == r.hash_after_eval);
  const double mix = (r.available.accuracy * r.available.support + r.absent.accuracy * r.absent.support) /
                     static_cast<double>(r.overall.support);
  CHECK(mix == doctest::Approx(r.overall.accuracy));
}

TEST_CASE("scope labels parse back") {
  for (const char* s : {"nothing", "head", "head+router", "head+router+experts:0.5"})
    CHECK(parse_scope(s).label() == s);
  CHECK(parse_scope("head+router+experts").expert_fraction == 1.0);
  CHECK_THROWS_AS(parse_scope("router"), std::invalid_argument);
}

TEST_CASE("fine-tuning scopes respect their freeze contracts") {
  DatasetSpec spec = oracle::small_spec(6, 400);
  const Dataset ds = sample_dataset(spec);
  const ModalityMask held{7};
  auto [rest, heldout] = split_heldout(ds, held);
  for (const Sample& s : rest.samples) CHECK(s.mask.bits != held.bits);
  RemindModel base = quick_factory(6)(rest);
  UnseenMcConfig cfg;
  cfg.heldout = held;
  cfg.scopes = {parse_scope("nothing"), parse_scope("head"), parse_scope("head+router"),
                parse_scope("head+router+experts:0.5")};
  cfg.finetune_steps = 30;
  cfg.optimizer = {OptimizerKind::Sgd, 0.05};
  const auto base_hash = base.hash();
  const auto r = adapt_scopes(base, heldout, cfg);
  CHECK(base.hash() == base_hash);
  REQUIRE(r.scopes.size() == 4);
  CHECK(r.adapt.size() + r.test.size() == heldout.samples.size());
  for (const auto& s : r.scopes) CHECK(s.out_of_scope_identical);
  CHECK(r.scopes[0].hash_after == r.scopes[0].hash_before);
  CHECK(r.scopes[0].trained.empty());
  CHECK(r.scopes[1].trained == std::vector<std::string>{"head.weight", "head.bias"});
  CHECK(std::find(r.scopes[2].trained.begin(), r.scopes[2].trained.end(), "router.residual.7") !=
        r.scopes[2].trained.end());
  // half of three experts rounds up to two experts, four tensors each
  CHECK(r.scopes[3].trained.size() == r.scopes[2].trained.size() + 8);
  for (const auto& s : r.scopes) CHECK(s.adapt_loss_after <= s.adapt_loss_before + 1e-12);
}
