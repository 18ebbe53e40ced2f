#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "remind/moefusion.hpp"

using namespace remind;

namespace {

Matrix as_row(const std::vector<double>& p) { return Matrix(1, p.size(), p); }

RouterConfig small_router(int d = 4) {
  RouterConfig r;
  r.embed_dim = d;
  r.n_experts = 3;
  r.slots_per_expert = 2;
  r.expert_hidden = 5;
  return r;
}

RemindModel small_model(std::uint64_t seed, RouterConfig r = small_router()) {
  return RemindModel(ModelConfig::from_spec(oracle::small_spec(seed), r, seed));
}

}  // namespace

TEST_CASE("worked 32-expert example: entropy, KL and maximum entropy") {
  std::vector<double> p{0.2, 0.2, 0.15, 0.1, 0.05};
  for (int i = 0; i < 27; ++i) p.push_back(0.3 / 27.0);
  const auto r = uncertainty_metrics(as_row(p));
  const double h_oracle = oracle::entropy_nats(p);
  CHECK(std::abs(r.mean_entropy_nats - h_oracle) < 1e-6);
  CHECK(std::abs(r.mean_entropy_nats - 2.658) < 0.005);
  CHECK(std::abs(r.mean_kl_vs_uniform - 0.807) < 0.005);
  CHECK(std::abs(std::log(32.0) - 3.4657) < 1e-4);
  CHECK(r.mean_entropy_bits == doctest::Approx(h_oracle / std::numbers::ln2).epsilon(1e-6));
}

TEST_CASE("uniform and one-hot extremes") {
  for (std::size_t n : {2u, 5u, 32u}) {
    const auto u = uncertainty_metrics(as_row(std::vector<double>(n, 1.0 / n)));
    CHECK(u.mean_entropy_nats == doctest::Approx(std::log(static_cast<double>(n))).epsilon(1e-6));
    CHECK(std::abs(u.mean_kl_vs_uniform) < 1e-6);
    CHECK(std::abs(u.mean_normalized_certainty) < 1e-6);
    std::vector<double> hot(n, 0.0);
    hot[n - 1] = 1.0;
    const auto h = uncertainty_metrics(as_row(hot));
    CHECK(h.mean_entropy_nats < 1e-6);
    CHECK(h.mean_max_prob == 1.0);
    CHECK(h.mean_margin == 1.0);
    CHECK(h.mean_gini == 0.0);
  }
}

TEST_CASE("KL + H = ln n on random simplex vectors, KL matches its definition") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> alpha(0.05, 5.0);
  for (std::size_t n : {2u, 8u, 32u}) {
    for (int trial = 0; trial < 300; ++trial) {
      const auto p = oracle::random_simplex(rng, n, alpha(rng));
      const auto r = uncertainty_metrics(as_row(p));
      CHECK(std::abs(r.mean_kl_vs_uniform + r.mean_entropy_nats - std::log(static_cast<double>(n))) < 1e-9);
      double kl = 0.0;
      for (double v : p)
        if (v > 0) kl += v * std::log(static_cast<double>(n) * v);
      CHECK(std::abs(r.mean_kl_vs_uniform - kl) < 1e-6);
      CHECK(r.mean_kl_vs_uniform >= 0.0);
    }
  }
}

TEST_CASE("off-simplex rows are rejected") {
  CHECK_THROWS_AS(uncertainty_metrics(as_row({0.5, 0.4})), std::invalid_argument);
  CHECK_THROWS_AS(uncertainty_metrics(as_row({1.2, -0.2})), std::invalid_argument);
}

TEST_CASE("dispatch columns and combine rows are simplex vectors") {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  std::uniform_real_distribution<double> sc(0.1, 20.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = dim(rng), d = dim(rng) + 1, s = dim(rng);
    const auto nr = normalize_for_routing(oracle::random_matrix(rng, t, d), oracle::random_matrix(rng, d, s), sc(rng));
    const Matrix logits = routing_logits(nr.tokens, nr.router);
    const Matrix D = dispatch_weights(logits), C = combine_weights(logits);
    for (std::size_t j = 0; j < s; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < t; ++i) {
        CHECK(D(i, j) >= 0.0);
        col += D(i, j);
      }
      CHECK(std::abs(col - 1.0) < 1e-9);
    }
    for (std::size_t i = 0; i < t; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < s; ++j) {
        CHECK(C(i, j) >= 0.0);
        row += C(i, j);
      }
      CHECK(std::abs(row - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("routing normalisation: unit token rows, router columns of norm s") {
  std::mt19937_64 rng(4);
  const auto nr = normalize_for_routing(oracle::random_matrix(rng, 5, 3), oracle::random_matrix(rng, 3, 4), 2.5);
  for (std::size_t r = 0; r < 5; ++r) CHECK(norm2(nr.tokens.row_span(r)) == doctest::Approx(1.0));
  const Matrix rt = nr.router.transposed();
  for (std::size_t c = 0; c < 4; ++c) CHECK(norm2(rt.row_span(c)) == doctest::Approx(2.5));
  // |logit| <= s by Cauchy-Schwarz
  const Matrix logits = routing_logits(nr.tokens, nr.router);
  for (double v : logits.values()) CHECK(std::abs(v) <= 2.5 + 1e-12);
}

TEST_CASE("expert probabilities group slots of the same index") {
  Matrix logits(1, 4);  // 2 experts x 2 slots, columns i*P + p
  logits(0, 0) = 0.0;   // e0 s0
  logits(0, 1) = 5.0;   // e0 s1
  logits(0, 2) = 0.0;   // e1 s0
  logits(0, 3) = -5.0;  // e1 s1
  const Matrix p = expert_probabilities(logits, 2, 2);
  REQUIRE(p.rows() == 2);
  CHECK(p(0, 0) == doctest::Approx(0.5));
  CHECK(p(1, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-10.0))));
}

TEST_CASE("gate fires on high entropy or low KL") {
  const auto flat = uncertainty_metrics(as_row({0.25, 0.25, 0.25, 0.25}));
  const auto peaked = uncertainty_metrics(as_row({0.97, 0.01, 0.01, 0.01}));
  RouterConfig e;
  e.n_experts = 4;
  CHECK(gate(flat, e));
  CHECK_FALSE(gate(peaked, e));
  RouterConfig k = e;
  k.gating_metric = GatingMetric::KlUniform;
  CHECK(gate(flat, k));
  CHECK_FALSE(gate(peaked, k));
  CHECK(e.effective_threshold() == doctest::Approx(0.8 * std::log(4.0)));
  CHECK(k.effective_threshold() == doctest::Approx(0.1));
}

TEST_CASE("zero residual leaves the output bit-identical to shared routing") {
  std::mt19937_64 rng(13);
  RouterConfig r = small_router();
  r.threshold = 1e-9;  // gate always fires
  for (int trial = 0; trial < 20; ++trial) {
    RemindModel model = small_model(100 + trial, r);
    const Dataset ds = sample_dataset(oracle::small_spec(100 + trial, 30));
    for (const Sample& s : ds.samples) {
      ad::Tape t1, t2;
      auto a = model.forward(t1, s, Phase::Stage1SharedOnly);
      auto b = model.forward(t2, s, Phase::Stage2Gated);
      CHECK(b.fusion.gate_fired);
      CHECK(model.fusion().routing().residual(s.mask) != nullptr);
      CHECK(max_abs_diff(a.logits.value(), b.logits.value()) == 0.0);
    }
  }
}

TEST_CASE("stage 1 never consults residuals") {
  RouterConfig r = small_router();
  r.threshold = 1e-9;
  RemindModel model = small_model(3, r);
  const Dataset ds = sample_dataset(oracle::small_spec(3, 5));
  const Sample& s = ds.samples[0];
  model.fusion().routing().ensure_residual(s.mask);
  for (double& v : model.fusion().routing().residual(s.mask)->value.values()) v = 3.0;
  ad::Tape t0;
  const Matrix before = model.forward(t0, s, Phase::Stage1SharedOnly).logits.value();
  model.fusion().routing().residual(s.mask)->value.fill(-7.0);
  ad::Tape t1;
  CHECK(model.forward(t1, s, Phase::Stage1SharedOnly).logits.value() == before);
  ad::Tape t2;
  CHECK(model.forward(t2, s, Phase::Stage2Gated).logits.value() != before);
}

TEST_CASE("full forward gradient matches central differences") {
  for (int cfg = 0; cfg < 5; ++cfg) {
    RouterConfig r = small_router();
    r.threshold = 1e-9;
    r.dispatch_axis = cfg % 2 ? DispatchAxis::Experts : DispatchAxis::Tokens;
    r.slots_per_expert = 1 + cfg % 2;
    r.activation = cfg == 3 ? Activation::Relu : Activation::Gelu;
    RemindModel model = small_model(40 + cfg, r);
    const Dataset ds = sample_dataset(oracle::small_spec(40 + cfg, 20));
    const Sample& s = ds.samples[static_cast<std::size_t>(cfg)];
    model.fusion().routing().ensure_residual(s.mask);
    std::mt19937_64 rng(cfg);
    for (double& v : model.fusion().routing().residual(s.mask)->value.values()) v = 0.3 * std::normal_distribution<>()(rng);

    auto loss_value = [&] {
      ad::Tape t;
      return t.value(model.loss(t, s, Phase::Stage2Gated, LossKind::Focal, 2.0))(0, 0);
    };
    ad::Tape tape;
    tape.backward(model.loss(tape, s, Phase::Stage2Gated, LossKind::Focal, 2.0));
    double worst = 0.0;
    for (ad::Parameter* p : model.parameters(kAll)) {
      if (!tape.bound(*p)) continue;
      const Matrix analytic = p->grad;
      const Matrix numeric = oracle::central_diff(p->value, loss_value, 1e-4);
      for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-6});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
      }
    }
    CAPTURE(cfg);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("focal loss reduces to cross entropy at gamma 0") {
  for (double p : {0.01, 0.3, 0.5, 0.9}) {
    CHECK(focal_loss_value(p, 0.0) == doctest::Approx(-std::log(p)));
    CHECK(focal_loss_value(p, 2.0) == doctest::Approx(-(1 - p) * (1 - p) * std::log(p)));
  }
}

TEST_CASE("model checkpoint round-trips to identical predictions") {
  RouterConfig r = small_router();
  r.threshold = 1e-9;
  RemindModel model = small_model(77, r);
  const Dataset ds = sample_dataset(oracle::small_spec(77, 40));
  for (const Sample& s : ds.samples) {
    ad::Tape t;
    model.forward(t, s, Phase::Stage2Gated);  // creates residuals
  }
  std::stringstream ss;
  write_model(ss, model);
  RemindModel back = read_model(ss);
  CHECK(back.hash() == model.hash());
  for (const Sample& s : ds.samples)
    CHECK(back.predict_proba(s, Phase::Stage2Gated) == model.predict_proba(s, Phase::Stage2Gated));
}

TEST_CASE("prediction never mutates the model") {
  RouterConfig r = small_router();
  r.threshold = 1e-9;
  RemindModel model = small_model(5, r);
  const auto h = model.hash();
  const Dataset ds = sample_dataset(oracle::small_spec(5, 40));
  for (const Sample& s : ds.samples) {
    const auto p = model.predict_proba(s, Phase::Stage2Gated);
    double total = 0.0;
    for (double v : p) total += v;
    CHECK(total == doctest::Approx(1.0));
  }
  CHECK(model.hash() == h);
  CHECK(model.fusion().routing().residuals.empty());
}

TEST_CASE("router config validation") {
  RouterConfig r = small_router();
  CHECK_NOTHROW(r.validate());
  r.n_experts = 0;
  CHECK_THROWS_AS(r.validate(), std::invalid_argument);
  r = small_router();
  r.scale = 0.0;
  CHECK_THROWS_AS(r.validate(), std::invalid_argument);
}
