#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "remind/drotrain.hpp"

using namespace remind;

namespace {

RemindModel model_for(const Dataset& ds, std::uint64_t seed) {
  RouterConfig r;
  r.embed_dim = ds.spec.embed_dim;
  r.n_experts = 3;
  r.expert_hidden = 6;
  return RemindModel(ModelConfig::from_spec(ds.spec, r, seed));
}

TrainConfig quick(TrainMode mode, int steps = 40) {
  TrainConfig c;
  c.mode = mode;
  c.max_steps = steps;
  c.batch_size = 8;
  c.optimizer = {OptimizerKind::AdamW, 0.01};
  c.gamma = 0.5;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("lambda update: two groups, gamma ln 2") {
  const auto out = update_lambda({{0.5, 0.5}}, {{0, 1.0}, {1, 0.0}}, std::log(2.0));
  CHECK(std::abs(out.lambda[0] - 2.0 / 3.0) < 1e-12);
  CHECK(std::abs(out.lambda[1] - 1.0 / 3.0) < 1e-12);
}

TEST_CASE("lambda stays on the simplex over a long random run") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> loss(0.0, 5.0);
  std::bernoulli_distribution present(0.6);
  GroupWeights w = GroupWeights::uniform(7);
  for (int t = 0; t < 1000; ++t) {
    GroupValues r;
    for (int g = 0; g < 7; ++g)
      if (present(rng)) r[g] = loss(rng);
    w = update_lambda(w, r, 0.3);
    double s = 0.0;
    for (double v : w.lambda) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  CHECK(w.is_simplex());
}

TEST_CASE("repeated updates concentrate on the worst group") {
  GroupWeights w = GroupWeights::uniform(4);
  const GroupValues r{{0, 0.3}, {1, 0.9}, {2, 0.5}, {3, 0.1}};
  int it = 0;
  while (w.lambda[1] <= 1.0 - 1e-6 && it < 10000) {
    w = update_lambda(w, r, 1.0);
    ++it;
  }
  CHECK(w.lambda[1] > 1.0 - 1e-6);
  CHECK(it < 10000);
}

TEST_CASE("absent groups keep a factor of one") {
  // Oracle: lambda_k exp(gamma R_k) renormalised, R = 0 for the absent group.
  const GroupWeights w{{0.2, 0.3, 0.5}};
  const auto out = update_lambda(w, {{0, 2.0}, {2, 1.0}}, 0.7);
  const double a = 0.2 * std::exp(1.4), b = 0.3, c = 0.5 * std::exp(0.7), z = a + b + c;
  CHECK(out.lambda[0] == doctest::Approx(a / z).epsilon(1e-14));
  CHECK(out.lambda[1] == doctest::Approx(b / z).epsilon(1e-14));
  CHECK(out.lambda[2] == doctest::Approx(c / z).epsilon(1e-14));
}

TEST_CASE("huge gamma * R does not overflow") {
  const auto out = update_lambda({{0.5, 0.5}}, {{0, 1e6}, {1, 0.0}}, 10.0);
  CHECK(out.lambda[0] == 1.0);
  CHECK(out.lambda[1] == 0.0);
  CHECK(out.is_simplex());
}

TEST_CASE("non-positive gamma is rejected") {
  CHECK_THROWS_AS(update_lambda(GroupWeights::uniform(2), {}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(update_lambda(GroupWeights::uniform(2), {}, -1.0), std::invalid_argument);
}

TEST_CASE("group means") {
  const std::vector<double> l{1.0, 3.0, 2.0, 10.0};
  const std::vector<int> g{4, 4, 1, 4};
  const auto m = group_means(l, g);
  CHECK(m.size() == 2);
  CHECK(m.at(4) == doctest::Approx(14.0 / 3.0));
  CHECK(m.at(1) == 2.0);
}

TEST_CASE("dro step weights groups by renormalised lambda over present groups") {
  // Linear per-sample loss theta . x_i gives gradient sum_i w_i x_i.
  std::mt19937_64 rng(6);
  const std::vector<int> ids{0, 2, 2, 0, 2};
  std::vector<Matrix> xs;
  for (std::size_t i = 0; i < ids.size(); ++i) xs.push_back(oracle::random_matrix(rng, 1, 3));
  const GroupWeights lambda{{0.1, 0.6, 0.3}};  // group 1 absent from the batch

  for (bool dro : {true, false}) {
    ad::Parameter theta("theta", Matrix(1, 3, 0.0));
    Optimizer sgd({OptimizerKind::Sgd, 1.0});
    auto loss_of = [&](ad::Tape& t, std::size_t i) { return ad::sum(ad::mul(t.param(theta), t.constant(xs[i]))); };
    ParamProvider params = [&] { return std::vector<ad::Parameter*>{&theta}; };
    const auto out = dro_step(loss_of, ids, dro ? &lambda : nullptr, sgd, params);
    CHECK_FALSE(out.aborted);

    Matrix expected(1, 3);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double w = 1.0 / 5.0;
      if (dro) {
        const double lk = ids[i] == 0 ? 0.1 / 0.4 : 0.3 / 0.4;
        w = lk / (ids[i] == 0 ? 2.0 : 3.0);
      }
      for (std::size_t c = 0; c < 3; ++c) expected(0, c) -= w * xs[i](0, c);
    }
    CHECK(max_abs_diff(theta.value, expected) < 1e-12);
  }
}

TEST_CASE("non-finite loss aborts the step and leaves parameters untouched") {
  ad::Parameter x("x", Matrix(1, 1, 0.0));
  Optimizer opt({OptimizerKind::Sgd, 0.1});
  auto loss_of = [&](ad::Tape& t, std::size_t) { return ad::sum(ad::log(t.param(x))); };
  ParamProvider params = [&] { return std::vector<ad::Parameter*>{&x}; };
  const std::vector<int> ids{0};
  const auto out = dro_step(loss_of, ids, nullptr, opt, params);
  CHECK(out.aborted);
  CHECK_FALSE(out.diagnostic.empty());
  CHECK(x.value(0, 0) == 0.0);
}

TEST_CASE("resolved defaults and schedule validation") {
  TrainConfig c;
  c.max_steps = 200;
  const auto r = c.resolved();
  CHECK(r.warmup_steps == 20);
  CHECK(r.stage2_start == 20);
  CHECK(r.checkpoint_every == 20);
  c.warmup_steps = 50;
  c.stage2_start = 10;
  CHECK_THROWS_AS(c.resolved(), std::invalid_argument);
  c = TrainConfig{};
  c.gamma = 0.0;
  CHECK_THROWS_AS(c.resolved(), std::invalid_argument);
}

TEST_CASE("batches depend only on seed and step") {
  const Dataset ds = sample_dataset(oracle::small_spec(2, 200));
  RemindModel m1 = model_for(ds, 1), m2 = model_for(ds, 1);
  TrainConfig c = quick(TrainMode::Remind);
  Trainer a(m1, ds, c), b(m2, ds, c);
  a.step();
  a.step();
  CHECK(a.batch_indices(7) == b.batch_indices(7));
  c.seed = 4;
  Trainer other(m2, ds, c);
  CHECK(other.batch_indices(7) != b.batch_indices(7));
}

TEST_CASE("encoders freeze after warmup and residuals appear only in residual modes") {
  const Dataset ds = sample_dataset(oracle::small_spec(8, 300));
  for (TrainMode mode : {TrainMode::Remind, TrainMode::SharedMoe, TrainMode::DroOnly, TrainMode::NoDro}) {
    RemindModel model = model_for(ds, 2);
    model.fusion().config().threshold = 1e-9;  // make the gate fire
    TrainConfig c = quick(mode, 30);
    c.warmup_steps = 10;
    Trainer tr(model, ds, c);
    for (int i = 0; i < 10; ++i) tr.step();
    std::vector<Matrix> enc;
    for (auto* p : model.parameters(kEncoders)) enc.push_back(p->value);
    while (!tr.done()) tr.step();
    std::size_t k = 0;
    for (auto* p : model.parameters(kEncoders)) CHECK(p->value == enc[k++]);
    CAPTURE(to_string(mode));
    CHECK(model.fusion().routing().residuals.empty() == !uses_residuals(mode));
    if (!uses_dro(mode)) {
      CHECK(tr.state().lambda.lambda == GroupWeights::uniform(tr.state().lambda.lambda.size()).lambda);
    }
  }
}

TEST_CASE("warmup keeps lambda uniform, DRO moves it afterwards") {
  const Dataset ds = sample_dataset(oracle::small_spec(5, 300));
  RemindModel model = model_for(ds, 5);
  TrainConfig c = quick(TrainMode::DroOnly, 30);
  c.warmup_steps = 10;
  Trainer tr(model, ds, c);
  const auto uniform = tr.state().lambda.lambda;
  for (int i = 0; i < 10; ++i) CHECK(tr.step().lambda == uniform);
  auto rec = tr.step();
  CHECK(rec.lambda != uniform);
  GroupWeights w{rec.lambda};
  CHECK(w.is_simplex(1e-12));
}

TEST_CASE("identical seeds give identical models") {
  const Dataset ds = sample_dataset(oracle::small_spec(9, 300));
  RemindModel a = model_for(ds, 9), b = model_for(ds, 9);
  train(ds, a, quick(TrainMode::Remind));
  train(ds, b, quick(TrainMode::Remind));
  CHECK(a.hash() == b.hash());
}

TEST_CASE("an interrupted run resumes to the uninterrupted final state") {
  const Dataset ds = sample_dataset(oracle::small_spec(10, 300));
  TrainConfig c = quick(TrainMode::Remind, 50);
  c.refresh_period = 3;  // exercise the window state across the break
  RemindModel straight = model_for(ds, 10);
  const auto full = train(ds, straight, c);

  RemindModel first = model_for(ds, 10);
  std::string saved;
  TrainHooks stop;
  stop.stop_after = 23;
  {
    Trainer tr(first, ds, c);
    run_trainer(tr, stop);
    std::ostringstream os;
    tr.save(os);
    saved = os.str();
  }
  std::istringstream is(saved);
  TrainCheckpoint ck = load_training_checkpoint(is);
  REQUIRE(ck.has_state);
  CHECK(ck.state.step == 23);
  RemindModel resumed = std::move(ck.model);
  Trainer tr(resumed, ds, c);
  restore_trainer(tr, ck);
  const auto rest = run_trainer(tr, {});
  CHECK(resumed.hash() == straight.hash());
  CHECK(rest.records.back().lambda == full.records.back().lambda);
}

TEST_CASE("checkpoint hook cadence includes step 0 and the final step") {
  const Dataset ds = sample_dataset(oracle::small_spec(11, 200));
  RemindModel model = model_for(ds, 11);
  TrainConfig c = quick(TrainMode::SharedMoe, 25);
  c.checkpoint_every = 10;
  std::vector<int> steps;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](int s, Trainer&) { steps.push_back(s); };
  train(ds, model, c, hooks);
  CHECK(steps == std::vector<int>{0, 10, 20, 25});

  RemindModel none = model_for(ds, 11);
  c.max_steps = 0;
  steps.clear();
  train(ds, none, c, hooks);
  CHECK(steps == std::vector<int>{0});
}

TEST_CASE("history csv layout") {
  StepRecord rec;
  rec.step = 4;
  rec.stage = 1;
  rec.lambda = {0.25, 0.75};
  rec.group_loss = {{1, 0.5}};
  std::ostringstream os;
  write_history_header(os);
  const std::vector<int> groups{0, 1};
  write_history_rows(os, rec, groups);
  CHECK(os.str() == "step,group_id,loss,lambda,stage,gate_rate,aborted\n4,0,,0.25,1,,0\n4,1,0.5,0.75,1,,0\n");
}
