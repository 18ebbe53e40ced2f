#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "remind/experiment.hpp"

using namespace remind;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("remind_unit_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("default config: one head group above half the mass") {
  const auto c = default_config();
  CHECK_NOTHROW(c.validate());
  const auto d = group_distribution(c.dataset.missing_prob);
  CHECK(d.back() >= 0.55);
  int small = 0;
  for (double v : d) small += v <= 0.05;
  CHECK(small >= 2);
}

TEST_CASE("empty config and empty sections give defaults") {
  CHECK(dump_config(parse_config("")) == dump_config(default_config()));
  CHECK(dump_config(parse_config("dataset:\ntrain:\n")) == dump_config(default_config()));
}

TEST_CASE("dump and parse round-trip") {
  const std::string yaml =
      "seed: 4\n"
      "dataset:\n  n_samples: 321\n  test_fraction: 0.25\n  concept_shift:\n    label_noise: 0.05\n"
      "router:\n  n_experts: 6\n  threshold: 1.2\n  gating_metric: entropy\n"
      "train:\n  mode: dro-only-ablation\n  gamma: 0.1\n  max_steps: 50\n  sampler: group-balanced\n"
      "analysis:\n  whole_direction: empirical\n  top_k: 2\n"
      "protocol:\n  unseen_mc:\n    heldout: M1+M3\n    scopes: [nothing, head]\n"
      "sweep:\n  modes: [remind, shared-moe-ablation]\n";
  const auto c = parse_config(yaml);
  CHECK(c.seed == 4);
  CHECK(c.dataset.n_samples == 321);
  CHECK(c.router.n_experts == 6);
  CHECK(*c.router.threshold == 1.2);
  CHECK(c.train.mode == TrainMode::DroOnly);
  CHECK(c.train.sampler == Sampler::GroupBalanced);
  CHECK(c.analysis.whole == WholeDirection::Empirical);
  CHECK(*c.unseen.heldout == 5u);
  CHECK(c.unseen.scopes.size() == 2);
  CHECK(c.sweep_modes.size() == 2);
  const std::string dumped = dump_config(c);
  CHECK(dump_config(parse_config(dumped)) == dumped);
}

TEST_CASE("strict keys and types") {
  auto message = [](const std::string& yaml) {
    try {
      parse_config(yaml);
    } catch (const std::invalid_argument& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("train:\n  lerning_rate: 0.1\n").find("train.lerning_rate") != std::string::npos);
  CHECK(message("colour: red\n").find("colour") != std::string::npos);
  CHECK(message("train:\n  max_steps: many\n").find("train.max_steps") != std::string::npos);
  CHECK(message("train:\n  mode: fancy\n").find("train.mode") != std::string::npos);
  CHECK_FALSE(message("dataset:\n  modalities: 0\n").empty());
  CHECK_FALSE(message("protocol:\n  extreme_missingness:\n    rate: 1.0\n").empty());
  CHECK_FALSE(message("router:\n  embed_dim: 5\n").empty());
  CHECK_FALSE(message("seed: [1\n").empty());
}

TEST_CASE("with_seed applies to data, training and the run") {
  const auto c = with_seed(default_config(), 42);
  CHECK(c.seed == 42);
  CHECK(c.dataset.seed == 42);
  CHECK(c.train.seed == 42);
}

TEST_CASE("GC summary: medians over the trailing window") {
  // bitmask 0 is the whole set; groups 0 head, 1 and 2 tail; checkpoints 0, 10, 20, 30
  const std::vector<double> freq{0.8, 0.1, 0.1};
  std::vector<ConsistencyRecord> recs;
  auto add = [&](int step, std::uint32_t bits, double gc) { recs.push_back({step, bits, gc, true, 8, {}}); };
  for (int step : {0, 10, 20, 30}) {
    add(step, 0, 1.0);
    add(step, 1, step == 30 ? 0.9 : 0.0);
    add(step, 2, step >= 20 ? 0.2 : 0.9);
    add(step, 3, step >= 20 ? 0.4 : 0.9);
  }
  const auto s = summarize_gc(recs, freq, 0.15, 0.5);
  CHECK(s.window_steps == std::vector<int>{20, 30});
  CHECK(s.head_group == 0);
  CHECK(s.defined);
  CHECK(s.head_median == doctest::Approx(0.45));  // {0.0, 0.9}
  CHECK(s.tail_median == doctest::Approx(0.3));   // {0.2, 0.4, 0.2, 0.4}
  CHECK(s.head_values == 2);
  CHECK(s.tail_values == 4);
  const auto last = summarize_gc(recs, freq, 0.15, 0.25);
  CHECK(last.window_steps == std::vector<int>{30});
}

TEST_CASE("sweep table: one row per group plus the entire set, one column per mode") {
  GroupMetrics a, b;
  a.groups[0] = {10, 0.5, 0.4, false};
  a.groups[2] = {10, 1.0, 1.0, false};
  a.overall = {20, 0.75, 0.7, false};
  b.groups[0] = {10, 0.7, 0.6, false};
  b.overall = {20, 0.85, 0.8, false};
  const std::vector<SweepRow> rows{{TrainMode::Remind, 1, a}, {TrainMode::Remind, 2, b}};
  const std::vector<TrainMode> modes{TrainMode::Remind, TrainMode::SharedMoe};
  std::ostringstream mean, sd;
  write_sweep_table(mean, rows, modes, 2, "accuracy", false);
  write_sweep_table(sd, rows, modes, 2, "accuracy", true);
  CHECK(mean.str() ==
        "M1,M2,remind,shared-moe-ablation\n"
        "1,0,0.6,\n"
        "0,1,,\n"
        "1,1,1,\n"
        "Entire Dataset,,0.8,\n");
  std::istringstream in(sd.str());
  std::string line;
  std::getline(in, line);
  std::getline(in, line);
  CHECK(line.rfind("1,0,0.1414213562373", 0) == 0);
  CHECK_THROWS_AS(write_sweep_table(mean, rows, modes, 2, "loss", false), std::invalid_argument);
}

TEST_CASE("checkpoint names sort by step") {
  CHECK(checkpoint_name(0) == "step_0000000.ckpt");
  CHECK(checkpoint_name(1200) == "step_0001200.ckpt");
  CHECK(checkpoint_name(9) < checkpoint_name(10));
}

TEST_CASE("generate is deterministic and validation leaves nothing behind") {
  auto cfg = default_config();
  cfg.dataset.n_samples = 300;
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  run_generate(cfg, a);
  run_generate(cfg, b);
  for (const char* f : {files::kDataset, files::kHistogram, files::kConfig}) CHECK(slurp(a / f) == slurp(b / f));

  const fs::path bad = scratch("gen_bad");
  cfg.dataset.modalities = 0;
  CHECK_THROWS_AS(run_generate(cfg, bad), std::invalid_argument);
  CHECK_FALSE(fs::exists(bad));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("train with zero steps writes only the initial checkpoint") {
  auto cfg = default_config();
  cfg.dataset.n_samples = 200;
  cfg.train.max_steps = 0;
  const fs::path out = scratch("train_zero");
  run_generate(cfg, out);
  const auto r = run_train(cfg, out);
  CHECK(r.final_step == 0);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(out / files::kCheckpoints)) names.push_back(e.path().filename().string());
  CHECK(names == std::vector<std::string>{"step_0000000.ckpt"});
  fs::remove_all(out);
}

TEST_CASE("train refuses a router that does not fit the dataset") {
  auto cfg = default_config();
  cfg.dataset.n_samples = 200;
  const fs::path out = scratch("train_mismatch");
  run_generate(cfg, out);
  auto other = cfg;
  other.dataset.embed_dim = 6;
  other.router.embed_dim = 6;
  CHECK_THROWS_AS(run_train(other, out), std::invalid_argument);
  CHECK_FALSE(fs::exists(out / files::kCheckpoints));
  fs::remove_all(out);
}
