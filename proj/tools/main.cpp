#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>

#include <CLI11.hpp>
#include <yaml-cpp/exceptions.h>

#include "remind/experiment.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "YAML experiment config (defaults apply when omitted)");
  sub->add_option("--seed", c.seed, "run seed; overrides the config");
  sub->add_option("--out", c.out, "output directory")->capture_default_str();
}

remind::ExperimentConfig resolve(const Common& c, bool sweep = false) {
  remind::ExperimentConfig cfg = c.config.empty() ? remind::default_config() : remind::load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    if (sweep) cfg.seeds = {*c.seed};
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal long-tailed missingness lab: data, training, analysis and protocols"};
  app.require_subcommand(1);

  Common gen, tr, an, pr, sw;
  auto* g = app.add_subcommand("generate", "sample the synthetic dataset and its group histogram");
  add_common(g, gen);

  auto* t = app.add_subcommand("train", "train on the generated dataset, writing checkpoints and history");
  add_common(t, tr);
  bool resume = false;
  int stop_after = -1;
  t->add_flag("--resume", resume, "continue from the last checkpoint in <out>/checkpoints");
  t->add_option("--stop-after", stop_after, "stop once this many steps are done (simulates an interruption)");

  auto* a = app.add_subcommand("analyze", "gradient consistency over checkpoints and expert specialization");
  add_common(a, an);

  auto* p = app.add_subcommand("protocol", "run an evaluation protocol");
  add_common(p, pr);
  std::string protocol;
  p->add_option("name", protocol, "extreme-missingness | unseen-mc")->required();

  auto* s = app.add_subcommand("sweep", "train every sweep mode over the seed list and emit mean/std tables");
  add_common(s, sw);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  try {
    if (g->parsed()) {
      remind::run_generate(resolve(gen), gen.out);
      std::cout << "dataset written to " << gen.out << "\n";
    } else if (t->parsed()) {
      const auto r = remind::run_train(resolve(tr), tr.out, {resume, stop_after});
      std::cout << "trained to step " << r.final_step;
      if (r.resumed) std::cout << " (resumed from " << r.resumed_from << ")";
      std::cout << "\n";
    } else if (a->parsed()) {
      const auto summary = remind::run_analyze(resolve(an), an.out);
      if (summary.defined)
        std::cout << "median GC head " << summary.head_median << " tail " << summary.tail_median << "\n";
      else
        std::cout << "median GC undefined (no head or tail values in window)\n";
    } else if (p->parsed()) {
      remind::run_protocol(resolve(pr), protocol, pr.out);
      std::cout << protocol << " written to " << pr.out << "\n";
    } else if (s->parsed()) {
      const auto rows = remind::run_sweep(resolve(sw, true), sw.out);
      std::cout << rows.size() << " runs written to " << sw.out << "\n";
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const YAML::Exception& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
