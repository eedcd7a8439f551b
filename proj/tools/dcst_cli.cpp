// Command-line front end. Exit codes: 0 success, 1 configuration error, 2 runtime or
// numeric failure.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dcst/experiment.hpp"

namespace {

using namespace dcst;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string ablation;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "experiment config (JSON); defaults apply when omitted");
  cmd->add_option("--seed", f.seed, "run seed, overrides the config");
  cmd->add_option("--out", f.out, "output directory, overrides the config");
  cmd->add_option("--ablation", f.ablation, "full, no_spatial, no_temporal or single_scale")
      ->check(CLI::IsMember({"full", "no_spatial", "no_temporal", "single_scale"}));
}

experiment::ExperimentConfig resolve(const CommonFlags& f) {
  auto cfg = f.config.empty() ? experiment::parse_config(nlohmann::json::object()) : experiment::load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.out = f.out;
  if (!f.ablation.empty()) cfg.ablation = model::parse_ablation(f.ablation);
  cfg.validate();
  return cfg;
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual cross-scale transformer forecaster with GNN-teacher distillation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DCST_VERSION);

  CommonFlags flags;
  int gc_seeds = 20;
  auto* synth = app.add_subcommand("synth", "generate the synthetic dataset and write it as CSV");
  auto* teacher = app.add_subcommand("train-teacher", "pre-train the GNN teacher");
  auto* distill = app.add_subcommand("distill", "train the student against the frozen teacher");
  auto* solo = app.add_subcommand("train-student-solo", "train the student on ground truth only (alpha=0, beta=1)");
  auto* eval = app.add_subcommand("eval", "score HA and saved checkpoints on validation and test");
  auto* sweep = app.add_subcommand("sweep", "distill with the five (alpha, beta) pairs");
  auto* ablate = app.add_subcommand("ablate", "train the student in every ablation mode");
  auto* gc = app.add_subcommand("grad-check", "finite-difference checks of every differentiable op");
  for (auto* c : {synth, teacher, distill, solo, eval, sweep, ablate, gc}) add_common(c, flags);
  gc->add_option("--seeds", gc_seeds, "random instances per case")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    const auto cfg = resolve(flags);
    if (synth->parsed()) {
      experiment::stage_synth(cfg, log_line);
    } else if (teacher->parsed()) {
      experiment::stage_train_teacher(cfg, log_line);
    } else if (distill->parsed()) {
      experiment::stage_student(cfg, false, log_line);
    } else if (solo->parsed()) {
      experiment::stage_student(cfg, true, log_line);
    } else if (eval->parsed()) {
      experiment::stage_eval(cfg, log_line);
    } else if (sweep->parsed()) {
      experiment::stage_sweep(cfg, log_line);
    } else if (ablate->parsed()) {
      for (const auto& r : experiment::stage_ablate(cfg, log_line)) {
        log_line(r.ablation + " " + r.split + ": MAE " + metrics::format_value(r.m.mae, 2));
      }
    } else if (gc->parsed()) {
      bool ok = true;
      for (const auto& r : experiment::stage_grad_check(cfg, gc_seeds, log_line)) ok = ok && r.passed();
      if (!ok) {
        std::cerr << "error: gradient check failed\n";
        return 2;
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
