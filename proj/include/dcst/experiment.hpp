#pragma once

// Experiment configuration and the pipeline stages behind the CLI. Every stage reads the
// same ExperimentConfig, writes its artifacts under `out`, and leaves a JSON manifest that
// is enough to rerun it. Metric files and checkpoints depend only on (config, seed).

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcst/checkpoint.hpp"
#include "dcst/data/csv.hpp"
#include "dcst/data/synth.hpp"
#include "dcst/distill.hpp"
#include "dcst/gradcheck_suite.hpp"
#include "dcst/metrics.hpp"
#include "dcst/model.hpp"
#include "dcst/teacher.hpp"

#ifndef DCST_VERSION
#define DCST_VERSION "unknown"
#endif

namespace dcst::data {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SplitFractions, train, val)
}  // namespace dcst::data

namespace dcst::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "csv"
  data::SynthConfig synthetic;
  std::string speeds;
  std::string sensors;
  std::string adjacency;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, source, synthetic, speeds, sensors, adjacency)

struct WindowConfig {
  std::size_t input_len = 12;
  std::size_t horizon = 12;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(WindowConfig, input_len, horizon)

struct ExperimentConfig {
  DataConfig data;
  data::SplitFractions split;
  WindowConfig window;
  model::DcstConfig dcst;
  teacher::GnnConfig gnn;
  distill::DistillConfig distill;
  model::AblationMode ablation = model::AblationMode::full;
  std::string out = "out";
  std::uint64_t seed = 0;

  void validate() const {
    if (data.source == "synthetic") {
      data.synthetic.validate();
    } else if (data.source == "csv") {
      if (data.speeds.empty() || data.sensors.empty() || data.adjacency.empty()) {
        throw ConfigError("data.source csv needs data.speeds, data.sensors and data.adjacency");
      }
    } else {
      throw ConfigError("data.source must be \"synthetic\" or \"csv\", got \"" + data.source + "\"");
    }
    if (!(split.train > 0.0) || !(split.val > 0.0) || !(split.train + split.val < 1.0)) {
      throw ConfigError("split fractions must satisfy train > 0, val > 0, train + val < 1");
    }
    if (window.input_len == 0 || window.horizon == 0) throw ConfigError("window lengths must be positive");
    if (out.empty()) throw ConfigError("out must name a directory");
    model::for_ablation(dcst, ablation).validate();
    dcst.validate();
    gnn.validate();
    distill.validate();
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, data, split, window, dcst, gnn, distill, ablation,
                                                out, seed)

/// Throws ConfigError naming the first key of `j` that `reference` (a fully populated
/// default) does not have, descending into nested objects.
inline void reject_unknown_keys(const json& j, const json& reference, const std::string& where = "") {
  if (!j.is_object()) return;
  for (const auto& [key, value] : j.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!reference.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (value.is_object() && reference[key].is_object()) reject_unknown_keys(value, reference[key], path);
  }
}

/// Parses and validates a config document. The window lengths are set once under
/// `window`; the model sections inherit them and may only repeat the same values.
inline ExperimentConfig parse_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown_keys(j, json(ExperimentConfig{}));
  // The enum converters map unrecognised strings to the first value; catch those first.
  if (j.contains("ablation")) {
    if (!j["ablation"].is_string()) throw ConfigError("ablation must be a string");
    model::parse_ablation(j["ablation"].get<std::string>());
  }
  if (j.contains("distill") && j["distill"].contains("loss")) {
    const auto& l = j["distill"]["loss"];
    if (l != "mae" && l != "mse") throw ConfigError("distill.loss must be \"mae\" or \"mse\", got " + l.dump());
  }
  ExperimentConfig cfg;
  try {
    cfg = j.get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const char* section : {"dcst", "gnn"}) {
    if (!j.contains(section)) continue;
    for (const char* key : {"input_len", "horizon"}) {
      const std::size_t want = std::string(key) == "input_len" ? cfg.window.input_len : cfg.window.horizon;
      if (j[section].contains(key) && j[section][key].get<std::size_t>() != want) {
        throw ConfigError(std::string(section) + "." + key + " disagrees with window." + key);
      }
    }
  }
  cfg.dcst.input_len = cfg.gnn.input_len = cfg.window.input_len;
  cfg.dcst.horizon = cfg.gnn.horizon = cfg.window.horizon;
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

// Seed streams derived from the run seed. The dataset uses the run seed itself.
inline constexpr std::uint64_t kTeacherInit = 1;
inline constexpr std::uint64_t kTeacherShuffle = 2;
inline constexpr std::uint64_t kStudentInit = 3;
inline constexpr std::uint64_t kStudentShuffle = 4;
inline constexpr std::uint64_t kSweep = 5;

/// Dataset, chronological split and stacked windows for one run.
struct Prepared {
  data::Dataset dataset;
  data::DatasetSplit split;
  distill::PreparedData windows;
  std::optional<data::SynthDescriptor> descriptor;
};

inline Prepared prepare(const ExperimentConfig& cfg) {
  Prepared p;
  if (cfg.data.source == "synthetic") {
    auto r = data::synth_generate(cfg.data.synthetic, cfg.seed);
    p.dataset = std::move(r.dataset);
    p.descriptor = std::move(r.descriptor);
  } else {
    p.dataset = data::load_csv(cfg.data.speeds, cfg.data.sensors, cfg.data.adjacency);
  }
  const auto& m = p.dataset.speeds;
  p.split = data::split(m, cfg.split);
  const auto [t, h] = cfg.window;
  p.windows = {train::make_windows(m, p.split.train, p.split.stats, t, h),
               train::make_windows(m, p.split.val, p.split.stats, t, h),
               train::make_windows(m, p.split.test, p.split.stats, t, h), p.split.stats};
  for (const auto* w : {&p.windows.train, &p.windows.val, &p.windows.test}) {
    if (w->count() == 0) throw ConfigError("a split has no complete window: " + w->warning.value_or("too short"));
  }
  return p;
}

/// Progress sink; the CLI prints to stderr, tests pass nothing.
using Log = std::function<void(const std::string&)>;

inline void say(const Log& log, const std::string& s) {
  if (log) log(s);
}

inline train::EpochCallback epoch_logger(const Log& log, const std::string& what) {
  if (!log) return {};
  return [log, what](const train::EpochRecord& r) {
    log(what + " epoch " + std::to_string(r.epoch) + ": train " + metrics::format_value(r.train_loss) + ", val MAE " +
        metrics::format_value(r.val.mae));
  };
}

inline void write_manifest(const ExperimentConfig& cfg, const std::string& stage,
                           const std::vector<std::string>& outputs) {
  json m;
  m["version"] = DCST_VERSION;
  m["stage"] = stage;
  m["seed"] = cfg.seed;
  m["config"] = cfg;
  m["outputs"] = outputs;
  std::ofstream out(fs::path(cfg.out) / ("manifest_" + stage + ".json"));
  out << m.dump(2) << '\n';
}

inline std::string student_stem(model::AblationMode mode, bool solo) {
  std::string s = solo ? "student_solo" : "student";
  if (mode != model::AblationMode::full) s += "_" + model::to_string(mode);
  return s;
}

inline void write_trace(const fs::path& path, const train::TrainReport& r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  using metrics::format_value;
  out << "epoch,train_loss,soft_loss,hard_loss,val_mae,val_rmse,val_mape,val_soft\n";
  for (const auto& e : r.epochs) {
    out << e.epoch << ',' << format_value(e.train_loss, 6) << ',' << format_value(e.soft_loss, 6) << ','
        << format_value(e.hard_loss, 6) << ',' << format_value(e.val.mae) << ',' << format_value(e.val.rmse) << ','
        << format_value(e.val.mape) << ',' << format_value(e.val_soft, 6) << '\n';
  }
}

struct MetricRow {
  std::string model;
  std::string ablation;
  std::string split;
  metrics::Metrics m;
};

inline void write_metrics(const fs::path& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "model,ablation,split,mae,rmse,mape\n";
  for (const auto& r : rows) {
    out << r.model << ',' << r.ablation << ',' << r.split << ',' << metrics::format_value(r.m.mae) << ','
        << metrics::format_value(r.m.rmse) << ',' << metrics::format_value(r.m.mape) << '\n';
  }
}

inline void throw_if_aborted(const train::TrainReport& r, const std::string& what) {
  if (r.aborted) throw NumericError(what + " diverged: " + *r.aborted);
}

// ---- checkpoints -----------------------------------------------------------------------

inline json teacher_echo(const teacher::GnnModel& m) { return {{"gnn", m.config()}, {"nodes", m.node_count()}}; }

inline json student_echo(const model::DcstModel& m) {
  return {{"dcst", m.base_config()}, {"ablation", m.mode()}, {"nodes", m.node_count()}};
}

inline std::unique_ptr<teacher::GnnModel> load_teacher(const fs::path& path, const data::Dataset& ds) {
  const auto l = checkpoint::read(path);
  if (l.header.kind != checkpoint::ModelKind::teacher) {
    throw CheckpointError(path.string() + ": model kind mismatch: expected a teacher, found a " +
                          checkpoint::to_string(l.header.kind));
  }
  if (l.header.config.value("nodes", std::size_t{0}) != ds.speeds.node_count()) {
    throw CheckpointError(path.string() + ": teacher was trained on a different node count");
  }
  auto m = std::make_unique<teacher::GnnModel>(l.header.config.at("gnn").get<teacher::GnnConfig>(),
                                               ds.graph.adjacency, 0);
  checkpoint::restore(l, checkpoint::ModelKind::teacher, m->parameters());
  return m;
}

inline std::unique_ptr<model::DcstModel> load_student(const fs::path& path, const data::Dataset& ds) {
  const auto l = checkpoint::read(path);
  if (l.header.kind != checkpoint::ModelKind::student) {
    throw CheckpointError(path.string() + ": model kind mismatch: expected a student, found a " +
                          checkpoint::to_string(l.header.kind));
  }
  if (l.header.config.value("nodes", std::size_t{0}) != ds.speeds.node_count()) {
    throw CheckpointError(path.string() + ": student was trained on a different node count");
  }
  auto m = std::make_unique<model::DcstModel>(l.header.config.at("dcst").get<model::DcstConfig>(), ds.sensors, 0,
                                              l.header.config.at("ablation").get<model::AblationMode>());
  checkpoint::restore(l, checkpoint::ModelKind::student, m->parameters());
  return m;
}

// ---- stages ----------------------------------------------------------------------------

inline void ensure_out(const ExperimentConfig& cfg) { fs::create_directories(cfg.out); }

/// Writes the dataset as CSV (loadable with data.source = "csv") plus, for synthetic
/// data, the generator's ground-truth descriptor.
inline void stage_synth(const ExperimentConfig& cfg, const Log& log = {}) {
  ensure_out(cfg);
  const auto p = prepare(cfg);
  const fs::path dir = fs::path(cfg.out) / "data";
  fs::create_directories(dir);
  data::write_speeds(dir / "speeds.csv", p.dataset.speeds, p.dataset.sensors);
  data::write_sensors(dir / "sensors.csv", p.dataset.sensors);
  data::write_adjacency(dir / "adjacency.csv", p.dataset.graph, p.dataset.sensors);
  std::vector<std::string> outputs{"data/speeds.csv", "data/sensors.csv", "data/adjacency.csv"};
  if (p.descriptor) {
    std::ofstream(dir / "descriptor.json") << json(*p.descriptor).dump(2) << '\n';
    outputs.push_back("data/descriptor.json");
  }
  write_manifest(cfg, "synth", outputs);
  say(log, "wrote " + std::to_string(p.dataset.speeds.node_count()) + " sensors x " +
               std::to_string(p.dataset.speeds.steps()) + " steps to " + dir.string());
}

inline train::TrainReport stage_train_teacher(const ExperimentConfig& cfg, const Log& log = {}) {
  ensure_out(cfg);
  const auto p = prepare(cfg);
  teacher::GnnModel m(cfg.gnn, p.dataset.graph.adjacency, derive_seed(cfg.seed, kTeacherInit));
  auto r = teacher::pretrain(m, p.windows.train, p.windows.val, p.windows.stats, derive_seed(cfg.seed, kTeacherShuffle),
                             epoch_logger(log, "teacher"));
  throw_if_aborted(r, "teacher pre-training");
  const fs::path out(cfg.out);
  checkpoint::save(out / "teacher.ckpt", checkpoint::ModelKind::teacher, teacher_echo(m), m.parameters());
  write_trace(out / "teacher_trace.csv", r);
  write_manifest(cfg, "train-teacher", {"teacher.ckpt", "teacher_trace.csv"});
  say(log, "teacher best epoch " + std::to_string(r.best_epoch) + ", val MAE " + metrics::format_value(r.best().val.mae));
  return r;
}

/// Trains one student in the configured ablation mode; `solo` forces α = 0, β = 1.
inline train::TrainReport stage_student(const ExperimentConfig& cfg, bool solo, const Log& log = {}) {
  ensure_out(cfg);
  const auto p = prepare(cfg);
  distill::DistillConfig dc = cfg.distill;
  if (solo) {
    dc.alpha = 0.0;
    dc.beta = 1.0;
  }
  const fs::path out(cfg.out);
  std::unique_ptr<teacher::GnnModel> gnn;
  std::optional<teacher::FrozenTeacher> frozen;
  if (dc.alpha > 0.0) {
    if (!fs::exists(out / "teacher.ckpt")) {
      throw ConfigError("alpha > 0 needs " + (out / "teacher.ckpt").string() + "; run train-teacher first");
    }
    gnn = load_teacher(out / "teacher.ckpt", p.dataset);
    frozen.emplace(*gnn);
  }
  model::DcstModel s(cfg.dcst, p.dataset.sensors, derive_seed(cfg.seed, kStudentInit), cfg.ablation);
  const std::string stem = student_stem(cfg.ablation, solo);
  auto r = distill::train_student(s, frozen ? &*frozen : nullptr, p.windows, dc, derive_seed(cfg.seed, kStudentShuffle),
                                  epoch_logger(log, stem));
  throw_if_aborted(r, stem + " training");
  if (frozen && !frozen->unchanged()) throw NumericError("teacher parameters changed during distillation");
  checkpoint::save(out / (stem + ".ckpt"), checkpoint::ModelKind::student, student_echo(s), s.parameters());
  write_trace(out / (stem + "_trace.csv"), r);
  write_manifest(cfg, solo ? "train-student-solo" : "distill", {stem + ".ckpt", stem + "_trace.csv"});
  say(log, stem + " best epoch " + std::to_string(r.best_epoch) + ", val MAE " + metrics::format_value(r.best().val.mae));
  return r;
}

/// Scores HA and every checkpoint present for the configured ablation on val and test.
inline std::vector<MetricRow> stage_eval(const ExperimentConfig& cfg, const Log& log = {}) {
  ensure_out(cfg);
  const auto p = prepare(cfg);
  const fs::path out(cfg.out);
  const auto [t, h] = cfg.window;
  const std::string mode = model::to_string(cfg.ablation);
  std::vector<MetricRow> rows;
  metrics::HistoricalAverage ha(p.dataset.speeds, p.split.train);
  rows.push_back({"ha", "none", "val", ha.evaluate(p.split.val, t, h)});
  rows.push_back({"ha", "none", "test", ha.evaluate(p.split.test, t, h)});
  auto score = [&](const std::string& name, const std::string& ablation, const train::ForwardFn& f) {
    rows.push_back({name, ablation, "val", distill::evaluate(f, p.windows.val, p.windows.stats)});
    rows.push_back({name, ablation, "test", distill::evaluate(f, p.windows.test, p.windows.stats)});
  };
  if (fs::exists(out / "teacher.ckpt")) {
    auto g = load_teacher(out / "teacher.ckpt", p.dataset);
    score("teacher", "none", [&](Var x) { return g->forward(x); });
  }
  for (bool solo : {false, true}) {
    const fs::path ck = out / (student_stem(cfg.ablation, solo) + ".ckpt");
    if (!fs::exists(ck)) continue;
    auto s = load_student(ck, p.dataset);
    score(solo ? "dcst_solo" : "dcst_kd", mode, [&](Var x) { return s->forward(x); });
  }
  const std::string file = cfg.ablation == model::AblationMode::full ? "metrics.csv" : "metrics_" + mode + ".csv";
  write_metrics(out / file, rows);
  write_manifest(cfg, cfg.ablation == model::AblationMode::full ? "eval" : "eval_" + mode, {file});
  for (const auto& r : rows) {
    say(log, r.model + " [" + r.ablation + "] " + r.split + ": MAE " + metrics::format_value(r.m.mae, 2) + "  RMSE " +
                 metrics::format_value(r.m.rmse, 2) + "  MAPE " + metrics::format_value(r.m.mape, 2) + "%");
  }
  return rows;
}

inline std::vector<distill::SweepEntry> stage_sweep(const ExperimentConfig& cfg, const Log& log = {}) {
  ensure_out(cfg);
  const auto p = prepare(cfg);
  const fs::path out(cfg.out);
  if (!fs::exists(out / "teacher.ckpt")) {
    throw ConfigError("sweep needs " + (out / "teacher.ckpt").string() + "; run train-teacher first");
  }
  auto gnn = load_teacher(out / "teacher.ckpt", p.dataset);
  auto frozen = teacher::freeze(*gnn);
  auto entries = distill::sweep(
      [&](std::uint64_t s) { return std::make_unique<model::DcstModel>(cfg.dcst, p.dataset.sensors, s, cfg.ablation); },
      frozen, p.windows, cfg.distill, derive_seed(cfg.seed, kSweep));
  for (const auto& e : entries) {
    throw_if_aborted(e.report, "sweep entry alpha=" + metrics::format_value(e.alpha, 1));
    say(log, "alpha " + metrics::format_value(e.alpha, 1) + " beta " + metrics::format_value(e.beta, 1) + ": val MAE " +
                 metrics::format_value(e.val.mae) + ", test MAE " + metrics::format_value(e.test.mae));
  }
  distill::write_sweep_csv((out / "sweep.csv").string(), entries);
  write_manifest(cfg, "sweep", {"sweep.csv"});
  return entries;
}

/// Trains the student in every ablation mode with the configured distillation weights
/// and tabulates their val/test metrics.
inline std::vector<MetricRow> stage_ablate(const ExperimentConfig& cfg, const Log& log = {}) {
  std::vector<MetricRow> rows;
  std::vector<std::string> outputs;
  const auto p = prepare(cfg);
  const bool solo = cfg.distill.alpha == 0.0;
  for (auto mode : {model::AblationMode::full, model::AblationMode::no_spatial, model::AblationMode::no_temporal,
                    model::AblationMode::single_scale}) {
    ExperimentConfig c = cfg;
    c.ablation = mode;
    stage_student(c, solo, log);
    const std::string stem = student_stem(mode, solo);
    auto s = load_student(fs::path(cfg.out) / (stem + ".ckpt"), p.dataset);
    auto f = [&](Var x) { return s->forward(x); };
    const std::string name = solo ? "dcst_solo" : "dcst_kd";
    rows.push_back({name, model::to_string(mode), "val", distill::evaluate(f, p.windows.val, p.windows.stats)});
    rows.push_back({name, model::to_string(mode), "test", distill::evaluate(f, p.windows.test, p.windows.stats)});
    outputs.push_back(stem + ".ckpt");
  }
  write_metrics(fs::path(cfg.out) / "ablation.csv", rows);
  outputs.push_back("ablation.csv");
  write_manifest(cfg, "ablate", outputs);
  return rows;
}

inline std::vector<gradcheck::CaseResult> stage_grad_check(const ExperimentConfig& cfg, int seeds = 20,
                                                           const Log& log = {}) {
  ensure_out(cfg);
  std::vector<gradcheck::CaseResult> results;
  std::ofstream out(fs::path(cfg.out) / "grad_check.csv");
  out << "case,seeds,max_rel_error,threshold,worst_parameter,pass\n";
  for (const auto& c : gradcheck::standard_cases()) {
    auto r = gradcheck::run_case(c, seeds);
    char err[32];
    std::snprintf(err, sizeof(err), "%.3e", r.worst.max_rel_error);
    out << r.name << ',' << r.seeds << ',' << err << ',' << r.threshold << ',' << r.worst.worst_parameter << ','
        << (r.passed() ? "yes" : "no") << '\n';
    say(log, r.name + ": max rel error " + err + (r.passed() ? " ok" : " FAILED"));
    results.push_back(std::move(r));
  }
  write_manifest(cfg, "grad-check", {"grad_check.csv"});
  return results;
}

}  // namespace dcst::experiment
