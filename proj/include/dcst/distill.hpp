#pragma once

// Student training against a frozen teacher and the five-point α/β sweep.

#include <array>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcst/model.hpp"
#include "dcst/teacher.hpp"
#include "dcst/training.hpp"

namespace dcst::distill {

using train::distill_loss;
using train::LossKind;

struct DistillConfig {
  double alpha = 0.5;
  double beta = 0.5;
  double lr = 1e-3;
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  std::size_t patience = 10;
  LossKind loss = LossKind::mae;

  void validate() const { to_fit(0).validate(); }

  train::FitConfig to_fit(std::uint64_t seed) const {
    train::FitConfig f;
    f.epochs = epochs;
    f.batch_size = batch_size;
    f.lr = lr;
    f.patience = patience;
    f.seed = seed;
    f.alpha = alpha;
    f.beta = beta;
    f.loss = loss;
    return f;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DistillConfig, alpha, beta, lr, epochs, batch_size, patience, loss)

/// Windows of all three splits plus the statistics they were normalised with.
struct PreparedData {
  train::WindowTensors train;
  train::WindowTensors val;
  train::WindowTensors test;
  data::NormStats stats;
};

/// Trains `student` on distill_loss. The teacher only supplies constants; its parameters
/// are never put on a gradient tape or handed to the optimizer.
inline train::TrainReport train_student(model::DcstModel& student, const teacher::FrozenTeacher* frozen,
                                        const PreparedData& d, const DistillConfig& cfg, std::uint64_t seed,
                                        const train::EpochCallback& on_epoch = {}) {
  cfg.validate();
  auto fit_cfg = cfg.to_fit(seed);
  fit_cfg.on_epoch = on_epoch;
  auto forward = [&](Var x) { return student.forward(x); };
  if (cfg.alpha > 0.0) {
    if (!frozen) throw ConfigError("alpha > 0 requires a frozen teacher");
    train::SoftTargets soft{frozen->predict_all(d.train.inputs), frozen->predict_all(d.val.inputs)};
    return train::fit(student.parameters(), forward, d.train, d.val, d.stats, fit_cfg, &soft);
  }
  return train::fit(student.parameters(), forward, d.train, d.val, d.stats, fit_cfg);
}

/// Denormalised metrics of a model over a prepared split.
inline metrics::Metrics evaluate(const train::ForwardFn& forward, const train::WindowTensors& w,
                                 data::NormStats stats) {
  return metrics::compute_metrics(train::predict_all(forward, w.inputs, 64), w.targets, stats);
}

inline constexpr std::array<std::pair<double, double>, 5> kSweepPairs{
    {{0.1, 0.9}, {0.3, 0.7}, {0.5, 0.5}, {0.7, 0.3}, {0.9, 0.1}}};

struct SweepEntry {
  double alpha = 0.0;
  double beta = 0.0;
  train::TrainReport report;
  metrics::Metrics val;
  metrics::Metrics test;
};

using StudentFactory = std::function<std::unique_ptr<model::DcstModel>(std::uint64_t seed)>;

/// One fresh student per (α, β) pair, each initialised from a seed derived from the base
/// seed and the pair index; all share the same data and teacher.
inline std::vector<SweepEntry> sweep(const StudentFactory& make_student, const teacher::FrozenTeacher& frozen,
                                     const PreparedData& d, DistillConfig base, std::uint64_t seed) {
  std::vector<SweepEntry> out;
  for (std::size_t k = 0; k < kSweepPairs.size(); ++k) {
    base.alpha = kSweepPairs[k].first;
    base.beta = kSweepPairs[k].second;
    const std::uint64_t s = derive_seed(seed, k);
    auto student = make_student(s);
    SweepEntry e{base.alpha, base.beta, train_student(*student, &frozen, d, base, s), {}, {}};
    auto fwd = [&](Var x) { return student->forward(x); };
    e.val = evaluate(fwd, d.val, d.stats);
    e.test = evaluate(fwd, d.test, d.stats);
    out.push_back(std::move(e));
  }
  return out;
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "alpha,beta,val_mae,val_rmse,val_mape,test_mae,test_rmse,test_mape\n";
  for (const auto& e : entries) {
    using metrics::format_value;
    out << format_value(e.alpha, 1) << ',' << format_value(e.beta, 1) << ',' << format_value(e.val.mae) << ','
        << format_value(e.val.rmse) << ',' << format_value(e.val.mape) << ',' << format_value(e.test.mae) << ','
        << format_value(e.test.rmse) << ',' << format_value(e.test.mape) << '\n';
  }
}

}  // namespace dcst::distill
