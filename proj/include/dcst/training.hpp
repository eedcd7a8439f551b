#pragma once

// Windowed tensors, batched inference and the minibatch Adam loop shared by teacher
// pre-training and student distillation.

#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcst/data/split.hpp"
#include "dcst/diffcore.hpp"
#include "dcst/metrics.hpp"

namespace dcst::train {

enum class LossKind { mae, mse };

NLOHMANN_JSON_SERIALIZE_ENUM(LossKind, {{LossKind::mae, "mae"}, {LossKind::mse, "mse"}})

inline Var point_loss(LossKind kind, Var pred, Var target) {
  return kind == LossKind::mae ? mae(pred, target) : mse(pred, target);
}

/// All stride-1 windows of a range stacked into [S, N, T] inputs and [S, N, H] targets,
/// normalised with the training statistics.
struct WindowTensors {
  Array inputs;
  Array targets;
  std::vector<std::size_t> origins;
  std::optional<std::string> warning;

  std::size_t count() const { return origins.size(); }
};

inline WindowTensors make_windows(const data::SpeedMatrix& m, data::IndexRange range, data::NormStats stats,
                                  std::size_t input_len, std::size_t horizon) {
  WindowTensors w;
  w.origins = data::window_origins(range, input_len, horizon);
  const std::size_t n = m.node_count(), s = w.origins.size();
  if (s == 0) {
    w.warning = data::window(m, range, input_len, horizon).warning;
    return w;
  }
  w.inputs = Array(Shape{s, n, input_len});
  w.targets = Array(Shape{s, n, horizon});
  for (std::size_t k = 0; k < s; ++k) {
    const std::size_t t = w.origins[k];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < input_len; ++j) {
        w.inputs[(k * n + i) * input_len + j] = (m.at(i, t - input_len + j) - stats.mean) / stats.std;
      }
      for (std::size_t j = 0; j < horizon; ++j) {
        w.targets[(k * n + i) * horizon + j] = (m.at(i, t + j) - stats.mean) / stats.std;
      }
    }
  }
  return w;
}

/// Rows order[begin..end) of a stacked array, as a new leading axis.
inline Array gather(const Array& stacked, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) {
  Shape s = stacked.shape();
  const std::size_t row = stacked.size() / s[0];
  s[0] = end - begin;
  Array out(s);
  for (std::size_t k = begin; k < end; ++k) {
    std::copy_n(stacked.raw() + order[k] * row, row, out.raw() + (k - begin) * row);
  }
  return out;
}

inline std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

/// Maps a batch [B, N, T] to predictions [B, N, H] on the given tape.
using ForwardFn = std::function<Var(Var)>;

/// Gradient-free predictions for every window: [S, N, H].
inline Array predict_all(const ForwardFn& forward, const Array& inputs, std::size_t batch_size) {
  const std::size_t s = inputs.dim(0);
  const auto order = iota(s);
  Array out;
  std::size_t row = 0;
  for (std::size_t b = 0; b < s; b += batch_size) {
    const std::size_t e = std::min(s, b + batch_size);
    Tape t;
    t.set_grad_enabled(false);
    Var y = forward(t.constant(gather(inputs, order, b, e)));
    if (out.empty()) {
      Shape os = y.shape();
      os[0] = s;
      out = Array(os);
      row = y.value().size() / (e - b);
    }
    std::copy_n(y.value().raw(), y.value().size(), out.raw() + b * row);
  }
  return out;
}

/// α·L(student, teacher) + β·L(student, truth). Teacher and truth enter as constants; a
/// zero weight drops its term entirely.
inline Var distill_loss(Var student, const Array& teacher, const Array& truth, double alpha, double beta,
                        LossKind kind = LossKind::mae) {
  require_same_shape(student.value(), teacher, "distill_loss");
  require_same_shape(student.value(), truth, "distill_loss");
  if (alpha < 0.0 || beta < 0.0 || !(alpha + beta > 0.0)) {
    throw ConfigError("distill_loss: weights must be nonnegative with a positive sum");
  }
  Tape& t = student.tape();
  std::optional<Var> total;
  if (alpha != 0.0) total = scale(point_loss(kind, student, t.constant(teacher)), alpha);
  if (beta != 0.0) {
    Var hard = scale(point_loss(kind, student, t.constant(truth)), beta);
    total = total ? add(*total, hard) : hard;
  }
  return *total;
}

struct EpochRecord;

/// Observer called after every epoch; never influences training.
using EpochCallback = std::function<void(const EpochRecord&)>;

struct FitConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  double beta = 1.0;
  LossKind loss = LossKind::mae;
  EpochCallback on_epoch;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw ConfigError("epochs and batch_size must be positive");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (patience == 0) throw ConfigError("patience must be positive");
    if (alpha < 0.0 || beta < 0.0 || !(alpha + beta > 0.0)) {
      throw ConfigError("alpha and beta must be nonnegative with a positive sum");
    }
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double soft_loss = 0.0;  // mean soft term (unweighted); 0 without a teacher
  double hard_loss = 0.0;  // mean hard term (unweighted)
  metrics::Metrics val;
  double val_soft = 0.0;  // normalised-space distance to the teacher on validation
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
  std::optional<std::string> aborted;  // set when a non-finite loss stopped training
  double wall_seconds = 0.0;           // informational; never written to metric files

  const EpochRecord& best() const { return epochs.at(best_epoch); }
};

/// Soft targets for the train and validation windows; produced once by the frozen
/// teacher since its outputs do not change during distillation.
struct SoftTargets {
  Array train;
  Array val;
};

/// Minibatch Adam on distill_loss with per-epoch validation on hard MAE. Keeps the
/// best-validation parameters; stops after `patience` epochs without improvement. A
/// non-finite loss restores the last good parameters and records the abort.
inline TrainReport fit(ParameterStore& store, const ForwardFn& forward, const WindowTensors& train,
                       const WindowTensors& val, data::NormStats stats, const FitConfig& cfg,
                       const SoftTargets* soft = nullptr) {
  cfg.validate();
  if (train.count() == 0) throw ConfigError("training split has no windows" + (train.warning ? ": " + *train.warning : ""));
  if (val.count() == 0) throw ConfigError("validation split has no windows" + (val.warning ? ": " + *val.warning : ""));
  if (cfg.alpha > 0.0 && !soft) throw ConfigError("alpha > 0 needs teacher soft targets");
  const auto start = std::chrono::steady_clock::now();

  std::vector<Parameter*> params;
  for (auto& p : store) {
    if (!p.frozen()) params.push_back(&p);
  }
  Adam opt(params, AdamConfig{cfg.lr});
  SeededRng shuffle_rng(derive_seed(cfg.seed, 0x5348554646ULL));
  auto order = iota(train.count());

  TrainReport report;
  double best_mae = std::numeric_limits<double>::infinity();
  auto best_params = store.snapshot();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    EpochRecord rec;
    rec.epoch = epoch;
    double seen = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      Tape t;
      Var pred = forward(t.constant(gather(train.inputs, order, b, e)));
      const Array truth = gather(train.targets, order, b, e);
      Var loss = cfg.alpha > 0.0 ? distill_loss(pred, gather(soft->train, order, b, e), truth, cfg.alpha, cfg.beta,
                                                cfg.loss)
                                 : distill_loss(pred, truth, truth, 0.0, cfg.beta, cfg.loss);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        store.restore(best_params);
        store.zero_grad();
        report.aborted = "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(b / cfg.batch_size) + "; restored last good parameters";
        report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return report;
      }
      t.backward(loss);
      opt.step();
      const double w = static_cast<double>(e - b);
      seen += w;
      rec.train_loss += w * lv;
      rec.hard_loss += w * point_loss(cfg.loss, t.constant(pred.value()), t.constant(truth)).value().item();
      if (soft) {
        rec.soft_loss += w * point_loss(cfg.loss, t.constant(pred.value()), t.constant(gather(soft->train, order, b, e)))
                                 .value()
                                 .item();
      }
    }
    rec.train_loss /= seen;
    rec.hard_loss /= seen;
    rec.soft_loss /= seen;

    const Array val_pred = predict_all(forward, val.inputs, 64);
    rec.val = metrics::compute_metrics(val_pred, val.targets, stats);
    if (soft) {
      Tape t;
      t.set_grad_enabled(false);
      rec.val_soft = point_loss(cfg.loss, t.constant(val_pred), t.constant(soft->val)).value().item();
    }
    report.epochs.push_back(rec);
    if (cfg.on_epoch) cfg.on_epoch(rec);
    if (rec.val.mae < best_mae) {
      best_mae = rec.val.mae;
      report.best_epoch = epoch;
      best_params = store.snapshot();
    } else if (epoch - report.best_epoch >= cfg.patience) {
      report.early_stopped = true;
      break;
    }
  }
  store.restore(best_params);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace dcst::train
