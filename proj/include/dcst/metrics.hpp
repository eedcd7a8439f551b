#pragma once

// Forecast error metrics in denormalised units and the historical-average baseline.

#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "dcst/data/split.hpp"
#include "dcst/diffcore/array.hpp"

namespace dcst::metrics {

/// Entries with |truth| below this are excluded from MAPE.
inline constexpr double kMapeMinTruth = 1e-3;

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> mape;  // percent; empty when every truth entry is masked
};

/// Running sums over any number of (pred, truth) pairs in denormalised units.
class MetricAccumulator {
 public:
  void add(double pred, double truth) {
    const double e = pred - truth;
    abs_ += std::abs(e);
    sq_ += e * e;
    ++count_;
    if (std::abs(truth) >= kMapeMinTruth) {
      ape_ += std::abs(e) / std::abs(truth);
      ++ape_count_;
    }
  }

  void add(const Array& pred, const Array& truth) {
    require_same_shape(pred, truth, "metrics");
    for (std::size_t i = 0; i < pred.size(); ++i) add(pred[i], truth[i]);
  }

  std::size_t count() const { return count_; }

  Metrics result() const {
    Metrics m;
    if (count_ == 0) return m;
    const double n = static_cast<double>(count_);
    m.mae = abs_ / n;
    m.rmse = std::sqrt(sq_ / n);
    if (ape_count_ > 0) m.mape = 100.0 * ape_ / static_cast<double>(ape_count_);
    return m;
  }

 private:
  double abs_ = 0.0;
  double sq_ = 0.0;
  double ape_ = 0.0;
  std::size_t count_ = 0;
  std::size_t ape_count_ = 0;
};

/// Denormalises both arrays with the training statistics and averages over every entry.
inline Metrics compute_metrics(const Array& pred, const Array& truth, data::NormStats stats) {
  MetricAccumulator acc;
  acc.add(data::denormalize(pred, stats), data::denormalize(truth, stats));
  return acc.result();
}

/// Fixed-point text with `decimals` places; "NA" for an undefined value.
inline std::string format_value(std::optional<double> v, int decimals = 4) {
  if (!v) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, *v);
  return buf;
}

/// Per-node, per-time-of-day-slot means over the training range: [N, slots_per_day].
/// Slots with no training observation fall back to the node's training mean.
class HistoricalAverage {
 public:
  HistoricalAverage(const data::SpeedMatrix& m, data::IndexRange train) : matrix_(&m) {
    const std::size_t n = m.node_count(), slots = m.slots_per_day();
    if (train.size() == 0) throw ConfigError("historical average needs a nonempty training range");
    table_ = Array(Shape{n, slots});
    std::vector<double> sums(n * slots, 0.0);
    std::vector<std::size_t> counts(n * slots, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double node_sum = 0.0;
      for (std::size_t t = train.begin; t < train.end; ++t) {
        const std::size_t s = m.slot_of(t);
        sums[i * slots + s] += m.at(i, t);
        ++counts[i * slots + s];
        node_sum += m.at(i, t);
      }
      const double node_mean = node_sum / static_cast<double>(train.size());
      for (std::size_t s = 0; s < slots; ++s) {
        const std::size_t k = i * slots + s;
        table_[k] = counts[k] > 0 ? sums[k] / static_cast<double>(counts[k]) : node_mean;
      }
    }
  }

  const Array& table() const { return table_; }

  double predict(std::size_t node, std::size_t t) const {
    return table_.at(node, matrix_->slot_of(t));
  }

  /// Scores the targets of every window in `range`, exactly as models are scored.
  Metrics evaluate(data::IndexRange range, std::size_t input_len, std::size_t horizon) const {
    MetricAccumulator acc;
    for (auto origin : data::window_origins(range, input_len, horizon)) {
      for (std::size_t i = 0; i < matrix_->node_count(); ++i) {
        for (std::size_t k = 0; k < horizon; ++k) acc.add(predict(i, origin + k), matrix_->at(i, origin + k));
      }
    }
    return acc.result();
  }

 private:
  const data::SpeedMatrix* matrix_;
  Array table_;
};

}  // namespace dcst::metrics
