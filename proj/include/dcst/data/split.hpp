#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dcst/data/dataset.hpp"
#include "dcst/diffcore/errors.hpp"

namespace dcst::data {

/// Half-open range [begin, end) over the time axis.
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const IndexRange&) const = default;
};

/// Dataset-wide z-score statistics.
struct NormStats {
  double mean = 0.0;
  double std = 1.0;
};

struct SplitFractions {
  double train = 0.7;
  double val = 0.2;
};

struct DatasetSplit {
  IndexRange train;
  IndexRange val;
  IndexRange test;
  NormStats stats;
};

inline constexpr double kMinStd = 1e-6;

/// Statistics over all nodes within a time range.
inline NormStats compute_stats(const SpeedMatrix& m, IndexRange range) {
  const std::size_t n = m.node_count();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = range.begin; t < range.end; ++t) total += m.at(i, t);
  }
  const double count = static_cast<double>(n * range.size());
  const double mean = total / count;
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = range.begin; t < range.end; ++t) ss += (m.at(i, t) - mean) * (m.at(i, t) - mean);
  }
  return NormStats{mean, std::max(std::sqrt(ss / count), kMinStd)};
}

/// Chronological split: floor(train·T) / floor(val·T) / remainder. Statistics come from the
/// training range only.
inline DatasetSplit split(const SpeedMatrix& m, SplitFractions fractions = {}) {
  const std::size_t total = m.steps();
  if (total < 10) throw ConfigError("split needs at least 10 time steps, got " + std::to_string(total));
  if (fractions.train <= 0.0 || fractions.val < 0.0 || fractions.train + fractions.val >= 1.0) {
    throw ConfigError("split fractions must satisfy train > 0, val >= 0, train + val < 1");
  }
  // The epsilon keeps e.g. 0.7 * 1000 from flooring to 699.
  const auto n_train = static_cast<std::size_t>(std::floor(fractions.train * static_cast<double>(total) + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(fractions.val * static_cast<double>(total) + 1e-9));
  DatasetSplit s;
  s.train = {0, n_train};
  s.val = {n_train, n_train + n_val};
  s.test = {n_train + n_val, total};
  s.stats = compute_stats(m, s.train);
  return s;
}

struct WindowedSample {
  Array input;   // N x T
  Array target;  // N x H
  std::size_t origin = 0;
};

struct WindowSet {
  std::vector<WindowedSample> samples;
  std::optional<std::string> warning;
};

/// Origins t of every stride-1 window inside `range`: input covers [t-T, t), target [t, t+H).
inline std::vector<std::size_t> window_origins(IndexRange range, std::size_t input_len, std::size_t horizon) {
  std::vector<std::size_t> out;
  if (range.size() < input_len + horizon) return out;
  for (std::size_t t = range.begin + input_len; t + horizon <= range.end; ++t) out.push_back(t);
  return out;
}

inline WindowSet window(const SpeedMatrix& m, IndexRange range, std::size_t input_len = 12,
                        std::size_t horizon = 12) {
  WindowSet set;
  const auto origins = window_origins(range, input_len, horizon);
  if (origins.empty()) {
    set.warning = "range [" + std::to_string(range.begin) + "," + std::to_string(range.end) + ") of length " +
                  std::to_string(range.size()) + " is shorter than input + horizon = " +
                  std::to_string(input_len + horizon);
    return set;
  }
  const std::size_t n = m.node_count();
  for (auto t : origins) {
    WindowedSample s{Array(Shape{n, input_len}), Array(Shape{n, horizon}), t};
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < input_len; ++k) s.input[i * input_len + k] = m.at(i, t - input_len + k);
      for (std::size_t k = 0; k < horizon; ++k) s.target[i * horizon + k] = m.at(i, t + k);
    }
    set.samples.push_back(std::move(s));
  }
  return set;
}

inline Array normalize(const Array& x, NormStats stats) {
  Array out = x;
  for (auto& v : out.data()) v = (v - stats.mean) / stats.std;
  return out;
}

inline Array denormalize(const Array& y, NormStats stats) {
  Array out = y;
  for (auto& v : out.data()) v = v * stats.std + stats.mean;
  return out;
}

}  // namespace dcst::data
