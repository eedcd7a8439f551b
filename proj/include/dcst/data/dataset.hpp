#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "dcst/diffcore/array.hpp"

namespace dcst::data {

struct SensorMeta {
  std::string id;
  double x = 0.0;
  double y = 0.0;
};

/// Weighted road network over N nodes; adjacency is N x N, nonnegative, 0 = no edge.
struct RoadGraph {
  Array adjacency;

  std::size_t node_count() const { return adjacency.empty() ? 0 : adjacency.shape()[0]; }

  std::size_t edge_count() const {
    std::size_t n = 0;
    const std::size_t nodes = node_count();
    for (std::size_t i = 0; i < nodes; ++i) {
      for (std::size_t j = i + 1; j < nodes; ++j) {
        if (adjacency.at(i, j) != 0.0 || adjacency.at(j, i) != 0.0) ++n;
      }
    }
    return n;
  }

  static RoadGraph empty(std::size_t n) { return RoadGraph{Array(Shape{n, n})}; }
};

/// N x T_total speed observations at a fixed step.
struct SpeedMatrix {
  Array values;
  double step_minutes = 5.0;
  /// Timestamp of column 0, minutes since the Unix epoch (UTC, no leap handling).
  std::int64_t start_minutes = 0;

  std::size_t node_count() const { return values.shape()[0]; }
  std::size_t steps() const { return values.shape()[1]; }
  double at(std::size_t node, std::size_t t) const { return values[node * steps() + t]; }

  /// Number of time-of-day slots per day (one slot per step).
  std::size_t slots_per_day() const {
    const auto s = static_cast<std::size_t>(std::llround(1440.0 / step_minutes));
    return s == 0 ? 1 : s;
  }

  /// Time-of-day slot of column t.
  std::size_t slot_of(std::size_t t) const {
    const std::int64_t minute_of_day = ((start_minutes % 1440) + 1440) % 1440;
    const auto first = static_cast<std::size_t>(std::llround(static_cast<double>(minute_of_day) / step_minutes));
    return (first + t) % slots_per_day();
  }
};

struct Dataset {
  SpeedMatrix speeds;
  std::vector<SensorMeta> sensors;
  RoadGraph graph;
};

inline std::int64_t minutes_since_epoch(int year, unsigned month, unsigned day, int hour, int minute) {
  using namespace std::chrono;
  const sys_days d = year_month_day{std::chrono::year{year}, std::chrono::month{month}, std::chrono::day{day}};
  return static_cast<std::int64_t>(d.time_since_epoch().count()) * 1440 + hour * 60 + minute;
}

/// ISO-8601 "YYYY-MM-DDTHH:MM:SS" for a minute offset.
inline std::string format_timestamp(std::int64_t minutes) {
  using namespace std::chrono;
  const auto day_count = static_cast<int>((minutes >= 0 ? minutes : minutes - 1439) / 1440);
  const std::int64_t rem = minutes - static_cast<std::int64_t>(day_count) * 1440;
  const year_month_day ymd{sys_days{days{day_count}}};
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02d:%02d:00", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), static_cast<int>(rem / 60),
                static_cast<int>(rem % 60));
  return buf;
}

}  // namespace dcst::data
