#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcst/data/dataset.hpp"
#include "dcst/diffcore/errors.hpp"
#include "dcst/diffcore/rng.hpp"

namespace dcst::data {

/// Synthetic traffic generator settings. Speeds are in mph-like units.
struct SynthConfig {
  std::size_t n_nodes = 20;
  std::size_t t_total = 2016;  // one week at 5-minute steps
  double step_minutes = 5.0;
  double grid_extent = 10.0;    // side of the square sensors are scattered in
  double graph_density = 0.15;  // fraction of node pairs joined, closest first
  std::size_t lag = 3;          // steps between the two members of a planted pair
  double rush_amplitude = 6.0;  // depth of the shared daily rush-hour dip
  double noise_sigma = 0.5;
  std::size_t planted_pairs = 2;
  double pair_amplitude = 15.0;
  std::size_t pair_jitter = 12;  // per-day shift of the pair dips, +/- steps
  double pair_width = 4.0;       // dip standard deviation in steps
  double persistence = 0.95;     // decay of the congestion state per step
  double diffusion = 0.3;        // pull of a node's congestion toward its neighbours
  double incident_rate = 0.01;   // per-step probability of an incident at a connected node
  double incident_magnitude = 12.0;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("synthetic config: " + m); };
    if (n_nodes < 4) fail("n_nodes must be >= 4");
    if (t_total < 288) fail("t_total must be >= 288");
    if (!(step_minutes > 0.0)) fail("step_minutes must be positive");
    if (!(grid_extent > 0.0)) fail("grid_extent must be positive");
    if (graph_density < 0.0 || graph_density > 1.0) fail("graph_density must lie in [0, 1]");
    if (2 * planted_pairs > n_nodes) fail("planted_pairs needs 2 distinct nodes per pair");
    if (noise_sigma < 0.0 || rush_amplitude < 0.0 || pair_amplitude < 0.0 || incident_magnitude < 0.0) {
      fail("amplitudes must be nonnegative");
    }
    if (!(pair_width > 0.0)) fail("pair_width must be positive");
    if (persistence < 0.0 || persistence >= 1.0) fail("persistence must lie in [0, 1)");
    if (diffusion < 0.0 || diffusion > 1.0) fail("diffusion must lie in [0, 1]");
    if (incident_rate < 0.0 || incident_rate > 1.0) fail("incident_rate must lie in [0, 1]");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, n_nodes, t_total, step_minutes, grid_extent,
                                                graph_density, lag, rush_amplitude, noise_sigma, planted_pairs,
                                                pair_amplitude, pair_jitter, pair_width, persistence, diffusion,
                                                incident_rate, incident_magnitude)

/// A topology-free pair: `second` dips `lag` steps after `first` in the morning and
/// `lag` steps before it in the evening.
struct PlantedPair {
  std::size_t first = 0;
  std::size_t second = 0;
  std::size_t lag = 0;
  double distance = 0.0;
  bool adjacent = false;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(PlantedPair, first, second, lag, distance, adjacent)

/// Ground truth of a generated dataset, for oracle tests.
struct SynthDescriptor {
  std::uint64_t seed = 0;
  SynthConfig config;
  std::vector<PlantedPair> pairs;
  std::vector<double> base_speed;
  std::vector<double> rush_weight;
  double morning_center_minutes = 8.0 * 60;
  double evening_center_minutes = 17.5 * 60;
  double pair_morning_minutes = 7.5 * 60;
  double pair_evening_minutes = 18.0 * 60;
  std::size_t edges = 0;
  std::size_t incidents = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SynthDescriptor, seed, config, pairs, base_speed, rush_weight,
                                   morning_center_minutes, evening_center_minutes, pair_morning_minutes,
                                   pair_evening_minutes, edges, incidents)

struct SynthResult {
  Dataset dataset;
  SynthDescriptor descriptor;
};

namespace detail {

/// Gaussian bump of a time-of-day offset, measured the short way round the clock.
inline double daily_bump(double minute_of_day, double center, double width_minutes) {
  double d = std::fmod(minute_of_day - center, 1440.0);
  if (d > 720.0) d -= 1440.0;
  if (d < -720.0) d += 1440.0;
  return std::exp(-0.5 * (d / width_minutes) * (d / width_minutes));
}

inline double bump(double d, double width) { return std::exp(-0.5 * (d / width) * (d / width)); }

}  // namespace detail

/// Periodic rush-hour template of one node at column t.
inline double template_speed(const SynthDescriptor& desc, std::size_t node, double minute_of_day) {
  const double dip = detail::daily_bump(minute_of_day, desc.morning_center_minutes, 45.0) +
                     detail::daily_bump(minute_of_day, desc.evening_center_minutes, 60.0);
  return desc.base_speed[node] - desc.config.rush_amplitude * desc.rush_weight[node] * dip;
}

/// Pure function of (config, seed).
inline SynthResult synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SeededRng rng(seed);
  const std::size_t n = cfg.n_nodes, steps = cfg.t_total;

  SynthResult res;
  auto& ds = res.dataset;
  auto& desc = res.descriptor;
  desc.seed = seed;
  desc.config = cfg;

  for (std::size_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "s%03zu", i);
    ds.sensors.push_back(SensorMeta{id, rng.uniform(0.0, cfg.grid_extent), rng.uniform(0.0, cfg.grid_extent)});
  }
  for (std::size_t i = 0; i < n; ++i) {
    desc.base_speed.push_back(rng.uniform(50.0, 70.0));
    desc.rush_weight.push_back(rng.uniform(0.5, 1.0));
  }

  // Geometric graph: the closest pairs become edges with a Gaussian distance kernel.
  struct PairDist {
    double d;
    std::size_t i, j;
  };
  std::vector<PairDist> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      pairs.push_back({std::hypot(ds.sensors[i].x - ds.sensors[j].x, ds.sensors[i].y - ds.sensors[j].y), i, j});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const PairDist& a, const PairDist& b) { return a.d < b.d; });
  ds.graph = RoadGraph::empty(n);
  const auto n_edges = static_cast<std::size_t>(std::llround(cfg.graph_density * static_cast<double>(pairs.size())));
  const double kernel = cfg.grid_extent / 4.0;
  for (std::size_t e = 0; e < n_edges; ++e) {
    const auto& p = pairs[e];
    const double w = std::exp(-(p.d / kernel) * (p.d / kernel));
    ds.graph.adjacency.at(p.i, p.j) = w;
    ds.graph.adjacency.at(p.j, p.i) = w;
  }
  desc.edges = n_edges;

  // Planted pairs: farthest non-adjacent node pairs with disjoint members.
  std::vector<bool> used(n, false);
  for (auto it = pairs.rbegin(); it != pairs.rend() && desc.pairs.size() < cfg.planted_pairs; ++it) {
    if (used[it->i] || used[it->j] || ds.graph.adjacency.at(it->i, it->j) != 0.0) continue;
    used[it->i] = used[it->j] = true;
    desc.pairs.push_back(PlantedPair{it->i, it->j, cfg.lag, it->d, false});
  }
  if (desc.pairs.size() < cfg.planted_pairs) throw ConfigError("synthetic config: cannot place planted pairs");

  const double spd = 1440.0 / cfg.step_minutes;
  const std::size_t days = static_cast<std::size_t>(std::ceil(static_cast<double>(steps) / spd)) + 1;

  Array values(Shape{n, steps});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < steps; ++t) {
      values[i * steps + t] = template_speed(desc, i, std::fmod(static_cast<double>(t) * cfg.step_minutes, 1440.0));
    }
  }

  // Planted pair dips, with a per-day jitter shared by both members.
  for (const auto& pp : desc.pairs) {
    for (std::size_t d = 0; d < days; ++d) {
      const double jm = static_cast<double>(rng.index(2 * cfg.pair_jitter + 1)) - static_cast<double>(cfg.pair_jitter);
      const double je = static_cast<double>(rng.index(2 * cfg.pair_jitter + 1)) - static_cast<double>(cfg.pair_jitter);
      const double day0 = static_cast<double>(d) * spd;
      const double morning = day0 + desc.pair_morning_minutes / cfg.step_minutes + jm;
      const double evening = day0 + desc.pair_evening_minutes / cfg.step_minutes + je;
      const double k = static_cast<double>(pp.lag);
      for (std::size_t t = 0; t < steps; ++t) {
        const double tt = static_cast<double>(t);
        if (std::abs(tt - morning) > 60.0 && std::abs(tt - evening) > 60.0) continue;
        values[pp.first * steps + t] -= cfg.pair_amplitude * (detail::bump(tt - morning, cfg.pair_width) +
                                                              detail::bump(tt - evening - k, cfg.pair_width));
        values[pp.second * steps + t] -= cfg.pair_amplitude * (detail::bump(tt - morning - k, cfg.pair_width) +
                                                               detail::bump(tt - evening, cfg.pair_width));
      }
    }
  }

  // Congestion state diffusing over the road graph; incidents strike connected nodes only.
  std::vector<double> degree(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) degree[i] += ds.graph.adjacency.at(i, j);
    }
  }
  std::vector<double> state(n, 0.0), next(n, 0.0);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      double pulled = state[i];
      if (degree[i] > 0.0) {
        double nb = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          if (j != i) nb += ds.graph.adjacency.at(i, j) * state[j];
        }
        pulled = (1.0 - cfg.diffusion) * state[i] + cfg.diffusion * nb / degree[i];
      }
      next[i] = cfg.persistence * pulled;
      if (degree[i] > 0.0 && rng.uniform() < cfg.incident_rate) {
        next[i] += cfg.incident_magnitude * rng.uniform(0.5, 1.5);
        ++desc.incidents;
      }
    }
    state.swap(next);
    for (std::size_t i = 0; i < n; ++i) values[i * steps + t] -= state[i];
  }

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < steps; ++t) {
      double& v = values[i * steps + t];
      if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * rng.normal();
      v = std::max(v, 0.0);
    }
  }

  ds.speeds.values = std::move(values);
  ds.speeds.step_minutes = cfg.step_minutes;
  ds.speeds.start_minutes = minutes_since_epoch(2024, 1, 1, 0, 0);
  return res;
}

}  // namespace dcst::data
