#pragma once

// Spatial grid scales and temporal segment scales, and the per-scale key/value
// representations the cross-scale attention layers attend to.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcst/data/dataset.hpp"
#include "dcst/diffcore.hpp"

namespace dcst::scales {

struct GridSize {
  std::size_t gx = 1;
  std::size_t gy = 1;
  std::size_t cells() const { return gx * gy; }
  bool operator==(const GridSize&) const = default;
};

inline void to_json(nlohmann::json& j, const GridSize& g) { j = nlohmann::json::array({g.gx, g.gy}); }
inline void from_json(const nlohmann::json& j, GridSize& g) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("grid size must be a [gx, gy] pair");
  g.gx = j.at(0).get<std::size_t>();
  g.gy = j.at(1).get<std::size_t>();
}

/// Grid resolutions ordered fine -> coarse.
struct SpatialScaleSpec {
  std::vector<GridSize> grids;

  void validate() const {
    for (std::size_t l = 0; l < grids.size(); ++l) {
      if (grids[l].gx == 0 || grids[l].gy == 0) throw ConfigError("grid cell counts must be >= 1");
      if (l > 0 && grids[l].cells() >= grids[l - 1].cells()) {
        throw ConfigError("spatial scales must have strictly decreasing cell counts (fine -> coarse)");
      }
    }
  }
};

/// Node-to-grid mapping at one spatial scale. Grids are numbered compactly over occupied
/// cells only, in row-major cell order.
struct ScaleAssignment {
  GridSize grid;
  std::vector<std::size_t> node_to_grid;
  std::vector<std::vector<std::size_t>> members;  // Γ(m)
  std::vector<std::size_t> cell_of_grid;          // row-major cell index cy * gx + cx

  std::size_t occupied() const { return members.size(); }
};

struct GridAssignment {
  std::vector<ScaleAssignment> scales;
};

/// Cell (cx, cy) of a position already normalised to the unit square.
inline std::pair<std::size_t, std::size_t> cell_of(double x, double y, GridSize g) {
  auto idx = [](double v, std::size_t n) {
    const double f = std::floor(static_cast<double>(n) * v);
    if (f <= 0.0) return std::size_t{0};
    return std::min(static_cast<std::size_t>(f), n - 1);
  };
  return {idx(x, g.gx), idx(y, g.gy)};
}

/// Min-max normalises positions to the unit square and bins them at every scale.
inline GridAssignment assign_grids(const std::vector<data::SensorMeta>& sensors, const SpatialScaleSpec& spec) {
  if (sensors.empty()) throw ConfigError("assign_grids needs at least one sensor");
  spec.validate();
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : sensors) {
    xmin = std::min(xmin, s.x);
    xmax = std::max(xmax, s.x);
    ymin = std::min(ymin, s.y);
    ymax = std::max(ymax, s.y);
  }
  auto unit = [](double v, double lo, double hi) { return hi > lo ? (v - lo) / (hi - lo) : 0.0; };

  GridAssignment out;
  for (const auto& g : spec.grids) {
    ScaleAssignment sa;
    sa.grid = g;
    std::vector<std::size_t> cells(sensors.size());
    for (std::size_t i = 0; i < sensors.size(); ++i) {
      auto [cx, cy] = cell_of(unit(sensors[i].x, xmin, xmax), unit(sensors[i].y, ymin, ymax), g);
      cells[i] = cy * g.gx + cx;
    }
    std::map<std::size_t, std::size_t> compact;
    for (auto c : cells) compact.emplace(c, 0);
    std::size_t next = 0;
    for (auto& [cell, id] : compact) {
      id = next++;
      sa.cell_of_grid.push_back(cell);
    }
    sa.members.resize(compact.size());
    for (std::size_t i = 0; i < sensors.size(); ++i) {
      const std::size_t m = compact.at(cells[i]);
      sa.node_to_grid.push_back(m);
      sa.members[m].push_back(i);
    }
    out.scales.push_back(std::move(sa));
  }
  return out;
}

/// Segment unit lengths ξ ordered fine -> coarse.
struct TemporalScaleSpec {
  std::vector<std::size_t> units;

  void validate(std::size_t input_len) const {
    for (std::size_t l = 0; l < units.size(); ++l) {
      if (units[l] == 0 || input_len % units[l] != 0) {
        throw ConfigError("temporal unit " + std::to_string(units[l]) + " does not divide input length " +
                          std::to_string(input_len));
      }
      if (l > 0 && units[l] <= units[l - 1]) throw ConfigError("temporal units must be strictly increasing");
    }
  }
};

/// 1-based segment j containing 1-based step t: (j-1)·ξ < t <= j·ξ.
inline std::size_t segment_of(std::size_t t, std::size_t unit) { return (t + unit - 1) / unit; }

/// Segment index (1-based) of each step t = 1..T, stored at position t-1.
inline std::vector<std::size_t> segment_timeline(std::size_t input_len, std::size_t unit) {
  if (unit == 0 || input_len % unit != 0) {
    throw ConfigError("temporal unit " + std::to_string(unit) + " does not divide input length " +
                      std::to_string(input_len));
  }
  std::vector<std::size_t> out(input_len);
  for (std::size_t t = 1; t <= input_len; ++t) out[t - 1] = segment_of(t, unit);
  return out;
}

/// Per-node grid projections of one spatial scale (or a single shared projection).
struct SpatialScaleParams {
  Parameter* weight = nullptr;  // [N, D, D] per node, or [D, D] when shared
  Parameter* bias = nullptr;    // [N, D] per node, or [D] when shared
  nn::LayerNorm norm;
  bool shared = false;

  static SpatialScaleParams create(ParameterStore& store, const std::string& name, std::size_t n_nodes,
                                   std::size_t d, bool shared, SeededRng& rng, double ln_eps = 1e-5) {
    SpatialScaleParams p;
    p.shared = shared;
    if (shared) {
      p.weight = &store.add(name + ".weight", nn::xavier(rng, {d, d}, d, d));
      p.bias = &store.add(name + ".bias", Array(Shape{d}));
    } else {
      p.weight = &store.add(name + ".weight", nn::xavier(rng, {n_nodes, d, d}, d, d));
      p.bias = &store.add(name + ".bias", Array(Shape{n_nodes, d}));
    }
    p.norm = nn::LayerNorm::create(store, name + ".norm", d, ln_eps);
    return p;
  }
};

/// Segment projections of one temporal scale, shared by all nodes.
struct TemporalScaleParams {
  Parameter* weight = nullptr;  // [T/ξ, ξ·D, D]
  Parameter* bias = nullptr;    // [T/ξ, D]
  nn::LayerNorm norm;
  std::size_t unit = 1;

  static TemporalScaleParams create(ParameterStore& store, const std::string& name, std::size_t input_len,
                                    std::size_t unit, std::size_t d, SeededRng& rng, double ln_eps = 1e-5) {
    segment_timeline(input_len, unit);  // validates divisibility
    const std::size_t segments = input_len / unit;
    TemporalScaleParams p;
    p.unit = unit;
    p.weight = &store.add(name + ".weight", nn::xavier(rng, {segments, unit * d, d}, unit * d, d));
    p.bias = &store.add(name + ".bias", Array(Shape{segments, d}));
    p.norm = nn::LayerNorm::create(store, name + ".norm", d, ln_eps);
    return p;
  }
};

/// Grid representations Z^m = LN(Σ_{i∈Γ(m)} h^i W^i + b^i).
///
/// `h` is [..., N, D] with the node axis second to last (for an [N, T, D] tensor, permute
/// to [T, N, D] first). Returns [..., M, D] over the M occupied grids.
inline Var spatial_scale_repr(Var h, const ScaleAssignment& assignment, const SpatialScaleParams& params) {
  const auto& s = h.shape();
  if (s.size() < 2 || s[s.size() - 2] != assignment.node_to_grid.size()) {
    throw DimensionError("spatial_scale_repr: input " + shape_string(s) + " does not have " +
                         std::to_string(assignment.node_to_grid.size()) + " nodes on axis -2");
  }
  Tape& t = h.tape();
  Var projected = params.shared ? linear(h, t.param(*params.weight), t.param(*params.bias))
                                : indexed_linear(h, t.param(*params.weight), t.param(*params.bias));
  Var summed = group_sum(projected, -2, assignment.node_to_grid, assignment.occupied());
  return params.norm(summed);
}

/// Segment representations P_j = LN(flatten(S_j) W_j + b_j).
///
/// `h` is [..., T, D]; returns [..., T/ξ, D]. Steps of a segment are contiguous in the
/// row-major layout, so flattening is a reshape.
inline Var temporal_scale_repr(Var h, const TemporalScaleParams& params) {
  const auto& s = h.shape();
  if (s.size() < 2) throw DimensionError("temporal_scale_repr: input rank must be >= 2");
  const std::size_t steps = s[s.size() - 2], d = s.back(), unit = params.unit;
  if (steps % unit != 0) {
    throw ConfigError("temporal unit " + std::to_string(unit) + " does not divide input length " +
                      std::to_string(steps));
  }
  if (params.weight->shape() != Shape{steps / unit, unit * d, d}) {
    throw DimensionError("temporal_scale_repr: weight " + shape_string(params.weight->shape()) +
                         " does not fit input " + shape_string(s));
  }
  Shape flat(s.begin(), s.end() - 2);
  flat.push_back(steps / unit);
  flat.push_back(unit * d);
  Tape& t = h.tape();
  Var segments = reshape(h, flat);
  return params.norm(indexed_linear(segments, t.param(*params.weight), t.param(*params.bias)));
}

}  // namespace dcst::scales
