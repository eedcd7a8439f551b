#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "dcst/scales.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace dcst::scales {
namespace {

using oracle::random_sensors;
using oracle::spatial_loop;
using oracle::temporal_loop;

constexpr int kSeeds = 20;

Var spatial_from_ntd(Var h, const ScaleAssignment& a, const SpatialScaleParams& p) {
  return permute(spatial_scale_repr(permute(h, {1, 0, 2}), a, p), {1, 0, 2});
}

void randomize(ParameterStore& store, SeededRng& rng) {
  for (auto& p : store) p.assign(rng.normal_array(p.shape()));
}

TEST(AssignGrids, InteriorPointFloors) {
  std::vector<data::SensorMeta> s{{"a", 0, 0}, {"b", 0.1, 0.1}, {"c", 1, 1}};
  auto a = assign_grids(s, {{{4, 4}}});
  EXPECT_EQ(a.scales[0].cell_of_grid[a.scales[0].node_to_grid[1]], 0u);
}

TEST(AssignGrids, UpperBoundaryClampsToLastCell) {
  EXPECT_EQ(cell_of(1.0, 1.0, {4, 4}), (std::pair<std::size_t, std::size_t>{3, 3}));
  std::vector<data::SensorMeta> s{{"a", 0, 0}, {"b", 1, 1}};
  auto a = assign_grids(s, {{{4, 4}}});
  EXPECT_EQ(a.scales[0].cell_of_grid[a.scales[0].node_to_grid[1]], 15u);
  EXPECT_EQ(a.scales[0].occupied(), 2u);
}

TEST(AssignGrids, ColocatedSensorsShareOneGrid) {
  std::vector<data::SensorMeta> s{{"a", 2, 2}, {"b", 2, 2}, {"c", 2, 2}};
  auto a = assign_grids(s, {{{8, 8}, {2, 2}}});
  for (const auto& sc : a.scales) EXPECT_EQ(sc.occupied(), 1u);
}

TEST(AssignGrids, RejectsNonDecreasingScales) {
  std::vector<data::SensorMeta> s{{"a", 0, 0}};
  EXPECT_THROW(assign_grids(s, {{{4, 4}, {4, 4}}}), ConfigError);
  EXPECT_THROW(assign_grids(s, {{{0, 4}}}), ConfigError);
  EXPECT_THROW(assign_grids({}, {{{4, 4}}}), ConfigError);
}

TEST(AssignGrids, PartitionAndNestingOverRandomLayouts) {
  SeededRng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(40);
    auto sensors = random_sensors(rng, n);
    auto a = assign_grids(sensors, {{{8, 8}, {4, 4}, {2, 2}}});
    for (const auto& sc : a.scales) {
      std::size_t total = 0;
      std::set<std::size_t> seen;
      for (std::size_t m = 0; m < sc.occupied(); ++m) {
        ASSERT_FALSE(sc.members[m].empty());
        total += sc.members[m].size();
        for (auto i : sc.members[m]) {
          ASSERT_TRUE(seen.insert(i).second);
          ASSERT_EQ(sc.node_to_grid[i], m);
        }
      }
      ASSERT_EQ(total, n);
    }
    for (std::size_t l = 0; l + 1 < a.scales.size(); ++l) {
      for (const auto& fine : a.scales[l].members) {
        std::set<std::size_t> coarse;
        for (auto i : fine) coarse.insert(a.scales[l + 1].node_to_grid[i]);
        ASSERT_EQ(coarse.size(), 1u);
      }
    }
  }
}

TEST(SegmentTimeline, BoundaryBelongsToEarlierSegment) {
  const auto s = segment_timeline(12, 3);
  EXPECT_EQ(s[2], 1u);  // t = 3
  EXPECT_EQ(s[3], 2u);  // t = 4
}

TEST(SegmentTimeline, WholeWindowIsOneSegment) {
  for (auto j : segment_timeline(12, 12)) EXPECT_EQ(j, 1u);
}

TEST(SegmentTimeline, RejectsNonDivisor) {
  EXPECT_THROW(segment_timeline(12, 5), ConfigError);
  EXPECT_THROW(segment_timeline(12, 0), ConfigError);
  EXPECT_THROW((TemporalScaleSpec{{2, 5}}.validate(12)), ConfigError);
  EXPECT_THROW((TemporalScaleSpec{{4, 2}}.validate(12)), ConfigError);
  EXPECT_NO_THROW((TemporalScaleSpec{{2, 4, 6}}.validate(12)));
}

TEST(SegmentTimeline, TilesEveryDivisor) {
  for (std::size_t steps = 1; steps <= 60; ++steps) {
    for (std::size_t unit = 1; unit <= steps; ++unit) {
      if (steps % unit != 0) continue;
      const auto s = segment_timeline(steps, unit);
      std::vector<std::size_t> count(steps / unit + 1, 0);
      for (auto j : s) {
        ASSERT_GE(j, 1u);
        ASSERT_LE(j, steps / unit);
        ++count[j];
      }
      for (std::size_t j = 1; j <= steps / unit; ++j) ASSERT_EQ(count[j], unit);
      ASSERT_EQ(s[unit - 1], 1u);
      if (unit < steps) {
        ASSERT_EQ(s[unit], 2u);
      }
    }
  }
}

TEST(SpatialRepr, SingletonIdentityIsLayerNorm) {
  std::vector<data::SensorMeta> s{{"a", 0, 0}, {"b", 1, 1}};
  auto a = assign_grids(s, {{{2, 2}}}).scales[0];
  ParameterStore store;
  SeededRng rng(3);
  auto p = SpatialScaleParams::create(store, "sp", 2, 3, false, rng);
  Array eye(Shape{2, 3, 3});
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t k = 0; k < 3; ++k) eye[(i * 3 + k) * 3 + k] = 1.0;
  }
  p.weight->assign(eye);
  Tape t;
  Array h = rng.normal_array({2, 4, 3});
  Var z = spatial_from_ntd(t.constant(h), a, p);
  Var ref = p.norm(t.constant(h));
  EXPECT_LT(max_abs_diff(z.value(), ref.value()), 1e-12);
}

TEST(SpatialRepr, ZeroWeightsAreConstantOverTime) {
  SeededRng rng(4);
  auto sensors = random_sensors(rng, 6);
  auto a = assign_grids(sensors, {{{2, 1}}}).scales[0];
  ParameterStore store;
  auto p = SpatialScaleParams::create(store, "sp", 6, 3, false, rng);
  p.weight->assign(Array(p.weight->shape()));
  p.bias->assign(rng.normal_array(p.bias->shape()));
  Tape t;
  Var z = spatial_from_ntd(t.constant(rng.normal_array({6, 5, 3})), a, p);
  const auto& v = z.value();
  for (std::size_t m = 0; m < v.dim(0); ++m) {
    for (std::size_t tt = 1; tt < 5; ++tt) {
      for (std::size_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(v[(m * 5 + tt) * 3 + k], v[(m * 5) * 3 + k]);
    }
  }
}

TEST(SpatialRepr, MatchesLoopOracle) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    SeededRng rng(static_cast<std::uint64_t>(seed));
    const std::size_t n = 2 + rng.index(7), steps = 1 + rng.index(8), d = 1 + rng.index(4);
    auto sensors = random_sensors(rng, n);
    auto a = assign_grids(sensors, {{{2, 2}}}).scales[0];
    ParameterStore store;
    auto p = SpatialScaleParams::create(store, "sp", n, d, false, rng);
    randomize(store, rng);
    Array h = rng.normal_array({n, steps, d});
    Tape t;
    Var z = spatial_from_ntd(t.constant(h), a, p);
    Array ref = spatial_loop(h, a, p.weight->value(), p.bias->value(), p.norm.gain->value(), p.norm.bias->value());
    ASSERT_EQ(z.shape(), ref.shape());
    EXPECT_LT(max_abs_diff(z.value(), ref), 1e-12) << "seed " << seed;
  }
}

TEST(SpatialRepr, SixNodesTwoGridsGradient) {
  auto worst = test::worst_over_seeds(kSeeds, [](std::uint64_t seed) {
    SeededRng rng(seed);
    std::vector<data::SensorMeta> s{{"a", 0, 0}, {"b", 0.2, 0.5}, {"c", 0.4, 0.9},
                                    {"d", 0.6, 0.1}, {"e", 0.8, 0.3}, {"f", 1.0, 1.0}};
    auto a = assign_grids(s, {{{2, 1}}}).scales[0];
    ParameterStore store;
    auto p = SpatialScaleParams::create(store, "sp", 6, 3, false, rng);
    randomize(store, rng);
    Parameter h("h", rng.normal_array({6, 3, 3}));
    std::vector<Parameter*> inputs{&h};
    for (auto& q : store) inputs.push_back(&q);
    return grad_check([&](Tape& t) { return test::weighted_sum(spatial_from_ntd(t.param(h), a, p), seed); }, inputs);
  });
  EXPECT_LT(worst.max_rel_error, 1e-5) << worst.worst_parameter;
}

TEST(SpatialRepr, SharedWeightsUseOneMatrix) {
  SeededRng rng(5);
  auto sensors = random_sensors(rng, 5);
  auto a = assign_grids(sensors, {{{2, 2}}}).scales[0];
  ParameterStore store;
  auto p = SpatialScaleParams::create(store, "sp", 5, 4, true, rng);
  EXPECT_EQ(p.weight->shape(), (Shape{4, 4}));
  randomize(store, rng);
  Array w(Shape{5, 4, 4}), b(Shape{5, 4});
  for (std::size_t i = 0; i < 5; ++i) {
    std::copy(p.weight->value().storage().begin(), p.weight->value().storage().end(), w.storage().begin() + i * 16);
    std::copy(p.bias->value().storage().begin(), p.bias->value().storage().end(), b.storage().begin() + i * 4);
  }
  Array h = rng.normal_array({5, 3, 4});
  Tape t;
  Var z = spatial_from_ntd(t.constant(h), a, p);
  EXPECT_LT(max_abs_diff(z.value(), spatial_loop(h, a, w, b, p.norm.gain->value(), p.norm.bias->value())), 1e-12);
}

TEST(SpatialRepr, RelabelingNodesPreservesGridValues) {
  SeededRng rng(6);
  auto sensors = random_sensors(rng, 7);
  ParameterStore store;
  auto p = SpatialScaleParams::create(store, "sp", 7, 3, false, rng);
  randomize(store, rng);
  Array h = rng.normal_array({7, 2, 3});
  std::vector<std::size_t> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);

  std::vector<data::SensorMeta> s2(7);
  Array h2(h.shape()), w2(p.weight->shape()), b2(p.bias->shape());
  for (std::size_t i = 0; i < 7; ++i) {
    s2[i] = sensors[perm[i]];
    std::copy_n(h.storage().begin() + perm[i] * 6, 6, h2.storage().begin() + i * 6);
    std::copy_n(p.weight->value().storage().begin() + perm[i] * 9, 9, w2.storage().begin() + i * 9);
    std::copy_n(p.bias->value().storage().begin() + perm[i] * 3, 3, b2.storage().begin() + i * 3);
  }
  auto a1 = assign_grids(sensors, {{{3, 3}}}).scales[0];
  auto a2 = assign_grids(s2, {{{3, 3}}}).scales[0];
  Tape t1;
  Array z1 = spatial_from_ntd(t1.constant(h), a1, p).value();
  p.weight->assign(w2);
  p.bias->assign(b2);
  Tape t2;
  Array z2 = spatial_from_ntd(t2.constant(h2), a2, p).value();
  EXPECT_EQ(a1.cell_of_grid, a2.cell_of_grid);
  EXPECT_LT(max_abs_diff(z1, z2), 1e-12);
}

TEST(SpatialRepr, RowCountIsOccupiedGrids) {
  SeededRng rng(8);
  auto sensors = random_sensors(rng, 9);
  auto a = assign_grids(sensors, {{{8, 8}}}).scales[0];
  ParameterStore store;
  auto p = SpatialScaleParams::create(store, "sp", 9, 2, false, rng);
  Tape t;
  Var z = spatial_from_ntd(t.constant(rng.normal_array({9, 2, 2})), a, p);
  EXPECT_EQ(z.shape()[0], a.occupied());
}

TEST(TemporalRepr, UnitOneIsPerStepProjection) {
  SeededRng rng(9);
  ParameterStore store;
  auto p = TemporalScaleParams::create(store, "tp", 4, 1, 3, rng);
  randomize(store, rng);
  Tape t;
  Array h = rng.normal_array({2, 4, 3});
  Var z = temporal_scale_repr(t.constant(h), p);
  EXPECT_EQ(z.shape(), (Shape{2, 4, 3}));
  EXPECT_LT(max_abs_diff(z.value(), temporal_loop(h, 1, p.weight->value(), p.bias->value(), p.norm.gain->value(),
                                                   p.norm.bias->value())),
            1e-12);
}

TEST(TemporalRepr, MatchesLoopOracle) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    SeededRng rng(static_cast<std::uint64_t>(seed));
    const std::size_t n = 1 + rng.index(8), d = 1 + rng.index(4);
    const std::vector<std::pair<std::size_t, std::size_t>> shapes{{4, 2}, {6, 3}, {8, 4}, {8, 2}, {6, 6}};
    const auto [steps, unit] = shapes[rng.index(shapes.size())];
    ParameterStore store;
    auto p = TemporalScaleParams::create(store, "tp", steps, unit, d, rng);
    randomize(store, rng);
    Array h = rng.normal_array({n, steps, d});
    Tape t;
    Var z = temporal_scale_repr(t.constant(h), p);
    Array ref = temporal_loop(h, unit, p.weight->value(), p.bias->value(), p.norm.gain->value(), p.norm.bias->value());
    ASSERT_EQ(z.shape(), ref.shape());
    EXPECT_LT(max_abs_diff(z.value(), ref), 1e-12) << "seed " << seed;
  }
}

// Layer norm over two features saturates to ±gain once the pre-norm gap exceeds sqrt(eps),
// leaving input gradients near roundoff; the D=2 instance is therefore drawn at that scale.
TEST(TemporalRepr, SmallInstanceGradient) {
  auto worst = test::worst_over_seeds(kSeeds, [](std::uint64_t seed) {
    SeededRng rng(seed);
    ParameterStore store;
    auto p = TemporalScaleParams::create(store, "tp", 4, 2, 2, rng);
    randomize(store, rng);
    p.bias->assign(rng.normal_array(p.bias->shape(), 1e-3));
    Parameter h("h", rng.normal_array({3, 4, 2}, 1e-3));
    std::vector<Parameter*> inputs{&h};
    for (auto& q : store) inputs.push_back(&q);
    return grad_check([&](Tape& t) { return test::weighted_sum(temporal_scale_repr(t.param(h), p), seed); }, inputs);
  });
  EXPECT_LT(worst.max_rel_error, 1e-5) << worst.worst_parameter;
}

TEST(TemporalRepr, UnitScaleGradient) {
  auto worst = test::worst_over_seeds(kSeeds, [](std::uint64_t seed) {
    SeededRng rng(seed);
    ParameterStore store;
    auto p = TemporalScaleParams::create(store, "tp", 6, 3, 4, rng);
    randomize(store, rng);
    Parameter h("h", rng.normal_array({3, 6, 4}));
    std::vector<Parameter*> inputs{&h};
    for (auto& q : store) inputs.push_back(&q);
    return grad_check([&](Tape& t) { return test::weighted_sum(temporal_scale_repr(t.param(h), p), seed); }, inputs);
  });
  EXPECT_LT(worst.max_rel_error, 1e-5) << worst.worst_parameter;
}

TEST(TemporalRepr, NodePermutationPermutesRows) {
  SeededRng rng(10);
  ParameterStore store;
  auto p = TemporalScaleParams::create(store, "tp", 6, 3, 2, rng);
  randomize(store, rng);
  Array h = rng.normal_array({4, 6, 2});
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Array h2(h.shape());
  for (std::size_t i = 0; i < 4; ++i) std::copy_n(h.storage().begin() + perm[i] * 12, 12, h2.storage().begin() + i * 12);
  Tape t;
  Array z1 = temporal_scale_repr(t.constant(h), p).value();
  Array z2 = temporal_scale_repr(t.constant(h2), p).value();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(z2[i * 4 + k], z1[perm[i] * 4 + k]);
  }
}

TEST(TemporalRepr, RejectsMismatchedInput) {
  SeededRng rng(11);
  ParameterStore store;
  auto p = TemporalScaleParams::create(store, "tp", 6, 3, 2, rng);
  Tape t;
  EXPECT_THROW(temporal_scale_repr(t.constant(Array(Shape{2, 8, 2})), p), ConfigError);
  EXPECT_THROW(temporal_scale_repr(t.constant(Array(Shape{2, 6, 3})), p), DimensionError);
  EXPECT_THROW(TemporalScaleParams::create(store, "bad", 6, 4, 2, rng), ConfigError);
}

}  // namespace
}  // namespace dcst::scales
