#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dcst/data/synth.hpp"
#include "dcst/teacher.hpp"
#include "test_support.hpp"

namespace dcst::teacher {
namespace {

constexpr int kSeeds = 20;

Array ring(std::size_t n) {
  Array a(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    a.at(i, (i + 1) % n) = 1.0;
    a.at((i + 1) % n, i) = 1.0;
  }
  return a;
}

Array random_graph(SeededRng& rng, std::size_t n) {
  Array a(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (rng.uniform() < 0.4) a.at(i, j) = a.at(j, i) = rng.uniform(0.1, 2.0);
    }
  }
  return a;
}

GnnConfig toy_config() {
  GnnConfig c;
  c.hidden = 4;
  c.blocks = 2;
  c.kernel = 2;
  c.input_len = 8;
  c.horizon = 2;
  return c;
}

void perturb(ParameterStore& store, SeededRng& rng, double scale) {
  for (auto& p : store) {
    Array v = p.value();
    Array n = rng.normal_array(p.shape(), scale);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += n[i];
    p.assign(v);
  }
}

TEST(Adjacency, EmptyGraphNormalisesToIdentity) {
  EXPECT_EQ(normalize_adjacency(Array(Shape{3, 3})), Array::identity(3));
}

TEST(Adjacency, SingleEdgeIsHalves) {
  Array a = normalize_adjacency(Array::matrix(2, 2, {0, 1, 1, 0}));
  for (double v : a.data()) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(Adjacency, SymmetricWithSubStochasticRows) {
  SeededRng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.index(11);
    Array a = normalize_adjacency(random_graph(rng, n));
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        ASSERT_NEAR(a.at(i, j), a.at(j, i), 1e-15);
        ASSERT_GE(a.at(i, j), 0.0);
        row += a.at(i, j);
      }
      // The spectral radius of Â is 1, so no entry of Â·1 exceeds the norm of 1.
      ASSERT_GT(row, 0.0);
      ASSERT_LE(row, std::sqrt(static_cast<double>(n)) + 1e-12);
    }
  }
}

TEST(Adjacency, RegularGraphIsRowStochastic) {
  Array a = normalize_adjacency(ring(5));
  for (std::size_t i = 0; i < 5; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 5; ++j) row += a.at(i, j);
    EXPECT_NEAR(row, 1.0, 1e-14);
  }
}

TEST(Adjacency, Rejects) {
  EXPECT_THROW(normalize_adjacency(Array(Shape{2, 3})), DimensionError);
  EXPECT_THROW(normalize_adjacency(Array::matrix(2, 2, {0, -1, -1, 0})), ConfigError);
}

TEST(GnnConfig, Rejects) {
  GnnConfig c;
  c.kernel = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = GnnConfig{};
  c.blocks = 3;  // 3 blocks of two k=3 convolutions consume all 12 steps
  EXPECT_THROW(c.validate(), ConfigError);
  c = GnnConfig{};
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(GnnConfig{}.remaining_steps(), 4u);
}

TEST(GnnModel, OutputShapeAndRejects) {
  GnnModel m(GnnConfig{}, ring(6), 3);
  SeededRng rng(4);
  Tape t;
  EXPECT_EQ(m.forward(t.constant(rng.normal_array({2, 6, 12}))).shape(), (Shape{2, 6, 12}));
  EXPECT_THROW(m.forward(t.constant(rng.normal_array({2, 5, 12}))), DimensionError);
  EXPECT_THROW(m.forward(t.constant(rng.normal_array({2, 6, 11}))), DimensionError);
}

TEST(GnnModel, IdentityGraphKeepsNodesIndependent) {
  GnnModel m(toy_config(), Array(Shape{4, 4}), 5);
  SeededRng rng(6);
  perturb(m.parameters(), rng, 0.3);
  Array x = rng.normal_array({4, 8});
  Array y = m.predict(x);
  for (std::size_t t = 0; t < 8; ++t) x.at(2, t) += 1.0;
  Array y2 = m.predict(x);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (i == 2) {
        EXPECT_NE(y.at(i, k), y2.at(i, k));
      } else {
        EXPECT_EQ(y.at(i, k), y2.at(i, k));
      }
    }
  }
}

TEST(GnnModel, NeighboursInfluenceEachOther) {
  Array a(Shape{4, 4});
  a.at(0, 1) = a.at(1, 0) = 1.0;
  GnnModel m(toy_config(), a, 7);
  SeededRng rng(8);
  perturb(m.parameters(), rng, 0.3);
  Array x = rng.normal_array({4, 8});
  Array y = m.predict(x);
  for (std::size_t t = 0; t < 8; ++t) x.at(1, t) += 1.0;
  Array y2 = m.predict(x);
  EXPECT_NE(y.at(0, 0), y2.at(0, 0));
  EXPECT_EQ(y.at(2, 0), y2.at(2, 0));
  EXPECT_EQ(y.at(3, 1), y2.at(3, 1));
}

TEST(GnnModel, ConstantInputOnRegularGraphGivesEqualNodes) {
  GnnModel m(toy_config(), ring(5), 9);
  SeededRng rng(10);
  perturb(m.parameters(), rng, 0.3);
  Array x(Shape{5, 8});
  for (std::size_t t = 0; t < 8; ++t) {
    const double v = rng.normal();
    for (std::size_t i = 0; i < 5; ++i) x.at(i, t) = v;
  }
  Array y = m.predict(x);
  for (std::size_t i = 1; i < 5; ++i) {
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(y.at(i, k), y.at(0, k), 1e-12);
  }
}

TEST(GnnModel, ToyGradient) {
  auto worst = test::worst_over_seeds(kSeeds, [](std::uint64_t seed) {
    SeededRng rng(seed + 100);
    GnnModel m(toy_config(), random_graph(rng, 4), seed);
    // Larger perturbations push GLU gates and GELU into their flat regions, where
    // gradients shrink to ~1e-7 and central differences at step 1e-6 are roundoff-bound.
    perturb(m.parameters(), rng, 0.1);
    Array x = rng.normal_array({2, 4, 8});
    std::vector<Parameter*> inputs;
    for (auto& p : m.parameters()) inputs.push_back(&p);
    return grad_check([&](Tape& t) { return test::weighted_sum(m.forward(t.constant(x)), seed); }, inputs);
  });
  EXPECT_LT(worst.max_rel_error, 1e-4) << worst.worst_parameter;
}

TEST(GnnModel, SameSeedSameParameters) {
  GnnModel a(GnnConfig{}, ring(6), 11), b(GnnConfig{}, ring(6), 11), c(GnnConfig{}, ring(6), 12);
  EXPECT_EQ(a.parameters().checksum(), b.parameters().checksum());
  EXPECT_NE(a.parameters().checksum(), c.parameters().checksum());
}

struct SmallData {
  data::SynthResult synth;
  data::DatasetSplit split;
  train::WindowTensors train, val;
};

SmallData small_data() {
  data::SynthConfig sc;
  sc.n_nodes = 6;
  sc.t_total = 600;
  SmallData d{data::synth_generate(sc, 21), {}, {}, {}};
  d.split = data::split(d.synth.dataset.speeds);
  d.train = train::make_windows(d.synth.dataset.speeds, d.split.train, d.split.stats, 8, 2);
  d.val = train::make_windows(d.synth.dataset.speeds, d.split.val, d.split.stats, 8, 2);
  return d;
}

TEST(Pretrain, DeterministicAndLowersValidationError) {
  auto d = small_data();
  GnnConfig c = toy_config();
  c.epochs = 4;
  c.patience = 10;
  GnnModel a(c, d.synth.dataset.graph.adjacency, 1), b(c, d.synth.dataset.graph.adjacency, 1);
  auto ra = pretrain(a, d.train, d.val, d.split.stats, 2);
  auto rb = pretrain(b, d.train, d.val, d.split.stats, 2);
  ASSERT_EQ(ra.epochs.size(), 4u);
  EXPECT_FALSE(ra.early_stopped);
  EXPECT_EQ(a.parameters().checksum(), b.parameters().checksum());
  for (std::size_t e = 0; e < 4; ++e) EXPECT_EQ(ra.epochs[e].val.mae, rb.epochs[e].val.mae);
  EXPECT_LT(ra.best().val.mae, ra.epochs.front().val.mae + 1e-12);
  // The kept parameters are the best-validation ones.
  auto fwd = [&](Var x) { return a.forward(x); };
  auto m = metrics::compute_metrics(train::predict_all(fwd, d.val.inputs, 64), d.val.targets, d.split.stats);
  EXPECT_EQ(m.mae, ra.best().val.mae);
}

TEST(Frozen, ChecksumIdsAndUnfreeze) {
  GnnModel m(toy_config(), ring(4), 13);
  {
    auto f = freeze(m);
    EXPECT_EQ(f.checksum_at_freeze(), m.parameters().checksum());
    EXPECT_TRUE(f.unchanged());
    std::vector<std::uint64_t> ids;
    for (auto& p : m.parameters()) {
      EXPECT_TRUE(p.frozen());
      ids.push_back(p.id());
    }
    EXPECT_EQ(f.parameter_ids(), ids);
    std::vector<Parameter*> ps;
    for (auto& p : m.parameters()) ps.push_back(&p);
    EXPECT_THROW(Adam(ps, AdamConfig{1e-3}), ConfigError);
  }
  for (auto& p : m.parameters()) EXPECT_FALSE(p.frozen());
}

TEST(Frozen, ForwardMatchesUnfrozenAndRecordsNoGradient) {
  GnnModel m(toy_config(), ring(4), 14);
  SeededRng rng(15);
  Array x = rng.normal_array({3, 4, 8});
  const Array before = train::predict_all([&](Var v) { return m.forward(v); }, x, 2);
  auto f = freeze(m);
  EXPECT_EQ(f.predict_all(x, 2), before);
  Tape t;
  t.backward(sum(m.forward(t.constant(x))));
  for (const auto& p : m.parameters()) {
    for (double g : p.grad().data()) ASSERT_EQ(g, 0.0);
  }
  EXPECT_TRUE(f.unchanged());
}

}  // namespace
}  // namespace dcst::teacher
