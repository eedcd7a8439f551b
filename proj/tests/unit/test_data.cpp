#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dcst/data/csv.hpp"
#include "dcst/data/split.hpp"
#include "dcst/data/synth.hpp"

namespace dcst::data {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("dcst_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path file(const std::string& name, const std::string& content) const {
    std::ofstream(path_ / name) << content;
    return path_ / name;
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

TEST(LoadCsv, ShapesAndSymmetrisedAdjacency) {
  TempDir dir;
  auto speeds = dir.file("speeds.csv",
                         "timestamp,a,b\n"
                         "2024-01-01T00:00:00,60,55\n"
                         "2024-01-01T00:05:00,61,54\n"
                         "2024-01-01T00:10:00,62,53\n");
  auto sensors = dir.file("sensors.csv", "id,x,y\nb,1,1\na,0,0\n");
  auto adj = dir.file("adj.csv", "src,dst,weight\na,b,1.0\n");
  Dataset ds = load_csv(speeds, sensors, adj);
  EXPECT_EQ(ds.speeds.values.shape(), (Shape{2, 3}));
  EXPECT_EQ(ds.speeds.step_minutes, 5.0);
  EXPECT_EQ(ds.sensors[0].id, "a");  // node order follows the speeds header
  std::size_t nonzero = 0;
  for (double v : ds.graph.adjacency.data()) nonzero += v != 0.0;
  EXPECT_EQ(nonzero, 2u);
  EXPECT_EQ(ds.graph.adjacency.at(0, 1), 1.0);
  EXPECT_EQ(ds.graph.adjacency.at(1, 0), 1.0);
}

TEST(LoadCsv, ImputesForwardThenColumnMean) {
  TempDir dir;
  auto speeds = dir.file("speeds.csv",
                         "timestamp,a,b\n"
                         "2024-01-01T00:00:00,,50\n"
                         "2024-01-01T00:05:00,40,\n"
                         "2024-01-01T00:10:00,,70\n"
                         "2024-01-01T00:15:00,20,80\n");
  auto sensors = dir.file("sensors.csv", "id,x,y\na,0,0\nb,1,1\n");
  auto adj = dir.file("adj.csv", "src,dst,weight\n");
  Dataset ds = load_csv(speeds, sensors, adj);
  // Column a: leading gap -> mean(40, 20) = 30; row 3 -> previous value 40.
  EXPECT_EQ(ds.speeds.at(0, 0), 30.0);
  EXPECT_EQ(ds.speeds.at(0, 1), 40.0);
  EXPECT_EQ(ds.speeds.at(0, 2), 40.0);
  EXPECT_EQ(ds.speeds.at(0, 3), 20.0);
  // Column b: row 2 forward-filled from 50.
  EXPECT_EQ(ds.speeds.at(1, 1), 50.0);
}

TEST(LoadCsv, NonNumericCellNamesRowAndColumn) {
  TempDir dir;
  auto speeds = dir.file("speeds.csv", "timestamp,a,b\n2024-01-01T00:00:00,60,fast\n");
  auto sensors = dir.file("sensors.csv", "id,x,y\na,0,0\nb,1,1\n");
  auto adj = dir.file("adj.csv", "src,dst,weight\n");
  try {
    load_csv(speeds, sensors, adj);
    FAIL();
  } catch (const IngestionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 2"), std::string::npos);
    EXPECT_NE(msg.find("'b'"), std::string::npos);
  }
}

TEST(LoadCsv, UnknownAdjacencyIdRejected) {
  TempDir dir;
  auto speeds = dir.file("speeds.csv", "timestamp,a,b\n2024-01-01T00:00:00,60,50\n");
  auto sensors = dir.file("sensors.csv", "id,x,y\na,0,0\nb,1,1\n");
  auto adj = dir.file("adj.csv", "src,dst,weight\na,zz,1\n");
  EXPECT_THROW(load_csv(speeds, sensors, adj), IngestionError);
}

TEST(LoadCsv, SensorIdsMustMatchHeader) {
  TempDir dir;
  auto speeds = dir.file("speeds.csv", "timestamp,a,b\n2024-01-01T00:00:00,60,50\n");
  auto sensors = dir.file("sensors.csv", "id,x,y\na,0,0\nc,1,1\n");
  auto adj = dir.file("adj.csv", "src,dst,weight\n");
  EXPECT_THROW(load_csv(speeds, sensors, adj), IngestionError);
}

TEST(LoadCsv, SyntheticRoundTripIsExact) {
  TempDir dir;
  SynthConfig cfg;
  cfg.n_nodes = 6;
  cfg.t_total = 300;
  auto res = synth_generate(cfg, 4);
  write_speeds(dir.path() / "s.csv", res.dataset.speeds, res.dataset.sensors);
  write_sensors(dir.path() / "n.csv", res.dataset.sensors);
  write_adjacency(dir.path() / "a.csv", res.dataset.graph, res.dataset.sensors);
  Dataset back = load_csv(dir.path() / "s.csv", dir.path() / "n.csv", dir.path() / "a.csv");
  EXPECT_EQ(back.speeds.values, res.dataset.speeds.values);
  EXPECT_EQ(back.speeds.start_minutes, res.dataset.speeds.start_minutes);
  EXPECT_EQ(back.graph.adjacency, res.dataset.graph.adjacency);
  EXPECT_EQ(back.sensors[3].x, res.dataset.sensors[3].x);
}

SpeedMatrix ramp(std::size_t n, std::size_t steps) {
  SpeedMatrix m;
  m.values = Array(Shape{n, steps});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < steps; ++t) m.values[i * steps + t] = static_cast<double>(100 * i + t);
  }
  return m;
}

TEST(Split, SeventyTwentyTen) {
  auto s = split(ramp(2, 1000));
  EXPECT_EQ(s.train, (IndexRange{0, 700}));
  EXPECT_EQ(s.val, (IndexRange{700, 900}));
  EXPECT_EQ(s.test, (IndexRange{900, 1000}));
  auto small = split(ramp(2, 10));
  EXPECT_EQ(small.train.size(), 7u);
  EXPECT_EQ(small.val.size(), 2u);
  EXPECT_EQ(small.test.size(), 1u);
  EXPECT_THROW(split(ramp(2, 9)), ConfigError);
}

TEST(Split, RangesDisjointOrderedExhaustive) {
  for (std::size_t total = 10; total < 400; total += 7) {
    auto s = split(ramp(1, total));
    EXPECT_EQ(s.train.begin, 0u);
    EXPECT_EQ(s.train.end, s.val.begin);
    EXPECT_EQ(s.val.end, s.test.begin);
    EXPECT_EQ(s.test.end, total);
    EXPECT_EQ(s.train.size(), static_cast<std::size_t>(std::floor(0.7 * static_cast<double>(total) + 1e-9)));
  }
}

TEST(Split, ConstantTrainingSeriesFloorsStd) {
  SpeedMatrix m;
  m.values = Array(Shape{2, 20}, 42.0);
  m.values[19] = 1000.0;  // test range only
  auto s = split(m);
  EXPECT_EQ(s.stats.mean, 42.0);
  EXPECT_EQ(s.stats.std, 1e-6);
}

TEST(Split, StatisticsIgnoreValidationAndTest) {
  auto m = ramp(3, 100);
  auto before = split(m).stats;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t t = 70; t < 100; ++t) m.values[i * 100 + t] = 1e6;
  }
  auto after = split(m).stats;
  EXPECT_EQ(before.mean, after.mean);
  EXPECT_EQ(before.std, after.std);
}

TEST(Window, CountsAndBoundaries) {
  auto m = ramp(2, 200);
  EXPECT_EQ(window(m, {0, 100}, 12, 12).samples.size(), 77u);
  // Oracle: count windows by brute force over all candidate origins.
  std::size_t brute = 0;
  for (std::size_t t = 0; t <= 100; ++t) brute += (t >= 12 && t + 12 <= 100);
  EXPECT_EQ(brute, 77u);
  EXPECT_EQ(window(m, {50, 74}, 12, 12).samples.size(), 1u);
  auto short_set = window(m, {0, 23}, 12, 12);
  EXPECT_TRUE(short_set.samples.empty());
  EXPECT_TRUE(short_set.warning.has_value());
}

TEST(Window, SampleLayout) {
  auto m = ramp(2, 200);
  auto set = window(m, {30, 130}, 12, 12);
  for (const auto& s : set.samples) {
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t k = 0; k < 12; ++k) {
        EXPECT_EQ(s.input[i * 12 + k], m.at(i, s.origin - 12 + k));
        EXPECT_EQ(s.target[i * 12 + k], m.at(i, s.origin + k));
      }
    }
    // Never crosses the range.
    EXPECT_GE(s.origin - 12, 30u);
    EXPECT_LE(s.origin + 12, 130u);
  }
}

TEST(Normalize, MeanMapsToZeroAndRoundTrips) {
  NormStats st{57.3, 8.1};
  EXPECT_EQ(normalize(Array::vector({57.3}), st)[0], 0.0);
  SeededRng rng(1);
  Array x = rng.uniform_array({50}, 0, 80);
  EXPECT_LT(max_abs_diff(denormalize(normalize(x, st), st), x), 1e-10);
}

TEST(Normalize, TrainingDataHasUnitMoments) {
  auto res = synth_generate(SynthConfig{}, 0);
  const auto& m = res.dataset.speeds;
  auto s = split(m);
  const Array z = normalize(m.values, s.stats);
  double mu = 0, var = 0;
  const double count = static_cast<double>(m.node_count() * s.train.size());
  for (std::size_t i = 0; i < m.node_count(); ++i) {
    for (std::size_t t = s.train.begin; t < s.train.end; ++t) mu += z[i * m.steps() + t];
  }
  mu /= count;
  for (std::size_t i = 0; i < m.node_count(); ++i) {
    for (std::size_t t = s.train.begin; t < s.train.end; ++t) var += std::pow(z[i * m.steps() + t] - mu, 2);
  }
  var /= count;
  EXPECT_NEAR(mu, 0.0, 1e-10);
  EXPECT_NEAR(var, 1.0, 1e-10);
}

TEST(Synth, DeterministicInSeed) {
  auto a = synth_generate(SynthConfig{}, 7);
  auto b = synth_generate(SynthConfig{}, 7);
  auto c = synth_generate(SynthConfig{}, 8);
  EXPECT_EQ(a.dataset.speeds.values, b.dataset.speeds.values);
  EXPECT_EQ(a.dataset.graph.adjacency, b.dataset.graph.adjacency);
  EXPECT_FALSE(a.dataset.speeds.values == c.dataset.speeds.values);
}

TEST(Synth, DefaultsMatchDocumentedSetup) {
  auto res = synth_generate(SynthConfig{}, 0);
  EXPECT_EQ(res.dataset.speeds.values.shape(), (Shape{20, 2016}));
  EXPECT_EQ(res.descriptor.pairs.size(), 2u);
  for (const auto& p : res.descriptor.pairs) {
    EXPECT_EQ(p.lag, 3u);
    EXPECT_EQ(res.dataset.graph.adjacency.at(p.first, p.second), 0.0);
  }
  for (double v : res.dataset.speeds.values.data()) EXPECT_GE(v, 0.0);
}

TEST(Synth, ComponentsOffGivesPureTemplate) {
  SynthConfig cfg;
  cfg.noise_sigma = 0.0;
  cfg.planted_pairs = 0;
  cfg.graph_density = 0.0;
  auto res = synth_generate(cfg, 3);
  const auto& m = res.dataset.speeds;
  for (std::size_t i = 0; i < m.node_count(); ++i) {
    for (std::size_t t = 0; t < m.steps(); ++t) {
      EXPECT_EQ(m.at(i, t), template_speed(res.descriptor, i, std::fmod(t * 5.0, 1440.0)));
    }
  }
  EXPECT_EQ(res.descriptor.incidents, 0u);
}

TEST(Synth, InvalidConfigRejected) {
  SynthConfig cfg;
  cfg.n_nodes = 3;
  EXPECT_THROW(synth_generate(cfg, 0), ConfigError);
  cfg = SynthConfig{};
  cfg.t_total = 100;
  EXPECT_THROW(synth_generate(cfg, 0), ConfigError);
  cfg = SynthConfig{};
  cfg.planted_pairs = 11;
  EXPECT_THROW(synth_generate(cfg, 0), ConfigError);
}

/// Lag maximising the correlation of residual(first, t) with residual(second, t + lag) over
/// steps whose time of day lies in [from_min, to_min).
int peak_lag(const SpeedMatrix& m, std::size_t first, std::size_t second, double from_min, double to_min) {
  const std::size_t spd = m.slots_per_day();
  const std::size_t steps = m.steps();
  auto residual = [&](std::size_t node) {
    std::vector<double> slot_mean(spd, 0.0), slot_count(spd, 0.0), r(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      slot_mean[m.slot_of(t)] += m.at(node, t);
      slot_count[m.slot_of(t)] += 1;
    }
    for (std::size_t t = 0; t < steps; ++t) r[t] = m.at(node, t) - slot_mean[m.slot_of(t)] / slot_count[m.slot_of(t)];
    return r;
  };
  const auto a = residual(first), b = residual(second);
  int best = 0;
  double best_c = -1e300;
  for (int lag = -12; lag <= 12; ++lag) {
    double c = 0;
    for (std::size_t t = 12; t + 12 < steps; ++t) {
      const double tod = static_cast<double>(m.slot_of(t)) * m.step_minutes;
      if (tod < from_min || tod >= to_min) continue;
      c += a[t] * b[static_cast<std::size_t>(static_cast<long>(t) + lag)];
    }
    if (c > best_c) {
      best_c = c;
      best = lag;
    }
  }
  return best;
}

TEST(Synth, PlantedPairsLagInMorningLeadInEvening) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto res = synth_generate(SynthConfig{}, seed);
    for (const auto& p : res.descriptor.pairs) {
      EXPECT_EQ(peak_lag(res.dataset.speeds, p.first, p.second, 6 * 60, 9 * 60), 3) << "seed " << seed;
      EXPECT_EQ(peak_lag(res.dataset.speeds, p.first, p.second, 16.5 * 60, 19.5 * 60), -3) << "seed " << seed;
    }
  }
}

TEST(Synth, DescriptorSerialises) {
  auto res = synth_generate(SynthConfig{}, 1);
  nlohmann::json j = res.descriptor;
  auto back = j.get<SynthDescriptor>();
  EXPECT_EQ(back.pairs.size(), 2u);
  EXPECT_EQ(back.config.lag, 3u);
  EXPECT_EQ(back.base_speed, res.descriptor.base_speed);
}

}  // namespace
}  // namespace dcst::data
