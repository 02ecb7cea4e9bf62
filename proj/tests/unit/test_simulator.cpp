#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <vector>

#include "mumloc/forward.hpp"
#include "mumloc/simulator.hpp"

using namespace mumloc;

namespace {

const PsfParams kInst = PsfParams::instrument();

struct Moments {
  double mean = 0.0, var = 0.0;
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x;
  m.mean /= double(v.size());
  for (double x : v) m.var += (x - m.mean) * (x - m.mean);
  m.var /= double(v.size() - 1);
  return m;
}

SimulationConfig half_config() {
  SimulationConfig c;
  c.grid = GridConfig::half();
  c.scene.volume = {c.grid.extent().x, c.grid.extent().y, 1200.0};
  c.helix.center_x = c.grid.extent().x / 2;
  c.helix.center_y = c.grid.extent().y / 2;
  c.helix.radius = 400.0;
  return c;
}

}  // namespace

TEST(SampleScene, ZeroMoleculesIsEmpty) {
  Rng rng(1, StreamPurpose::Test, 0);
  SceneConfig c;
  c.molecules = 0;
  EXPECT_TRUE(sample_scene(rng, c).molecules.empty());
}

TEST(SampleScene, PositionsAndWeightsInRange) {
  Rng rng(2, StreamPurpose::Test, 1);
  SceneConfig c;
  c.molecules = 1000;
  c.lateral_margin = 100.0;
  for (const auto& m : sample_scene(rng, c).molecules) {
    EXPECT_GE(m.position.x, 100.0);
    EXPECT_LE(m.position.x, 2972.0);
    EXPECT_GE(m.position.y, 100.0);
    EXPECT_LE(m.position.y, 2972.0);
    EXPECT_GE(m.position.z, 0.0);
    EXPECT_LE(m.position.z, 1200.0);
    EXPECT_GE(m.weight, 0.3);
    EXPECT_LE(m.weight, 1.0);
  }
}

TEST(SampleScene, UniformMeansWithinTwoPercent) {
  Rng rng(3, StreamPurpose::Test, 2);
  SceneConfig c;
  c.molecules = 10000;
  std::array<double, 4> sum{};
  for (const auto& m : sample_scene(rng, c).molecules) {
    sum[0] += m.position.x;
    sum[1] += m.position.y;
    sum[2] += m.position.z;
    sum[3] += m.weight;
  }
  const std::array<double, 4> expected{1536.0, 1536.0, 600.0, 0.65};
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(sum[k] / 1e4, expected[k], 0.02 * expected[k]);
}

TEST(SampleScene, RejectsBadConfig) {
  Rng rng(0, StreamPurpose::Test, 3);
  SceneConfig c;
  c.molecules = -1;
  EXPECT_THROW(sample_scene(rng, c), Error);
  c = {};
  c.weight_min = 0.0;
  EXPECT_THROW(sample_scene(rng, c), Error);
  c = {};
  c.weight_max = 1.5;
  EXPECT_THROW(sample_scene(rng, c), Error);
}

TEST(SampleDrifts, ReferencePlaneZeroOthersUniform) {
  Rng rng(4, StreamPurpose::Test, 4);
  std::map<int, int> counts;
  const int n = 20000;
  for (int k = 0; k < n; ++k) {
    const DriftSet d = sample_drifts(rng, 4, 2);
    EXPECT_EQ(d[0].dx, 0);
    EXPECT_EQ(d[0].dy, 0);
    for (int p = 1; p < 4; ++p) {
      ++counts[d[p].dx];
      ++counts[100 + d[p].dy];
    }
  }
  for (int v = -2; v <= 2; ++v) {
    EXPECT_NEAR(counts[v] / (3.0 * n), 0.2, 0.02);
    EXPECT_NEAR(counts[100 + v] / (3.0 * n), 0.2, 0.02);
  }
  EXPECT_EQ(counts.size(), 10u);
}

TEST(SampleDrifts, ZeroRangeGivesZeroDrifts) {
  Rng rng(5, StreamPurpose::Test, 5);
  EXPECT_EQ(sample_drifts(rng, 4, 0).max_abs(), 0);
  EXPECT_THROW(sample_drifts(rng, 4, -1), Error);
}

TEST(RenderFrame, VoxelCentredMoleculeMatchesOperator) {
  const GridConfig g = GridConfig::full();
  Rng rng(6, StreamPurpose::Test, 6);
  for (int trial = 0; trial < 5; ++trial) {
    const DriftSet d = sample_drifts(rng, 4, 2);
    Scene s;
    WeightVolume w(g);
    for (int k = 0; k < 3; ++k) {
      const int ix = rng.uniform_int(0, 127), iy = rng.uniform_int(0, 127), iz = rng.uniform_int(0, 31);
      const double wt = rng.uniform(0.3, 1.0);
      s.molecules.push_back({g.high_center(ix, iy, iz), wt});
      w[std::size_t(g.high_index(ix, iy, iz))] += wt;
    }
    const LowResImage a = render_frame(s, d, kInst, g, NoiseConfig::noiseless(), nullptr);
    const LowResImage b = apply_forward(w, d, kInst, g);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12 * std::max(1.0, b[i]));
  }
}

TEST(RenderFrame, EmptySceneIsBackground) {
  const GridConfig g = GridConfig::half();
  PsfParams p = kInst;
  p.b = 7.0;
  const LowResImage y = render_frame({}, DriftSet(4), p, g, NoiseConfig::noiseless(), nullptr);
  for (double v : y.data) EXPECT_EQ(v, 7.0);
}

TEST(RenderFrame, LinearInWeights) {
  const GridConfig g = GridConfig::half();
  Rng rng(7, StreamPurpose::Test, 7);
  SceneConfig sc;
  sc.volume = {1536.0, 1536.0, 1200.0};
  const Scene s = sample_scene(rng, sc);
  Scene s2 = s;
  for (auto& m : s2.molecules) m.weight *= 3.0;
  const DriftSet d = sample_drifts(rng, 4, 2);
  const LowResImage a = render_frame(s, d, kInst, g, NoiseConfig::noiseless(), nullptr);
  const LowResImage b = render_frame(s2, d, kInst, g, NoiseConfig::noiseless(), nullptr);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], 3.0 * a[i], 1e-12 * std::max(1.0, b[i]));
}

TEST(RenderFrame, PoissonVarianceMatchesMean) {
  const GridConfig g = GridConfig::half();
  PsfParams p = kInst;
  p.b = 20.0;
  NoiseConfig n;
  n.photon_scale = 2.0;
  n.enable_gaussian = false;
  Rng rng(8, StreamPurpose::Test, 8);
  std::vector<double> all;
  for (int k = 0; k < 64; ++k) {
    const LowResImage y = render_frame({}, DriftSet(4), p, g, n, &rng);
    all.insert(all.end(), y.data.begin(), y.data.end());
  }
  const Moments m = moments(all);
  // Counts ~ Poisson(40), divided by 2: mean 20, variance 10.
  EXPECT_NEAR(m.mean, 20.0, 0.1);
  EXPECT_NEAR(m.var, 10.0, 0.4);
  for (double v : all) ASSERT_EQ(v * 2.0, std::round(v * 2.0));
}

TEST(RenderFrame, GaussianNoiseVariance) {
  const GridConfig g = GridConfig::half();
  NoiseConfig n;
  n.enable_poisson = false;
  n.gaussian_sigma = 3.0;
  Rng rng(9, StreamPurpose::Test, 9);
  std::vector<double> all;
  for (int k = 0; k < 64; ++k) {
    const LowResImage y = render_frame({}, DriftSet(4), kInst, g, n, &rng);
    all.insert(all.end(), y.data.begin(), y.data.end());
  }
  const Moments m = moments(all);
  EXPECT_NEAR(m.mean, 0.0, 0.1);
  EXPECT_NEAR(m.var, 9.0, 0.35);
}

TEST(RenderFrame, NoisyWithoutStreamThrows) {
  EXPECT_THROW(render_frame({}, DriftSet(4), kInst, GridConfig::half(), NoiseConfig{}, nullptr), Error);
}

TEST(GenerateDataset, DeterministicPerSeed) {
  SimulationConfig c = half_config();
  c.frames = 4;
  c.batches = 2;
  const Dataset a = generate_dataset(c, 42);
  const Dataset b = generate_dataset(c, 42);
  const Dataset other = generate_dataset(c, 43);
  ASSERT_EQ(a.frames.size(), 8u);
  for (std::size_t t = 0; t < a.frames.size(); ++t) {
    EXPECT_EQ(a.frames[t].image.data, b.frames[t].image.data);
    EXPECT_EQ(a.frames[t].batch, int(t / 4));
  }
  EXPECT_NE(a.frames[0].image.data, other.frames[0].image.data);
  for (int batch = 0; batch < 2; ++batch)
    for (int p = 0; p < 4; ++p) {
      EXPECT_EQ(a.batch_drifts[std::size_t(batch)][p].dx, b.batch_drifts[std::size_t(batch)][p].dx);
      EXPECT_EQ(a.batch_drifts[std::size_t(batch)][p].dy, b.batch_drifts[std::size_t(batch)][p].dy);
    }
}

TEST(GenerateDataset, ThreadCountDoesNotChangeOutput) {
  SimulationConfig c = half_config();
  c.frames = 6;
  const Dataset a = generate_dataset(c, 7, 1);
  const Dataset b = generate_dataset(c, 7, 4);
  for (std::size_t t = 0; t < a.frames.size(); ++t) EXPECT_EQ(a.frames[t].image.data, b.frames[t].image.data);
}

TEST(GenerateDataset, SingleBatchOverload) {
  const Dataset d = generate_dataset(5, half_config(), 1);
  EXPECT_EQ(d.frames.size(), 5u);
  EXPECT_EQ(d.num_batches(), 1);
  EXPECT_THROW(generate_dataset(0, half_config(), 1), Error);
}

TEST(GenerateDataset, SweepCoversDepthStrata) {
  SimulationConfig c = half_config();
  c.mode = SceneMode::Sweep;
  c.frames = 12;
  c.batches = 5;
  const Dataset d = generate_dataset(c, 3);
  std::vector<int> strata(60, 0);
  for (const auto& f : d.frames) {
    ASSERT_EQ(f.scene.molecules.size(), 1u);
    ++strata[std::size_t(f.scene.molecules[0].position.z / 20.0)];
  }
  for (int s : strata) EXPECT_EQ(s, 1);
}

TEST(Helix, ZeroRadiusIsAxis) {
  HelixConfig h;
  h.radius = 0.0;
  for (double t : {0.0, 0.25, 0.7, 1.0}) {
    const Coord3 p = helix_point(h, t);
    EXPECT_EQ(p.x, h.center_x);
    EXPECT_EQ(p.y, h.center_y);
    EXPECT_NEAR(p.z, 1200.0 * t, 1e-12);
  }
}

TEST(Helix, MoleculesLieOnCurve) {
  HelixConfig h;
  h.molecules = 500;
  Rng rng(10, StreamPurpose::Test, 10);
  for (const auto& m : helix_scene(rng, h).molecules) {
    const double r = std::hypot(m.position.x - h.center_x, m.position.y - h.center_y);
    EXPECT_NEAR(r, h.radius, 1e-9);
    const double t = m.position.z / h.length;
    const double theta = 2.0 * std::numbers::pi * t;
    EXPECT_NEAR(m.position.x, h.center_x + h.radius * std::cos(theta), 1e-9);
    EXPECT_NEAR(m.position.y, h.center_y + h.radius * std::sin(theta), 1e-9);
  }
}

TEST(Helix, SamplesCoverTheParameterRange) {
  HelixConfig h;
  h.molecules = 2000;
  Rng rng(11, StreamPurpose::Test, 11);
  std::vector<int> bins(10, 0);
  for (const auto& m : helix_scene(rng, h).molecules) ++bins[std::size_t(std::min(9.0, m.position.z / 120.0))];
  for (int b : bins) EXPECT_NEAR(b, 200, 45);
}

TEST(Validate, SimulationConfigRanges) {
  SimulationConfig c = half_config();
  c.drift_range = 3;
  EXPECT_THROW(validate(c), Error);
  c = half_config();
  c.frames = 0;
  EXPECT_THROW(validate(c), Error);
  c = half_config();
  c.noise.photon_scale = 0.0;
  EXPECT_THROW(validate(c), Error);
  EXPECT_NO_THROW(validate(half_config()));
}

TEST(SceneMode, StringRoundTrip) {
  for (SceneMode m : {SceneMode::Random, SceneMode::Helix, SceneMode::Sweep}) EXPECT_EQ(scene_mode_from_string(to_string(m)), m);
  EXPECT_THROW(scene_mode_from_string("spiral"), Error);
}
