#ifndef MUMLOC_SIMULATOR_HPP
#define MUMLOC_SIMULATOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "mumloc/error.hpp"
#include "mumloc/forward.hpp"
#include "mumloc/grid.hpp"
#include "mumloc/parallel.hpp"
#include "mumloc/psf.hpp"
#include "mumloc/rng.hpp"

namespace mumloc {

struct Molecule {
  Coord3 position;  ///< nm, continuous
  double weight = 1.0;
};

struct Scene {
  std::vector<Molecule> molecules;
};

struct SceneConfig {
  int molecules = 3;
  Coord3 volume{3072.0, 3072.0, 1200.0};
  double weight_min = 0.3;
  double weight_max = 1.0;
  double lateral_margin = 0.0;  ///< keep molecules this far (nm) from the lateral edges
};

struct NoiseConfig {
  double photon_scale = 1.0;    ///< photons per unit intensity
  double gaussian_sigma = 1.0;  ///< read noise, intensity units
  bool enable_poisson = true;
  bool enable_gaussian = true;

  static NoiseConfig noiseless() { return {1.0, 0.0, false, false}; }
};

/// One-turn helix around an axis parallel to z.
struct HelixConfig {
  double center_x = 1536.0;
  double center_y = 1536.0;
  double radius = 600.0;
  double z0 = 0.0;
  double length = 1200.0;  ///< axial rise over the sampled parameter range
  double turns = 1.0;
  int molecules = 3;
  double weight_min = 0.3;
  double weight_max = 1.0;
};

inline void validate(const SceneConfig& c) {
  if (c.molecules < 0) throw Error(ErrorKind::ConfigError, "scene.molecules must be >= 0");
  if (!(c.volume.x > 0 && c.volume.y > 0 && c.volume.z > 0)) {
    throw Error(ErrorKind::ConfigError, "scene.volume must be positive");
  }
  if (!(c.weight_min > 0.0) || !(c.weight_max <= 1.0) || c.weight_min > c.weight_max) {
    throw Error(ErrorKind::ConfigError, "scene weights must satisfy 0 < min <= max <= 1");
  }
  if (c.lateral_margin < 0.0 || 2 * c.lateral_margin >= std::min(c.volume.x, c.volume.y)) {
    throw Error(ErrorKind::ConfigError, "scene.lateral_margin out of range");
  }
}

inline void validate(const NoiseConfig& n) {
  if (n.enable_poisson && !(n.photon_scale > 0.0)) {
    throw Error(ErrorKind::ConfigError, "noise.photon_scale must be > 0 with Poisson noise");
  }
  if (!(n.gaussian_sigma >= 0.0)) throw Error(ErrorKind::ConfigError, "noise.gaussian_sigma must be >= 0");
}

inline void validate(const HelixConfig& h) {
  if (!(h.radius >= 0.0) || !(h.length >= 0.0) || !(h.turns > 0.0) || h.molecules < 0) {
    throw Error(ErrorKind::ConfigError, "helix radius/length must be >= 0, turns > 0, molecules >= 0");
  }
}

/// K molecules uniform over the volume with weights uniform on [min, max].
/// Draw order per molecule: x, y, z, weight.
inline Scene sample_scene(Rng& rng, const SceneConfig& cfg) {
  validate(cfg);
  Scene s;
  s.molecules.reserve(std::size_t(cfg.molecules));
  const double m = cfg.lateral_margin;
  for (int k = 0; k < cfg.molecules; ++k) {
    Molecule mol;
    mol.position.x = rng.uniform(m, cfg.volume.x - m);
    mol.position.y = rng.uniform(m, cfg.volume.y - m);
    mol.position.z = rng.uniform(0.0, cfg.volume.z);
    mol.weight = rng.uniform(cfg.weight_min, cfg.weight_max);
    s.molecules.push_back(mol);
  }
  return s;
}

/// Plane 0 fixed at zero; every other plane draws (dx, dy) uniformly from
/// {-max_drift, ..., max_drift}.
inline DriftSet sample_drifts(Rng& rng, int nplanes, int max_drift) {
  if (max_drift < 0) throw Error(ErrorKind::ConfigError, "max_drift must be >= 0");
  DriftSet d(nplanes);
  for (int p = 1; p < nplanes; ++p) {
    const int dx = rng.uniform_int(-max_drift, max_drift);
    const int dy = rng.uniform_int(-max_drift, max_drift);
    d.set(p, {dx, dy});
  }
  return d;
}

inline Coord3 helix_point(const HelixConfig& h, double t) {
  const double theta = 2.0 * std::numbers::pi * h.turns * t;
  return {h.center_x + h.radius * std::cos(theta), h.center_y + h.radius * std::sin(theta),
          h.z0 + h.length * t};
}

/// Molecules at helix parameters drawn uniformly on [0, 1).
/// Draw order per molecule: t, weight.
inline Scene helix_scene(Rng& rng, const HelixConfig& h) {
  validate(h);
  Scene s;
  for (int k = 0; k < h.molecules; ++k) {
    const double t = rng.uniform();
    Molecule mol;
    mol.position = helix_point(h, t);
    mol.weight = rng.uniform(h.weight_min, h.weight_max);
    s.molecules.push_back(mol);
  }
  return s;
}

/// Noiseless image b + sum_k w_k h(x_i - drift, x_k) using the operator's
/// truncated separable kernel, followed by optional Poisson resampling at
/// photon_scale and additive Gaussian noise (per pixel, in index order).
inline LowResImage render_frame(const Scene& scene, const DriftSet& drifts, const PsfParams& psf,
                                const GridConfig& grid, const NoiseConfig& noise, Rng* rng) {
  validate(grid);
  validate(noise);
  check_drifts(drifts, grid);
  LowResImage y(grid);
  const int nx = grid.nx(), ny = grid.ny();
  std::vector<double> gx(static_cast<std::size_t>(nx)), gy(static_cast<std::size_t>(ny));
  for (int p = 0; p < grid.nplanes(); ++p) {
    const LateralShift s = drifts[p];
    double* out = y.data.data() + std::size_t(p) * grid.plane_size();
    for (const auto& mol : scene.molecules) {
      const double dz = grid.plane_offsets[std::size_t(p)] - mol.position.z;
      const double w = defocus_width(dz, psf);
      const double a = psf.a_prime / (2.0 * std::numbers::pi * w * w);
      for (int ix = 0; ix < nx; ++ix) {
        const double c = (ix + 0.5) * grid.low_voxel[0] - s.dx * grid.high_voxel[0];
        gx[std::size_t(ix)] = truncated_gaussian(c - mol.position.x, w, grid.trunc_sigma);
      }
      for (int iy = 0; iy < ny; ++iy) {
        const double c = (iy + 0.5) * grid.low_voxel[1] - s.dy * grid.high_voxel[1];
        gy[std::size_t(iy)] = truncated_gaussian(c - mol.position.y, w, grid.trunc_sigma);
      }
      const double av = a * mol.weight;
      for (int iy = 0; iy < ny; ++iy) {
        if (gy[std::size_t(iy)] == 0.0) continue;
        const double vy = av * gy[std::size_t(iy)];
        for (int ix = 0; ix < nx; ++ix) out[std::size_t(iy) * std::size_t(nx) + std::size_t(ix)] += vy * gx[std::size_t(ix)];
      }
    }
  }
  if (psf.b != 0.0) {
    for (double& v : y.data) v += psf.b;
  }
  const bool noisy = noise.enable_poisson || (noise.enable_gaussian && noise.gaussian_sigma > 0.0);
  if (noisy) {
    if (rng == nullptr) throw Error(ErrorKind::ConfigError, "noisy rendering needs a random stream");
    for (double& v : y.data) {
      if (noise.enable_poisson) v = double(rng->poisson(v * noise.photon_scale)) / noise.photon_scale;
      if (noise.enable_gaussian && noise.gaussian_sigma > 0.0) v += noise.gaussian_sigma * rng->normal();
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

enum class SceneMode { Random, Helix, Sweep };

inline std::string to_string(SceneMode m) {
  switch (m) {
    case SceneMode::Random: return "random";
    case SceneMode::Helix: return "helix";
    case SceneMode::Sweep: return "sweep";
  }
  return "random";
}

inline SceneMode scene_mode_from_string(const std::string& s) {
  if (s == "random") return SceneMode::Random;
  if (s == "helix") return SceneMode::Helix;
  if (s == "sweep") return SceneMode::Sweep;
  throw Error(ErrorKind::ConfigError, "unknown scene mode '" + s + "' (random|helix|sweep)");
}

struct SimulationConfig {
  GridConfig grid;
  PsfParams psf;
  NoiseConfig noise;
  SceneConfig scene;
  HelixConfig helix;
  SceneMode mode = SceneMode::Random;
  int frames = 10;       ///< frames per batch; all frames of a batch share one drift set
  int batches = 1;
  int drift_range = 2;   ///< sampled drifts lie in [-drift_range, drift_range]
};

inline void validate(const SimulationConfig& c) {
  validate(c.grid);
  validate(c.noise);
  validate(c.scene);
  validate(c.helix);
  if (c.frames < 1 || c.batches < 1) throw Error(ErrorKind::ConfigError, "frames and batches must be >= 1");
  if (c.drift_range < 0 || c.drift_range > c.grid.max_drift) {
    throw Error(ErrorKind::ConfigError, "drift_range must lie in [0, grid.max_drift]");
  }
  // Molecules sit anywhere in [0, volume.z], not only at voxel centres.
  const auto [pl, ph] = std::minmax_element(c.grid.plane_offsets.begin(), c.grid.plane_offsets.end());
  const double zmax = std::max({c.scene.volume.z, c.helix.z0 + c.helix.length, c.grid.extent().z});
  validate(c.psf, *pl - zmax, *ph - std::min(0.0, c.helix.z0));
}

struct Frame {
  LowResImage image;
  Scene scene;
  int batch = 0;
};

struct Dataset {
  SimulationConfig config;
  std::uint64_t seed = 0;
  std::vector<DriftSet> batch_drifts;
  std::vector<Frame> frames;

  int frames_per_batch() const { return config.frames; }
  int num_batches() const { return int(batch_drifts.size()); }
};

/// Single molecule for frame `t` of a depth sweep. Depth strata are
/// interleaved across batches so each batch spans the full axial range.
inline Scene sweep_scene(Rng& rng, const SimulationConfig& cfg, int t) {
  const int total = cfg.frames * cfg.batches;
  const int batch = t / cfg.frames;
  const int k = t % cfg.frames;
  const int stratum = k * cfg.batches + batch;
  const double m = cfg.scene.lateral_margin;
  Molecule mol;
  mol.position.x = rng.uniform(m, cfg.scene.volume.x - m);
  mol.position.y = rng.uniform(m, cfg.scene.volume.y - m);
  mol.position.z = (stratum + rng.uniform()) * cfg.scene.volume.z / total;
  mol.weight = rng.uniform(cfg.scene.weight_min, cfg.scene.weight_max);
  return Scene{{mol}};
}

/// Generates cfg.batches x cfg.frames frames. Streams: drifts of batch b
/// from (Drift, b); scene of frame t from (Scene|Helix, t); noise of frame t
/// from (Noise, t). Output is identical for any thread count.
inline Dataset generate_dataset(const SimulationConfig& cfg, std::uint64_t seed, int threads = 1) {
  validate(cfg);
  Dataset ds;
  ds.config = cfg;
  ds.seed = seed;
  for (int b = 0; b < cfg.batches; ++b) {
    Rng rng(seed, StreamPurpose::Drift, std::uint32_t(b));
    ds.batch_drifts.push_back(sample_drifts(rng, cfg.grid.nplanes(), cfg.drift_range));
  }
  const std::size_t total = std::size_t(cfg.frames) * std::size_t(cfg.batches);
  ds.frames.resize(total);
  parallel_for(total, threads, [&](std::size_t t) {
    Frame& f = ds.frames[t];
    f.batch = int(t) / cfg.frames;
    switch (cfg.mode) {
      case SceneMode::Random: {
        Rng rng(seed, StreamPurpose::Scene, std::uint32_t(t));
        f.scene = sample_scene(rng, cfg.scene);
        break;
      }
      case SceneMode::Helix: {
        Rng rng(seed, StreamPurpose::Helix, std::uint32_t(t));
        f.scene = helix_scene(rng, cfg.helix);
        break;
      }
      case SceneMode::Sweep: {
        Rng rng(seed, StreamPurpose::Scene, std::uint32_t(t));
        f.scene = sweep_scene(rng, cfg, int(t));
        break;
      }
    }
    Rng noise(seed, StreamPurpose::Noise, std::uint32_t(t));
    f.image = render_frame(f.scene, ds.batch_drifts[std::size_t(f.batch)], cfg.psf, cfg.grid, cfg.noise, &noise);
  });
  return ds;
}

/// Single batch of T frames.
inline Dataset generate_dataset(int T, SimulationConfig cfg, std::uint64_t seed, int threads = 1) {
  if (T < 1) throw Error(ErrorKind::ConfigError, "T must be >= 1");
  cfg.frames = T;
  cfg.batches = 1;
  return generate_dataset(cfg, seed, threads);
}

}  // namespace mumloc

#endif  // MUMLOC_SIMULATOR_HPP
