#ifndef MUMLOC_EVALUATION_HPP
#define MUMLOC_EVALUATION_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "mumloc/error.hpp"
#include "mumloc/grid.hpp"
#include "mumloc/psf.hpp"
#include "mumloc/simulator.hpp"
#include "mumloc/solver.hpp"

namespace mumloc {

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

enum class MatchMode { Greedy, Optimal };

struct MatchConfig {
  double lateral_radius = 48.0;  ///< nm
  double axial_radius = 100.0;   ///< nm
  MatchMode matching = MatchMode::Greedy;
};

inline void validate(const MatchConfig& c) {
  if (!(c.lateral_radius >= 0.0) || !(c.axial_radius >= 0.0)) {
    throw Error(ErrorKind::ConfigError, "match radii must be >= 0");
  }
}

inline std::string to_string(MatchMode m) { return m == MatchMode::Greedy ? "greedy" : "optimal"; }

inline MatchMode match_mode_from_string(const std::string& s) {
  if (s == "greedy") return MatchMode::Greedy;
  if (s == "optimal") return MatchMode::Optimal;
  throw Error(ErrorKind::ConfigError, "unknown matching '" + s + "' (greedy|optimal)");
}

/// Offset b - a measured in units of the match radii: lateral components in
/// lateral_radius, axial in axial_radius. A zero radius admits only an exact
/// coordinate match along that axis.
inline double normalized_distance(Coord3 a, Coord3 b, const MatchConfig& c) {
  auto scaled = [](double d, double r) {
    if (r > 0.0) return d / r;
    return d == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  };
  const double x = scaled(b.x - a.x, c.lateral_radius);
  const double y = scaled(b.y - a.y, c.lateral_radius);
  const double z = scaled(b.z - a.z, c.axial_radius);
  return std::sqrt(x * x + y * y + z * z);
}

struct MatchPair {
  int truth = 0;
  int det = 0;
  double distance = 0.0;  ///< normalized
};

/// One-to-one assignment between truth and detected positions (nm).
struct Matching {
  std::vector<Coord3> truth;
  std::vector<Coord3> det;
  std::vector<MatchPair> pairs;  ///< sorted by truth index
  std::vector<int> missed;       ///< unmatched truth indices, ascending
  std::vector<int> spurious;     ///< unmatched detection indices, ascending

  double total_distance() const {
    double s = 0.0;
    for (const auto& p : pairs) s += p.distance;
    return s;
  }
};

namespace detail {

// Minimum-cost assignment of every row to a distinct column (rows <= cols),
// Kuhn-Munkres with potentials. Returns the column of each row.
inline std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  const std::size_t m = n == 0 ? 0 : cost[0].size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = int(j - 1);
  return row_to_col;
}

inline void finish_matching(Matching& mt) {
  std::sort(mt.pairs.begin(), mt.pairs.end(), [](const MatchPair& a, const MatchPair& b) { return a.truth < b.truth; });
  std::vector<char> t_used(mt.truth.size(), 0), d_used(mt.det.size(), 0);
  for (const auto& p : mt.pairs) {
    t_used[std::size_t(p.truth)] = 1;
    d_used[std::size_t(p.det)] = 1;
  }
  for (std::size_t i = 0; i < t_used.size(); ++i)
    if (!t_used[i]) mt.missed.push_back(int(i));
  for (std::size_t i = 0; i < d_used.size(); ++i)
    if (!d_used[i]) mt.spurious.push_back(int(i));
}

}  // namespace detail

/// Pairs truth and detections whose normalized distance is at most 1.
///
/// Greedy: all admissible pairs sorted by distance, then truth index, then
/// detection coordinates, and accepted while both ends are free. Optimal:
/// the largest matching with the least total distance (Hungarian).
inline Matching match_detections(std::span<const Coord3> truth, std::span<const Coord3> det, const MatchConfig& cfg) {
  validate(cfg);
  Matching mt;
  mt.truth.assign(truth.begin(), truth.end());
  mt.det.assign(det.begin(), det.end());
  if (cfg.matching == MatchMode::Greedy) {
    std::vector<MatchPair> cand;
    for (std::size_t i = 0; i < truth.size(); ++i)
      for (std::size_t j = 0; j < det.size(); ++j) {
        const double d = normalized_distance(truth[i], det[j], cfg);
        if (d <= 1.0) cand.push_back({int(i), int(j), d});
      }
    std::sort(cand.begin(), cand.end(), [&](const MatchPair& a, const MatchPair& b) {
      const Coord3 &pa = det[std::size_t(a.det)], &pb = det[std::size_t(b.det)];
      return std::tie(a.distance, a.truth, pa.x, pa.y, pa.z, a.det) <
             std::tie(b.distance, b.truth, pb.x, pb.y, pb.z, b.det);
    });
    std::vector<char> t_used(truth.size(), 0), d_used(det.size(), 0);
    for (const auto& c : cand) {
      if (t_used[std::size_t(c.truth)] || d_used[std::size_t(c.det)]) continue;
      t_used[std::size_t(c.truth)] = d_used[std::size_t(c.det)] = 1;
      mt.pairs.push_back(c);
    }
  } else if (!truth.empty() && !det.empty()) {
    // Inadmissible pairs cost more than any full set of admissible ones, so
    // the assignment first maximizes the number of matches.
    const bool rows_are_truth = truth.size() <= det.size();
    const std::size_t nr = rows_are_truth ? truth.size() : det.size();
    const std::size_t nc = rows_are_truth ? det.size() : truth.size();
    const double forbid = 2.0 * double(nr + 1);
    std::vector<std::vector<double>> cost(nr, std::vector<double>(nc));
    for (std::size_t r = 0; r < nr; ++r)
      for (std::size_t c = 0; c < nc; ++c) {
        const std::size_t ti = rows_are_truth ? r : c, di = rows_are_truth ? c : r;
        const double d = normalized_distance(truth[ti], det[di], cfg);
        cost[r][c] = d <= 1.0 ? d : forbid;
      }
    const auto assign = detail::hungarian(cost);
    for (std::size_t r = 0; r < nr; ++r) {
      const int c = assign[r];
      if (c < 0 || cost[r][std::size_t(c)] >= forbid) continue;
      const int ti = rows_are_truth ? int(r) : c, di = rows_are_truth ? c : int(r);
      mt.pairs.push_back({ti, di, cost[r][std::size_t(c)]});
    }
  }
  detail::finish_matching(mt);
  return mt;
}

/// Frame-by-frame pairing for single-molecule sweeps: the first truth of
/// each frame with that frame's top detection, with no radius. Frames
/// without a detection count as missed.
inline Matching match_top1(std::span<const Coord3> truth, std::span<const std::optional<Coord3>> det) {
  if (truth.size() != det.size()) throw Error(ErrorKind::GridMismatch, "truth and detection frame counts differ");
  Matching mt;
  mt.truth.assign(truth.begin(), truth.end());
  for (std::size_t t = 0; t < truth.size(); ++t) {
    if (!det[t]) continue;
    mt.pairs.push_back({int(t), int(mt.det.size()), 0.0});
    mt.det.push_back(*det[t]);
  }
  detail::finish_matching(mt);
  return mt;
}

// ---------------------------------------------------------------------------
// Error statistics
// ---------------------------------------------------------------------------

/// Mean absolute error with its normal-approximation 95% half-width
/// 1.96 sd / sqrt(n). The half-width is NaN below two samples.
struct AxisError {
  double mean = 0.0;
  double ci = std::numeric_limits<double>::quiet_NaN();
};

struct BinErrors {
  double depth_lo = 0.0;  ///< nm, inclusive
  double depth_hi = 0.0;  ///< nm, exclusive except for the last bin
  int matched = 0;
  int missed = 0;
  int spurious = 0;       ///< binned by detected depth
  bool empty = true;      ///< no matches; means are not defined
  std::array<AxisError, 3> axes{};
};

struct ErrorReport {
  std::vector<BinErrors> bins;
  BinErrors overall;
  double jaccard = 0.0;  ///< matched / (matched + missed + spurious); 1 when all are zero
};

inline AxisError axis_error(std::span<const double> abs_err) {
  AxisError e;
  const std::size_t n = abs_err.size();
  if (n == 0) {
    e.mean = std::numeric_limits<double>::quiet_NaN();
    return e;
  }
  e.mean = std::accumulate(abs_err.begin(), abs_err.end(), 0.0) / double(n);
  if (n >= 2) {
    double ss = 0.0;
    for (double v : abs_err) ss += (v - e.mean) * (v - e.mean);
    e.ci = 1.96 * std::sqrt(ss / double(n - 1)) / std::sqrt(double(n));
  }
  return e;
}

/// Depth bins of `width` nm covering [lo, hi).
inline std::vector<double> uniform_bins(double lo, double hi, double width) {
  if (!(width > 0.0) || !(hi > lo)) throw Error(ErrorKind::ConfigError, "bins need hi > lo and width > 0");
  std::vector<double> edges;
  const int n = int(std::ceil((hi - lo) / width - 1e-9));
  for (int k = 0; k <= n; ++k) edges.push_back(std::min(hi, lo + k * width));
  return edges;
}

/// Per-axis errors |det - truth| binned by true depth (edges ascending, at
/// least two). Truths outside the edges only enter the overall figures.
inline ErrorReport per_axis_errors(const Matching& mt, std::span<const double> edges) {
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end())) {
    throw Error(ErrorKind::ConfigError, "depth bins need >= 2 ascending edges");
  }
  const std::size_t nb = edges.size() - 1;
  auto bin_of = [&](double z) -> std::optional<std::size_t> {
    if (z < edges.front() || z > edges.back()) return std::nullopt;
    const auto it = std::upper_bound(edges.begin(), edges.end(), z);
    const std::size_t k = std::size_t(it - edges.begin());
    return k == 0 ? 0 : std::min(k - 1, nb - 1);
  };

  std::vector<std::array<std::vector<double>, 3>> errs(nb + 1);  // last slot: overall
  ErrorReport rep;
  rep.bins.resize(nb);
  for (std::size_t k = 0; k < nb; ++k) {
    rep.bins[k].depth_lo = edges[k];
    rep.bins[k].depth_hi = edges[k + 1];
  }
  rep.overall.depth_lo = edges.front();
  rep.overall.depth_hi = edges.back();
  for (const auto& p : mt.pairs) {
    const Coord3 t = mt.truth[std::size_t(p.truth)], d = mt.det[std::size_t(p.det)];
    const std::array<double, 3> e{std::abs(d.x - t.x), std::abs(d.y - t.y), std::abs(d.z - t.z)};
    for (int a = 0; a < 3; ++a) errs[nb][std::size_t(a)].push_back(e[std::size_t(a)]);
    ++rep.overall.matched;
    if (const auto k = bin_of(t.z)) {
      for (int a = 0; a < 3; ++a) errs[*k][std::size_t(a)].push_back(e[std::size_t(a)]);
      ++rep.bins[*k].matched;
    }
  }
  for (int i : mt.missed) {
    ++rep.overall.missed;
    if (const auto k = bin_of(mt.truth[std::size_t(i)].z)) ++rep.bins[*k].missed;
  }
  for (int i : mt.spurious) {
    ++rep.overall.spurious;
    if (const auto k = bin_of(mt.det[std::size_t(i)].z)) ++rep.bins[*k].spurious;
  }
  auto fill = [](BinErrors& b, const std::array<std::vector<double>, 3>& e) {
    b.empty = b.matched == 0;
    for (std::size_t a = 0; a < 3; ++a) b.axes[a] = axis_error(e[a]);
  };
  for (std::size_t k = 0; k < nb; ++k) fill(rep.bins[k], errs[k]);
  fill(rep.overall, errs[nb]);
  const int denom = rep.overall.matched + rep.overall.missed + rep.overall.spurious;
  rep.jaccard = denom == 0 ? 1.0 : double(rep.overall.matched) / double(denom);
  return rep;
}

/// Truth positions snapped to the centre of their nearest high-res voxel.
inline std::vector<Coord3> voxelized_truth(const Scene& s, const GridConfig& g) {
  std::vector<Coord3> out;
  for (const auto& m : s.molecules) {
    const auto v = g.nearest_voxel(m.position);
    out.push_back(g.high_center(v[0], v[1], v[2]));
  }
  return out;
}

inline std::vector<Coord3> detection_positions(std::span<const Detection> det, const GridConfig& g) {
  std::vector<Coord3> out;
  for (const auto& d : det) out.push_back(g.high_center(d.voxel));
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction
// ---------------------------------------------------------------------------

/// Per-voxel hit counts of detections merged over frames.
struct Reconstruction {
  GridConfig grid;
  std::vector<std::uint32_t> hits;

  Reconstruction() = default;
  explicit Reconstruction(GridConfig g) : grid(std::move(g)), hits(grid.n_high(), 0) {}

  bool occupied(std::size_t j) const { return hits[j] > 0; }
  std::size_t occupied_count() const {
    return std::size_t(std::count_if(hits.begin(), hits.end(), [](std::uint32_t h) { return h > 0; }));
  }
  std::uint64_t total_hits() const { return std::accumulate(hits.begin(), hits.end(), std::uint64_t(0)); }

  /// Adds another reconstruction's hits; occupancy of `*this` merged with
  /// itself is unchanged.
  void merge(const Reconstruction& other) {
    detail::check_grid(grid, other.grid, "reconstruction merge");
    for (std::size_t j = 0; j < hits.size(); ++j) hits[j] += other.hits[j];
  }

  /// 8-bit occupancy image of slice jz (255 occupied, 0 empty), row-major.
  std::vector<std::uint8_t> slice_occupancy(int jz) const {
    if (jz < 0 || jz >= grid.mz()) throw Error(ErrorKind::GridMismatch, "slice index out of range");
    const std::size_t s = grid.slice_size();
    std::vector<std::uint8_t> img(s);
    for (std::size_t k = 0; k < s; ++k) img[k] = hits[std::size_t(jz) * s + k] > 0 ? 255 : 0;
    return img;
  }
};

inline Reconstruction reconstruct(std::span<const std::vector<Detection>> frames, const GridConfig& grid) {
  Reconstruction rec(grid);
  for (const auto& f : frames)
    for (const auto& d : f) {
      if (d.voxel < 0 || std::size_t(d.voxel) >= rec.hits.size()) {
        throw Error(ErrorKind::GridMismatch, "detection voxel " + std::to_string(d.voxel) + " outside the grid");
      }
      ++rec.hits[std::size_t(d.voxel)];
    }
  return rec;
}

/// Distance from p to the helix in voxel units, max over axes of
/// |offset| / voxel pitch, minimized over the curve parameter by dense
/// sampling (step below a tenth of the smallest pitch) and golden refinement.
inline double helix_voxel_distance(const HelixConfig& h, Coord3 p, const GridConfig& g) {
  auto dist = [&](double t) {
    const Coord3 c = helix_point(h, t);
    return std::max({std::abs(p.x - c.x) / g.high_voxel[0], std::abs(p.y - c.y) / g.high_voxel[1],
                     std::abs(p.z - c.z) / g.high_voxel[2]});
  };
  const double arc = std::hypot(2.0 * std::numbers::pi * h.radius * h.turns, h.length);
  const double pitch = std::min({g.high_voxel[0], g.high_voxel[1], g.high_voxel[2]});
  const int n = std::max(64, int(std::ceil(10.0 * arc / pitch)));
  int best = 0;
  double best_d = dist(0.0);
  for (int k = 1; k <= n; ++k) {
    const double d = dist(double(k) / n);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  double lo = std::max(0.0, double(best - 1) / n), hi = std::min(1.0, double(best + 1) / n);
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  for (int it = 0; it < 60; ++it) {
    const double a = hi - phi * (hi - lo), b = lo + phi * (hi - lo);
    if (dist(a) < dist(b)) hi = b;
    else lo = a;
  }
  return std::min(best_d, dist(0.5 * (lo + hi)));
}

struct HelixScore {
  std::size_t occupied = 0;
  std::size_t occupied_near = 0;  ///< within one voxel of the curve
  std::uint64_t hits = 0;
  std::uint64_t hits_near = 0;
  double occupied_fraction() const { return occupied == 0 ? 0.0 : double(occupied_near) / double(occupied); }
  double hit_fraction() const { return hits == 0 ? 0.0 : double(hits_near) / double(hits); }
};

inline HelixScore score_helix(const Reconstruction& rec, const HelixConfig& h) {
  HelixScore s;
  for (std::size_t j = 0; j < rec.hits.size(); ++j) {
    if (rec.hits[j] == 0) continue;
    const bool near = helix_voxel_distance(h, rec.grid.high_center(std::int64_t(j)), rec.grid) <= 1.0;
    ++s.occupied;
    s.hits += rec.hits[j];
    if (near) {
      ++s.occupied_near;
      s.hits_near += rec.hits[j];
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

/// Published dense-solver throughput for one 16x16x4 frame, kept as context.
inline constexpr double kReferenceDenseFps = 1.45e-3;

struct TimingRun {
  std::string label;
  std::size_t pixels = 0;  ///< low-res samples per frame
  int frames = 0;
  double seconds = 0.0;
  double fps() const { return seconds > 0.0 ? frames / seconds : std::numeric_limits<double>::infinity(); }
};

struct TimingRow {
  std::string label;
  std::size_t pixels = 0;
  double fps = 0.0;
  bool reference = false;
};

struct TimingReport {
  std::vector<TimingRow> rows;
  /// k in fps ~ pixels^-k from a least-squares fit of log fps on log pixels
  /// over the measured rows; ideal inverse-proportional scaling gives 1.
  std::optional<double> exponent;
};

inline TimingReport timing_report(std::span<const TimingRun> runs) {
  if (runs.empty()) throw Error(ErrorKind::ConfigError, "timing report needs at least one run");
  TimingReport rep;
  std::vector<double> lx, ly;
  for (const auto& r : runs) {
    rep.rows.push_back({r.label, r.pixels, r.fps(), false});
    if (r.pixels > 0 && r.seconds > 0.0 && r.frames > 0) {
      lx.push_back(std::log(double(r.pixels)));
      ly.push_back(std::log(r.fps()));
    }
  }
  const double mx = lx.empty() ? 0.0 : std::accumulate(lx.begin(), lx.end(), 0.0) / double(lx.size());
  const double my = ly.empty() ? 0.0 : std::accumulate(ly.begin(), ly.end(), 0.0) / double(ly.size());
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t k = 0; k < lx.size(); ++k) {
    sxx += (lx[k] - mx) * (lx[k] - mx);
    sxy += (lx[k] - mx) * (ly[k] - my);
  }
  if (sxx > 0.0) rep.exponent = -sxy / sxx;
  rep.rows.push_back({"reference dense solver (published)", 1024, kReferenceDenseFps, true});
  return rep;
}

}  // namespace mumloc

#endif  // MUMLOC_EVALUATION_HPP
