#ifndef MUMLOC_GRID_HPP
#define MUMLOC_GRID_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <vector>

#include "mumloc/error.hpp"
#include "mumloc/psf.hpp"

namespace mumloc {

/// Geometry of the camera (low-resolution) and reconstruction
/// (high-resolution) voxel grids.
///
/// Low-res sample (ix, iy, plane) sits at ((ix+.5) px, (iy+.5) py, plane_offsets[plane]);
/// high-res voxel (jx, jy, jz) is centred at ((jx+.5) hx, (jy+.5) hy, (jz+.5) hz).
/// Both grids start at the origin and cover the same lateral region.
///
/// Flat indices are plane-major then row-major with x fastest:
///   i = (plane * ny + iy) * nx + ix,   j = (jz * my + jy) * mx + jx.
struct GridConfig {
  std::array<int, 3> low_dims{16, 16, 4};       ///< nx, ny, nplanes
  std::array<int, 3> high_dims{128, 128, 32};   ///< mx, my, mz
  std::array<double, 3> low_voxel{192.0, 192.0, 400.0};
  std::array<double, 3> high_voxel{24.0, 24.0, 50.0};
  std::vector<double> plane_offsets{0.0, 400.0, 800.0, 1200.0};
  int max_drift = 2;          ///< bound on |drift| per axis, high-res voxels
  double trunc_sigma = 4.0;   ///< PSF support half-width in units of w(dz)

  int nx() const { return low_dims[0]; }
  int ny() const { return low_dims[1]; }
  int nplanes() const { return low_dims[2]; }
  int mx() const { return high_dims[0]; }
  int my() const { return high_dims[1]; }
  int mz() const { return high_dims[2]; }

  std::size_t plane_size() const { return std::size_t(nx()) * std::size_t(ny()); }
  std::size_t slice_size() const { return std::size_t(mx()) * std::size_t(my()); }
  std::size_t n_low() const { return plane_size() * std::size_t(nplanes()); }
  std::size_t n_high() const { return slice_size() * std::size_t(mz()); }

  int scale_x() const { return int(std::lround(low_voxel[0] / high_voxel[0])); }
  int scale_y() const { return int(std::lround(low_voxel[1] / high_voxel[1])); }

  Coord3 extent() const {
    return {mx() * high_voxel[0], my() * high_voxel[1], mz() * high_voxel[2]};
  }

  Coord3 low_center(int ix, int iy, int plane) const {
    return {(ix + 0.5) * low_voxel[0], (iy + 0.5) * low_voxel[1],
            plane_offsets[std::size_t(plane)]};
  }
  Coord3 high_center(int jx, int jy, int jz) const {
    return {(jx + 0.5) * high_voxel[0], (jy + 0.5) * high_voxel[1], (jz + 0.5) * high_voxel[2]};
  }
  Coord3 high_center(std::int64_t j) const {
    const auto v = high_index3(j);
    return high_center(v[0], v[1], v[2]);
  }

  std::int64_t high_index(int jx, int jy, int jz) const {
    return (std::int64_t(jz) * my() + jy) * mx() + jx;
  }
  std::array<int, 3> high_index3(std::int64_t j) const {
    const std::int64_t s = std::int64_t(slice_size());
    const int jz = int(j / s);
    const std::int64_t rem = j % s;
    return {int(rem % mx()), int(rem / mx()), jz};
  }
  bool in_bounds(int jx, int jy, int jz) const {
    return jx >= 0 && jy >= 0 && jz >= 0 && jx < mx() && jy < my() && jz < mz();
  }

  /// Voxel containing `p`, clamped to the grid.
  std::array<int, 3> nearest_voxel(Coord3 p) const {
    auto clampi = [](double v, int n) {
      const int i = int(std::floor(v));
      return i < 0 ? 0 : (i >= n ? n - 1 : i);
    };
    return {clampi(p.x / high_voxel[0], mx()), clampi(p.y / high_voxel[1], my()),
            clampi(p.z / high_voxel[2], mz())};
  }

  /// Full instrument field: 16x16x4 camera samples, 128x128x32 voxels.
  static GridConfig full() { return GridConfig{}; }

  /// Full geometry with the lateral field halved (8x8x4 -> 64x64x32).
  static GridConfig half() {
    GridConfig g;
    g.low_dims = {8, 8, 4};
    g.high_dims = {64, 64, 32};
    return g;
  }

  /// Field of `n`x`n` camera pixels at the instrument pitch.
  static GridConfig square(int n) {
    GridConfig g;
    g.low_dims = {n, n, 4};
    g.high_dims = {8 * n, 8 * n, 32};
    return g;
  }

  friend bool operator==(const GridConfig&, const GridConfig&) = default;
};

inline void validate(const GridConfig& g) {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::ConfigError, "grid: " + m); };
  for (int k = 0; k < 3; ++k) {
    if (g.low_dims[std::size_t(k)] < 1 || g.high_dims[std::size_t(k)] < 1) fail("dimensions must be >= 1");
    if (!(g.low_voxel[std::size_t(k)] > 0.0) || !(g.high_voxel[std::size_t(k)] > 0.0)) fail("voxel pitch must be > 0");
  }
  if (std::size_t(g.nplanes()) != g.plane_offsets.size()) fail("nplanes must equal plane_offsets length");
  for (int k = 0; k < 2; ++k) {
    const double ratio = g.low_voxel[std::size_t(k)] / g.high_voxel[std::size_t(k)];
    if (std::abs(ratio - std::round(ratio)) > 1e-9 || std::round(ratio) < 1.0) {
      fail("lateral scaling factor must be a positive integer");
    }
    const double low_extent = g.low_dims[std::size_t(k)] * g.low_voxel[std::size_t(k)];
    const double high_extent = g.high_dims[std::size_t(k)] * g.high_voxel[std::size_t(k)];
    if (std::abs(low_extent - high_extent) > 1e-9 * high_extent) {
      fail("low- and high-resolution grids must span the same lateral region");
    }
  }
  if (g.max_drift < 0) fail("max_drift must be >= 0");
  if (!(g.trunc_sigma > 0.0)) fail("trunc_sigma must be > 0");
}

/// Integer lateral shift in high-resolution voxels.
struct LateralShift {
  int dx = 0;
  int dy = 0;
  friend bool operator==(const LateralShift&, const LateralShift&) = default;
  friend auto operator<=>(const LateralShift&, const LateralShift&) = default;
};

/// Lateral drift of every focal plane relative to plane 0, which is the
/// reference and always (0, 0).
class DriftSet {
 public:
  DriftSet() = default;
  explicit DriftSet(int nplanes) : shifts_(std::size_t(nplanes > 0 ? nplanes : 0)) {}
  explicit DriftSet(std::vector<LateralShift> shifts) : shifts_(std::move(shifts)) {
    if (!shifts_.empty() && shifts_[0] != LateralShift{}) {
      throw Error(ErrorKind::DriftOutOfRange, "reference plane drift must be (0, 0)");
    }
  }

  int nplanes() const { return int(shifts_.size()); }
  const LateralShift& operator[](int plane) const { return shifts_[std::size_t(plane)]; }
  void set(int plane, LateralShift s) {
    if (plane == 0 && s != LateralShift{}) {
      throw Error(ErrorKind::DriftOutOfRange, "reference plane drift must be (0, 0)");
    }
    shifts_[std::size_t(plane)] = s;
  }
  const std::vector<LateralShift>& shifts() const { return shifts_; }

  int max_abs() const {
    int m = 0;
    for (const auto& s : shifts_) m = std::max({m, std::abs(s.dx), std::abs(s.dy)});
    return m;
  }

  friend bool operator==(const DriftSet&, const DriftSet&) = default;

 private:
  std::vector<LateralShift> shifts_;
};

inline void check_drifts(const DriftSet& drifts, const GridConfig& g) {
  if (drifts.nplanes() != g.nplanes()) {
    throw Error(ErrorKind::GridMismatch, "drift set has " + std::to_string(drifts.nplanes()) +
                                             " planes, grid has " + std::to_string(g.nplanes()));
  }
  if (drifts.max_abs() > g.max_drift) {
    throw Error(ErrorKind::DriftOutOfRange, "drift magnitude " + std::to_string(drifts.max_abs()) +
                                                " exceeds max_drift " + std::to_string(g.max_drift));
  }
}

/// Dense high-resolution volume (molecule weights, or an adjoint image).
struct WeightVolume {
  GridConfig grid;
  std::vector<double> data;

  WeightVolume() = default;
  explicit WeightVolume(GridConfig g) : grid(std::move(g)), data(grid.n_high(), 0.0) {}

  double& operator[](std::size_t j) { return data[j]; }
  double operator[](std::size_t j) const { return data[j]; }
  std::size_t size() const { return data.size(); }
};

/// Dense multi-plane camera image.
struct LowResImage {
  GridConfig grid;
  std::vector<double> data;

  LowResImage() = default;
  explicit LowResImage(GridConfig g) : grid(std::move(g)), data(grid.n_low(), 0.0) {}

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  std::size_t size() const { return data.size(); }
};

/// Sparse weights: voxel indices in ascending order with their values.
struct SparseWeights {
  std::vector<std::int64_t> index;
  std::vector<double> value;

  std::size_t nnz() const { return index.size(); }
  bool empty() const { return index.empty(); }

  static SparseWeights from_dense(const std::vector<double>& dense) {
    SparseWeights s;
    for (std::size_t j = 0; j < dense.size(); ++j) {
      if (dense[j] != 0.0) {
        s.index.push_back(std::int64_t(j));
        s.value.push_back(dense[j]);
      }
    }
    return s;
  }

  std::vector<double> to_dense(std::size_t m) const {
    std::vector<double> d(m, 0.0);
    for (std::size_t k = 0; k < index.size(); ++k) d[std::size_t(index[k])] = value[k];
    return d;
  }

  double l1() const {
    double s = 0.0;
    for (double v : value) s += std::abs(v);
    return s;
  }

  friend bool operator==(const SparseWeights&, const SparseWeights&) = default;
};

}  // namespace mumloc

#endif  // MUMLOC_GRID_HPP
