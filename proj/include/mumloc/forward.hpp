#ifndef MUMLOC_FORWARD_HPP
#define MUMLOC_FORWARD_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mumloc/error.hpp"
#include "mumloc/grid.hpp"
#include "mumloc/psf.hpp"

namespace mumloc {

/// Banded table of one lateral factor of the PSF for one (plane, slice)
/// block: value(i, j) = g(c_i - x_j) where c_i is the drift-shifted camera
/// coordinate and x_j the voxel centre. The low pitch is R whole high
/// pitches, so c_i - x_j = h (R i - j - shift + (R - 1) / 2) depends only on
/// o = R i - j - shift and one short kernel over o serves every row. For
/// each camera index the nonzero voxel indices form the interval
/// [row_lo, row_hi); for each voxel index the camera indices form
/// [col_lo, col_hi).
class AxisTable {
 public:
  AxisTable() = default;

  AxisTable(int n_low, int n_high, double low_pitch, double high_pitch, int shift, double width,
            double trunc_sigma)
      : n_low_(n_low), n_high_(n_high), ratio_(int(std::lround(low_pitch / high_pitch))), shift_(shift) {
    if (ratio_ < 1 || std::abs(ratio_ * high_pitch - low_pitch) > 1e-9 * low_pitch) {
      throw Error(ErrorKind::GridMismatch, "low pitch must be a whole multiple of the high pitch");
    }
    const double centre = 0.5 * (ratio_ - 1);
    auto value = [&](int o) { return truncated_gaussian(high_pitch * (o + centre), width, trunc_sigma); };
    // The truncated Gaussian is nonzero on one interval of o around -centre.
    const int reach = int(std::ceil(trunc_sigma * width / high_pitch)) + ratio_ + 1;
    int lo = -reach, hi = reach;
    while (lo <= hi && value(lo) == 0.0) ++lo;
    while (hi >= lo && value(hi) == 0.0) --hi;
    o_max_ = hi;
    // Stored reversed so that a row is contiguous in increasing voxel index.
    for (int o = hi; o >= lo; --o) kernel_.push_back(value(o));
  }

  int row_lo(int i) const { return std::max(0, base(i)); }
  int row_hi(int i) const { return std::clamp(base(i) + len(), 0, n_high_); }
  int col_lo(int j) const { return std::clamp(floor_div(j + shift_ + o_max_ - len(), ratio_) + 1, 0, n_low_); }
  int col_hi(int j) const { return std::clamp(floor_div(j + shift_ + o_max_, ratio_) + 1, 0, n_low_); }

  /// Values for camera index i, covering voxel indices [row_lo(i), row_hi(i)).
  const double* row(int i) const { return kernel_.data() + (row_lo(i) - base(i)); }

  double at(int i, int j) const {
    const int q = j - base(i);
    if (j < 0 || j >= n_high_ || q < 0 || q >= len()) return 0.0;
    return kernel_[std::size_t(q)];
  }

 private:
  static int floor_div(int a, int b) { return a / b - ((a % b != 0) && ((a < 0) != (b < 0))); }
  int len() const { return int(kernel_.size()); }
  // Voxel index of kernel_[0] in row i.
  int base(int i) const { return ratio_ * i - shift_ - o_max_; }

  int n_low_ = 0;
  int n_high_ = 0;
  int ratio_ = 1;
  int shift_ = 0;
  int o_max_ = 0;
  std::vector<double> kernel_;
};

/// Observation operator of a single focal plane with a fixed lateral drift.
///
/// Row (iy, ix) and column (jx, jy, jz) hold
///   a(dz) * g(cx - x_j) * g(cy - y_j),  c = camera centre - drift,
/// which is the separable form of the PSF with each lateral factor
/// truncated at trunc_sigma widths.
class PlaneKernel {
 public:
  PlaneKernel() = default;

  PlaneKernel(const GridConfig& grid, const PsfParams& psf, int plane, LateralShift shift)
      : nx_(grid.nx()), ny_(grid.ny()), mx_(grid.mx()), my_(grid.my()), mz_(grid.mz()),
        plane_(plane), shift_(shift) {
    amplitude_.resize(std::size_t(mz_));
    tx_.resize(std::size_t(mz_));
    ty_.resize(std::size_t(mz_));
    const double zp = grid.plane_offsets[std::size_t(plane)];
    for (int jz = 0; jz < mz_; ++jz) {
      const double dz = zp - (jz + 0.5) * grid.high_voxel[2];
      const double w = defocus_width(dz, psf);
      amplitude_[std::size_t(jz)] = psf.a_prime / (2.0 * std::numbers::pi * w * w);
      tx_[std::size_t(jz)] = AxisTable(nx_, mx_, grid.low_voxel[0], grid.high_voxel[0], shift.dx,
                                       w, grid.trunc_sigma);
      ty_[std::size_t(jz)] = AxisTable(ny_, my_, grid.low_voxel[1], grid.high_voxel[1], shift.dy,
                                       w, grid.trunc_sigma);
    }
  }

  int plane() const { return plane_; }
  LateralShift shift() const { return shift_; }
  double amplitude(int jz) const { return amplitude_[std::size_t(jz)]; }
  const AxisTable& table_x(int jz) const { return tx_[std::size_t(jz)]; }
  const AxisTable& table_y(int jz) const { return ty_[std::size_t(jz)]; }

  double entry(int ix, int iy, int jx, int jy, int jz) const {
    return amplitude_[std::size_t(jz)] * tx_[std::size_t(jz)].at(ix, jx) * ty_[std::size_t(jz)].at(iy, jy);
  }

  /// out[iy * nx + ix] += sum over the nonzeros of w.
  void forward_sparse(const SparseWeights& w, std::span<double> out) const {
    const std::int64_t slice = std::int64_t(mx_) * my_;
    for (std::size_t k = 0; k < w.index.size(); ++k) {
      const double v = w.value[k];
      if (v == 0.0) continue;
      const std::int64_t j = w.index[k];
      const int jz = int(j / slice);
      const std::int64_t rem = j % slice;
      const int jy = int(rem / mx_);
      const int jx = int(rem % mx_);
      const AxisTable& tx = tx_[std::size_t(jz)];
      const AxisTable& ty = ty_[std::size_t(jz)];
      const double av = amplitude_[std::size_t(jz)] * v;
      const int ix_lo = tx.col_lo(jx), ix_hi = tx.col_hi(jx);
      for (int iy = ty.col_lo(jy); iy < ty.col_hi(jy); ++iy) {
        const double vy = av * ty.row(iy)[jy - ty.row_lo(iy)];
        double* o = out.data() + std::size_t(iy) * std::size_t(nx_);
        for (int ix = ix_lo; ix < ix_hi; ++ix) o[ix] += vy * tx.row(ix)[jx - tx.row_lo(ix)];
      }
    }
  }

  /// out[iy * nx + ix] += (H_plane w) for a dense volume, by separable passes
  /// per slice. `scratch` is resized as needed.
  void forward_dense(std::span<const double> w, std::span<double> out, std::vector<double>& scratch) const {
    const std::size_t slice = std::size_t(mx_) * std::size_t(my_);
    scratch.assign(std::size_t(my_) * std::size_t(nx_), 0.0);
    std::vector<char> row_used(static_cast<std::size_t>(my_));
    for (int jz = 0; jz < mz_; ++jz) {
      const double* ws = w.data() + std::size_t(jz) * slice;
      bool any = false;
      for (int jy = 0; jy < my_; ++jy) {
        const double* r = ws + std::size_t(jy) * std::size_t(mx_);
        bool used = false;
        for (int jx = 0; jx < mx_; ++jx) {
          if (r[jx] != 0.0) {
            used = true;
            break;
          }
        }
        row_used[std::size_t(jy)] = used;
        any = any || used;
      }
      if (!any) continue;
      const AxisTable& tx = tx_[std::size_t(jz)];
      const AxisTable& ty = ty_[std::size_t(jz)];
      // t[jy][ix] = sum_jx w[jy][jx] gx(ix, jx)
      for (int jy = 0; jy < my_; ++jy) {
        double* t = scratch.data() + std::size_t(jy) * std::size_t(nx_);
        if (!row_used[std::size_t(jy)]) {
          std::fill(t, t + nx_, 0.0);
          continue;
        }
        const double* r = ws + std::size_t(jy) * std::size_t(mx_);
        for (int ix = 0; ix < nx_; ++ix) {
          const int lo = tx.row_lo(ix), hi = tx.row_hi(ix);
          const double* g = tx.row(ix) - lo;
          double s = 0.0;
          for (int jx = lo; jx < hi; ++jx) s += r[jx] * g[jx];
          t[ix] = s;
        }
      }
      const double a = amplitude_[std::size_t(jz)];
      for (int iy = 0; iy < ny_; ++iy) {
        const int lo = ty.row_lo(iy), hi = ty.row_hi(iy);
        const double* g = ty.row(iy) - lo;
        double* o = out.data() + std::size_t(iy) * std::size_t(nx_);
        for (int jy = lo; jy < hi; ++jy) {
          if (!row_used[std::size_t(jy)]) continue;
          const double c = a * g[jy];
          const double* t = scratch.data() + std::size_t(jy) * std::size_t(nx_);
          for (int ix = 0; ix < nx_; ++ix) o[ix] += c * t[ix];
        }
      }
    }
  }

  /// g += H_plane^T r for the plane's residual r (ny * nx entries).
  void adjoint(std::span<const double> r, std::span<double> g, std::vector<double>& scratch) const {
    const std::size_t slice = std::size_t(mx_) * std::size_t(my_);
    scratch.resize(std::size_t(ny_) * std::size_t(mx_));
    for (int jz = 0; jz < mz_; ++jz) {
      const AxisTable& tx = tx_[std::size_t(jz)];
      const AxisTable& ty = ty_[std::size_t(jz)];
      // u[iy][jx] = sum_ix r[iy][ix] gx(ix, jx)
      std::fill(scratch.begin(), scratch.end(), 0.0);
      for (int iy = 0; iy < ny_; ++iy) {
        double* u = scratch.data() + std::size_t(iy) * std::size_t(mx_);
        const double* rr = r.data() + std::size_t(iy) * std::size_t(nx_);
        for (int ix = 0; ix < nx_; ++ix) {
          const double rv = rr[ix];
          if (rv == 0.0) continue;
          const int lo = tx.row_lo(ix), hi = tx.row_hi(ix);
          const double* gx = tx.row(ix) - lo;
          for (int jx = lo; jx < hi; ++jx) u[jx] += rv * gx[jx];
        }
      }
      const double a = amplitude_[std::size_t(jz)];
      double* gs = g.data() + std::size_t(jz) * slice;
      for (int iy = 0; iy < ny_; ++iy) {
        const int lo = ty.row_lo(iy), hi = ty.row_hi(iy);
        const double* gy = ty.row(iy) - lo;
        const double* u = scratch.data() + std::size_t(iy) * std::size_t(mx_);
        for (int jy = lo; jy < hi; ++jy) {
          const double c = a * gy[jy];
          double* gr = gs + std::size_t(jy) * std::size_t(mx_);
          for (int jx = 0; jx < mx_; ++jx) gr[jx] += c * u[jx];
        }
      }
    }
  }

  /// Nonzero rows of column j within this plane, as (row-in-plane, value).
  void column(std::int64_t j, std::vector<std::pair<int, double>>& out) const {
    const std::int64_t slice = std::int64_t(mx_) * my_;
    const int jz = int(j / slice);
    const std::int64_t rem = j % slice;
    const int jy = int(rem / mx_);
    const int jx = int(rem % mx_);
    const AxisTable& tx = tx_[std::size_t(jz)];
    const AxisTable& ty = ty_[std::size_t(jz)];
    const double a = amplitude_[std::size_t(jz)];
    for (int iy = ty.col_lo(jy); iy < ty.col_hi(jy); ++iy) {
      const double vy = a * ty.row(iy)[jy - ty.row_lo(iy)];
      for (int ix = tx.col_lo(jx); ix < tx.col_hi(jx); ++ix) {
        out.emplace_back(iy * nx_ + ix, vy * tx.row(ix)[jx - tx.row_lo(ix)]);
      }
    }
  }

 private:
  int nx_ = 0, ny_ = 0, mx_ = 0, my_ = 0, mz_ = 0;
  int plane_ = 0;
  LateralShift shift_;
  std::vector<double> amplitude_;
  std::vector<AxisTable> tx_, ty_;
};

/// Axial offsets (camera plane minus voxel centre) spanned by a grid.
inline std::pair<double, double> axial_offset_range(const GridConfig& g) {
  const auto [lo, hi] = std::minmax_element(g.plane_offsets.begin(), g.plane_offsets.end());
  const double zmin = 0.5 * g.high_voxel[2];
  const double zmax = (g.mz() - 0.5) * g.high_voxel[2];
  return {*lo - zmax, *hi - zmin};
}

/// Matrix-free observation operator H(drifts): stacked plane blocks in
/// plane order. Linear; the background b is not part of H.
class ForwardOperator {
 public:
  ForwardOperator(GridConfig grid, const PsfParams& psf, const DriftSet& drifts)
      : grid_(std::move(grid)), psf_(psf), drifts_(drifts) {
    validate(grid_);
    check_drifts(drifts_, grid_);
    const auto [lo, hi] = axial_offset_range(grid_);
    mumloc::validate(psf_, lo, hi);
    planes_.reserve(std::size_t(grid_.nplanes()));
    for (int p = 0; p < grid_.nplanes(); ++p) planes_.emplace_back(grid_, psf_, p, drifts_[p]);
  }

  const GridConfig& grid() const { return grid_; }
  const PsfParams& psf() const { return psf_; }
  const DriftSet& drifts() const { return drifts_; }
  const PlaneKernel& plane(int p) const { return planes_[std::size_t(p)]; }
  std::size_t rows() const { return grid_.n_low(); }
  std::size_t cols() const { return grid_.n_high(); }

  /// Replaces the kernel of one plane (used by the drift search).
  void set_plane_drift(int p, LateralShift s) {
    drifts_.set(p, s);
    check_drifts(drifts_, grid_);
    planes_[std::size_t(p)] = PlaneKernel(grid_, psf_, p, s);
  }

  std::vector<double> apply(const SparseWeights& w) const {
    std::vector<double> y(rows(), 0.0);
    const std::size_t ps = grid_.plane_size();
    for (const auto& k : planes_) {
      k.forward_sparse(w, std::span<double>(y).subspan(std::size_t(k.plane()) * ps, ps));
    }
    return y;
  }

  std::vector<double> apply(std::span<const double> w) const {
    if (w.size() != cols()) throw Error(ErrorKind::GridMismatch, "weight volume size mismatch");
    std::size_t nnz = 0;
    for (double v : w) nnz += v != 0.0;
    if (nnz * 16 < cols()) {
      SparseWeights s;
      for (std::size_t j = 0; j < w.size(); ++j) {
        if (w[j] != 0.0) {
          s.index.push_back(std::int64_t(j));
          s.value.push_back(w[j]);
        }
      }
      return apply(s);
    }
    std::vector<double> y(rows(), 0.0);
    std::vector<double> scratch;
    const std::size_t ps = grid_.plane_size();
    for (const auto& k : planes_) {
      k.forward_dense(w, std::span<double>(y).subspan(std::size_t(k.plane()) * ps, ps), scratch);
    }
    return y;
  }

  std::vector<double> adjoint(std::span<const double> r) const {
    if (r.size() != rows()) throw Error(ErrorKind::GridMismatch, "image size mismatch");
    std::vector<double> g(cols(), 0.0);
    std::vector<double> scratch;
    const std::size_t ps = grid_.plane_size();
    for (const auto& k : planes_) k.adjoint(r.subspan(std::size_t(k.plane()) * ps, ps), g, scratch);
    return g;
  }

  /// Nonzero entries of column j as (flat row index, value), plane-major.
  void column(std::int64_t j, std::vector<std::pair<int, double>>& out) const {
    out.clear();
    const int ps = int(grid_.plane_size());
    for (const auto& k : planes_) {
      const std::size_t start = out.size();
      k.column(j, out);
      for (std::size_t e = start; e < out.size(); ++e) out[e].first += k.plane() * ps;
    }
  }

  double entry(std::size_t i, std::int64_t j) const {
    const std::size_t ps = grid_.plane_size();
    const int p = int(i / ps);
    const int rem = int(i % ps);
    const auto v = grid_.high_index3(j);
    return planes_[std::size_t(p)].entry(rem % grid_.nx(), rem / grid_.nx(), v[0], v[1], v[2]);
  }

 private:
  GridConfig grid_;
  PsfParams psf_;
  DriftSet drifts_;
  std::vector<PlaneKernel> planes_;
};

namespace detail {

inline void check_grid(const GridConfig& a, const GridConfig& b, const char* what) {
  if (!(a == b)) throw Error(ErrorKind::GridMismatch, std::string(what) + " was built on a different grid");
}

}  // namespace detail

/// y = H(drifts) w + b.
inline LowResImage apply_forward(const WeightVolume& w, const DriftSet& drifts, const PsfParams& psf,
                                 const GridConfig& grid) {
  detail::check_grid(w.grid, grid, "weight volume");
  if (w.data.size() != grid.n_high()) throw Error(ErrorKind::GridMismatch, "weight volume size mismatch");
  ForwardOperator op(grid, psf, drifts);
  LowResImage y(grid);
  y.data = op.apply(std::span<const double>(w.data));
  if (psf.b != 0.0) {
    for (double& v : y.data) v += psf.b;
  }
  return y;
}

/// g = H(drifts)^T r.
inline WeightVolume apply_adjoint(const LowResImage& r, const DriftSet& drifts, const PsfParams& psf,
                                  const GridConfig& grid) {
  detail::check_grid(r.grid, grid, "image");
  if (r.data.size() != grid.n_low()) throw Error(ErrorKind::GridMismatch, "image size mismatch");
  ForwardOperator op(grid, psf, drifts);
  WeightVolume g(grid);
  g.data = op.adjoint(r.data);
  return g;
}

namespace detail {

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace detail

/// Power iteration on H^T H. Returns the Rayleigh quotient ||H v||^2 of the
/// last unit iterate, which is nondecreasing in `iters`.
inline double estimate_operator_norm(const ForwardOperator& op, int iters) {
  if (iters < 1) throw Error(ErrorKind::ConfigError, "power iteration needs iters >= 1");
  const std::size_t m = op.cols();
  std::vector<double> v(m, 1.0 / std::sqrt(double(m)));
  double estimate = 0.0;
  int restarts = 0;
  for (int k = 0; k < iters; ++k) {
    std::vector<double> hv = op.apply(std::span<const double>(v));
    estimate = detail::norm2(hv);
    std::vector<double> z = op.adjoint(hv);
    const double zn = std::sqrt(detail::norm2(z));
    if (!(zn > 0.0)) {
      // Start vector in the null space: try a different deterministic one.
      if (++restarts > 3) return 0.0;
      std::fill(v.begin(), v.end(), 0.0);
      for (std::size_t j = std::size_t(restarts - 1); j < m; j += std::size_t(restarts + 1)) v[j] = 1.0;
      const double vn = std::sqrt(detail::norm2(v));
      for (double& x : v) x /= vn;
      --k;
      continue;
    }
    for (std::size_t j = 0; j < m; ++j) v[j] = z[j] / zn;
  }
  return estimate;
}

inline double estimate_operator_norm(const DriftSet& drifts, const PsfParams& psf, const GridConfig& grid,
                                     int iters) {
  return estimate_operator_norm(ForwardOperator(grid, psf, drifts), iters);
}

/// Row-major dense copy of H, for oracles on small grids.
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

inline constexpr std::size_t kDefaultDenseLimit = std::size_t(1) << 24;

inline DenseMatrix build_dense_matrix(const DriftSet& drifts, const PsfParams& psf, const GridConfig& grid,
                                      std::size_t limit = kDefaultDenseLimit) {
  const std::size_t n = grid.n_low(), m = grid.n_high();
  if (n * m > limit) {
    throw Error(ErrorKind::TooLargeForDense,
                std::to_string(n) + " x " + std::to_string(m) + " exceeds dense limit " + std::to_string(limit));
  }
  ForwardOperator op(grid, psf, drifts);
  DenseMatrix h{n, m, std::vector<double>(n * m, 0.0)};
  std::vector<std::pair<int, double>> col;
  for (std::size_t j = 0; j < m; ++j) {
    op.column(std::int64_t(j), col);
    for (const auto& [i, v] : col) h.data[std::size_t(i) * m + j] = v;
  }
  return h;
}

}  // namespace mumloc

#endif  // MUMLOC_FORWARD_HPP
