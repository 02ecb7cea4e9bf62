#ifndef MUMLOC_PSF_HPP
#define MUMLOC_PSF_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mumloc/error.hpp"

namespace mumloc {

/// Point in specimen space, nanometres. x and y are lateral, z is axial.
struct Coord3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend Coord3 operator+(Coord3 a, Coord3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Coord3 operator-(Coord3 a, Coord3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend bool operator==(const Coord3&, const Coord3&) = default;
};

/// Depth-dependent Gaussian PSF of a multifocal microscope.
///
/// The lateral profile is an isotropic Gaussian whose width follows the
/// defocus curve
///   w(z) = w0 * sqrt(1 + (z/d)^2 + A (z/d)^3 + B (z/d)^4)
/// and whose peak is a_prime / (2 pi w(z)^2), so the lateral integral is
/// a_prime regardless of defocus.
struct PsfParams {
  double a_prime = 5.00e7;  ///< intensity * nm^2
  double b = 0.0;           ///< constant background
  double w0 = 133.0;        ///< in-focus width, nm
  double d = 302.0;         ///< focus depth, nm
  double A = 7.37e-4;       ///< cubic defocus coefficient
  double B = 6.27e-3;       ///< quartic defocus coefficient

  /// Calibrated values of the quad-plane instrument.
  static PsfParams instrument() { return PsfParams{}; }

  friend bool operator==(const PsfParams&, const PsfParams&) = default;
};

struct WidthSample {
  double depth = 0.0;  ///< nm from the focal plane
  double width = 0.0;  ///< nm
};

namespace detail {

inline double defocus_radicand(double x3, const PsfParams& p) {
  const double u = x3 / p.d;
  const double u2 = u * u;
  return 1.0 + u2 + p.A * u2 * u + p.B * u2 * u2;
}

}  // namespace detail

/// Checks the scalar invariants and that the defocus radicand stays positive
/// for every axial offset in [axial_min, axial_max].
inline void validate(const PsfParams& p, double axial_min, double axial_max) {
  if (!(p.w0 > 0.0) || !(p.d > 0.0) || !(p.a_prime > 0.0) || !(p.b >= 0.0) ||
      !std::isfinite(p.A) || !std::isfinite(p.B)) {
    throw Error(ErrorKind::InvalidParams, "PSF requires w0 > 0, d > 0, a_prime > 0, b >= 0");
  }
  if (axial_min > axial_max) std::swap(axial_min, axial_max);
  // Q(u) = 1 + u^2 + A u^3 + B u^4 attains its minimum over an interval at an
  // endpoint or at a root of Q'(u) = u (2 + 3A u + 4B u^2).
  std::vector<double> us = {axial_min / p.d, axial_max / p.d, 0.0};
  if (p.B != 0.0) {
    const double disc = 9.0 * p.A * p.A - 32.0 * p.B;
    if (disc >= 0.0) {
      const double s = std::sqrt(disc);
      us.push_back((-3.0 * p.A + s) / (8.0 * p.B));
      us.push_back((-3.0 * p.A - s) / (8.0 * p.B));
    }
  } else if (p.A != 0.0) {
    us.push_back(-2.0 / (3.0 * p.A));
  }
  for (double u : us) {
    const double x3 = u * p.d;
    if (x3 < axial_min || x3 > axial_max) continue;
    if (!(detail::defocus_radicand(x3, p) > 0.0)) {
      throw Error(ErrorKind::NonPositiveRadicand,
                  "defocus curve radicand is not positive at x3 = " + std::to_string(x3) + " nm");
    }
  }
}

inline double defocus_width(double x3, const PsfParams& p) {
  const double q = detail::defocus_radicand(x3, p);
  if (!(q > 0.0)) {
    throw Error(ErrorKind::NonPositiveRadicand,
                "defocus curve radicand " + std::to_string(q) + " at x3 = " + std::to_string(x3));
  }
  return p.w0 * std::sqrt(q);
}

inline double peak_amplitude(double x3, const PsfParams& p) {
  const double w = defocus_width(x3, p);
  return p.a_prime / (2.0 * std::numbers::pi * w * w);
}

/// Untruncated PSF: value observed at `obs` from a unit emitter at `src`.
inline double psf_value(Coord3 obs, Coord3 src, const PsfParams& p) {
  const Coord3 delta = obs - src;
  const double w = defocus_width(delta.z, p);
  const double a = p.a_prime / (2.0 * std::numbers::pi * w * w);
  const double r2 = delta.x * delta.x + delta.y * delta.y;
  return a * std::exp(-r2 / (2.0 * w * w)) + p.b;
}

/// One lateral factor of the separable, truncated Gaussian used by the
/// discretized operators. Zero once |offset| exceeds trunc_sigma widths.
inline double truncated_gaussian(double offset, double width, double trunc_sigma) {
  if (std::abs(offset) > trunc_sigma * width) return 0.0;
  return std::exp(-(offset * offset) / (2.0 * width * width));
}

// ---------------------------------------------------------------------------
// Defocus curve calibration
// ---------------------------------------------------------------------------

struct FitOptions {
  int max_iters = 200;
  double tol = 1e-14;              ///< relative cost change at which to stop
  double initial_damping = 1e-3;
  bool fit_depth_offset = false;   ///< also estimate a common axial offset of the samples
};

struct FitResult {
  PsfParams params;
  double depth_offset = 0.0;
  double initial_residual_norm = 0.0;
  double residual_norm = 0.0;
  int iterations = 0;
};

namespace detail {

// Solves the small dense system M x = rhs in place by Gaussian elimination
// with partial pivoting. Returns false for a singular matrix.
template <std::size_t N>
bool solve_small(std::array<std::array<double, N>, N> m, std::array<double, N>& rhs, std::size_t n) {
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
    if (!(std::abs(m[piv][c]) > 0.0)) return false;
    std::swap(m[piv], m[c]);
    std::swap(rhs[piv], rhs[c]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = m[r][c] / m[c][c];
      for (std::size_t k = c; k < n; ++k) m[r][k] -= f * m[c][k];
      rhs[r] -= f * rhs[c];
    }
  }
  for (std::size_t c = n; c-- > 0;) {
    double s = rhs[c];
    for (std::size_t k = c + 1; k < n; ++k) s -= m[c][k] * rhs[k];
    rhs[c] = s / m[c][c];
  }
  return true;
}

// Parameter vector: (log w0, log d, A, B, offset).
struct CurveModel {
  std::array<double, 5> theta{};
  std::size_t n_free = 4;

  double w0() const { return std::exp(theta[0]); }
  double d() const { return std::exp(theta[1]); }

  // Residuals and Jacobian of the width model. Returns false when the
  // radicand is not positive at some sample.
  bool evaluate(std::span<const WidthSample> s, std::vector<double>& r,
                std::vector<std::array<double, 5>>* jac) const {
    const double w0v = w0();
    const double dv = d();
    const double A = theta[2];
    const double B = theta[3];
    const double off = theta[4];
    r.resize(s.size());
    if (jac) jac->resize(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double u = (s[i].depth - off) / dv;
      const double u2 = u * u;
      const double q = 1.0 + u2 + A * u2 * u + B * u2 * u2;
      if (!(q > 0.0) || !std::isfinite(q)) return false;
      const double sq = std::sqrt(q);
      const double w = w0v * sq;
      r[i] = w - s[i].width;
      if (jac) {
        const double half = w0v / (2.0 * sq);
        const double dq_du = 2.0 * u + 3.0 * A * u2 + 4.0 * B * u2 * u;
        auto& row = (*jac)[i];
        row[0] = w;
        row[1] = half * dq_du * (-u);
        row[2] = half * u2 * u;
        row[3] = half * u2 * u2;
        row[4] = half * dq_du * (-1.0 / dv);
      }
    }
    return true;
  }
};

inline double sum_squares(const std::vector<double>& r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return s;
}

}  // namespace detail

/// Least-squares fit of the defocus curve shape (w0, d, A, B) to measured
/// bead widths. a_prime and b are copied from `init`.
///
/// Levenberg-Marquardt on (log w0, log d, A, B[, offset]) with an analytic
/// Jacobian; positivity of w0 and d holds by parameterization.
inline FitResult fit_defocus_curve(std::span<const WidthSample> samples, const PsfParams& init,
                                   const FitOptions& opts = {}) {
  const std::size_t n_free = opts.fit_depth_offset ? 5 : 4;
  std::set<double> depths;
  for (const auto& s : samples) {
    if (!(s.width > 0.0) || !std::isfinite(s.depth)) {
      throw Error(ErrorKind::InvalidParams, "width samples need finite depth and width > 0");
    }
    depths.insert(s.depth);
  }
  if (samples.size() < 5 || depths.size() < n_free) {
    throw Error(ErrorKind::InsufficientSamples,
                "need >= 5 samples over >= " + std::to_string(n_free) + " distinct depths, got " +
                    std::to_string(samples.size()) + " samples over " +
                    std::to_string(depths.size()) + " depths");
  }
  if (!(init.w0 > 0.0) || !(init.d > 0.0)) {
    throw Error(ErrorKind::InvalidParams, "initial w0 and d must be positive");
  }

  detail::CurveModel model;
  model.theta = {std::log(init.w0), std::log(init.d), init.A, init.B, 0.0};
  model.n_free = n_free;

  std::vector<double> r;
  std::vector<std::array<double, 5>> jac;
  if (!model.evaluate(samples, r, &jac)) {
    throw Error(ErrorKind::NonPositiveRadicand, "initial parameters are invalid at a sample depth");
  }
  double cost = detail::sum_squares(r);
  const double initial_cost = cost;
  double mu = opts.initial_damping;

  FitResult out;
  out.initial_residual_norm = std::sqrt(initial_cost);
  int it = 0;
  bool converged = cost == 0.0;
  std::vector<double> r_try;
  for (; it < opts.max_iters && !converged; ++it) {
    std::array<std::array<double, 5>, 5> jtj{};
    std::array<double, 5> jtr{};
    for (std::size_t i = 0; i < r.size(); ++i) {
      for (std::size_t a = 0; a < n_free; ++a) {
        jtr[a] += jac[i][a] * r[i];
        for (std::size_t b = 0; b < n_free; ++b) jtj[a][b] += jac[i][a] * jac[i][b];
      }
    }
    bool accepted = false;
    for (int attempt = 0; attempt < 40 && !accepted; ++attempt) {
      auto m = jtj;
      for (std::size_t a = 0; a < n_free; ++a) m[a][a] += mu * std::max(jtj[a][a], 1e-300);
      std::array<double, 5> step{};
      for (std::size_t a = 0; a < n_free; ++a) step[a] = -jtr[a];
      if (!detail::solve_small(m, step, n_free)) {
        mu *= 10.0;
        continue;
      }
      detail::CurveModel trial = model;
      for (std::size_t a = 0; a < n_free; ++a) trial.theta[a] += step[a];
      if (trial.evaluate(samples, r_try, nullptr)) {
        const double c = detail::sum_squares(r_try);
        if (c < cost) {
          const double rel = (cost - c) / std::max(cost, 1e-300);
          model = trial;
          cost = c;
          mu = std::max(mu / 3.0, 1e-15);
          accepted = true;
          if (rel < opts.tol) converged = true;
          break;
        }
      }
      mu *= 4.0;
    }
    if (!accepted) {
      // No damping level reduces the cost: a stationary point.
      converged = true;
      break;
    }
    model.evaluate(samples, r, &jac);
  }

  if (!std::isfinite(cost) || (!converged && cost >= initial_cost)) {
    throw Error(ErrorKind::FitDiverged, "defocus fit did not reduce the residual within " +
                                            std::to_string(opts.max_iters) + " iterations");
  }
  out.params = init;
  out.params.w0 = model.w0();
  out.params.d = model.d();
  out.params.A = model.theta[2];
  out.params.B = model.theta[3];
  out.depth_offset = model.theta[4];
  out.residual_norm = std::sqrt(cost);
  out.iterations = it;
  return out;
}

}  // namespace mumloc

#endif  // MUMLOC_PSF_HPP
