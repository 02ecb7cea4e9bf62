#ifndef MUMLOC_SOLVER_HPP
#define MUMLOC_SOLVER_HPP

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mumloc/error.hpp"
#include "mumloc/forward.hpp"
#include "mumloc/grid.hpp"
#include "mumloc/parallel.hpp"
#include "mumloc/psf.hpp"

namespace mumloc {

/// Per-frame objective is 0.5 ||y - b - H w||^2 + lambda ||w||_1; the batch
/// objective sums it over frames.
struct SolverConfig {
  std::optional<double> lambda;  ///< absolute l1 weight; unset selects lambda_rel * max_t ||H^T (y_t - b)||_inf
  double lambda_rel = 0.05;
  int max_iters = 2000;          ///< proximal-gradient iterations per frame solve
  double tol = 1e-6;             ///< relative objective change that ends a solve
  double step_safety = 0.9;      ///< step = step_safety / L_hat
  bool nonneg = true;
  int max_drift = 2;             ///< drift search radius, high-res voxels
  int outer_rounds = 10;
  bool estimate_drifts = true;   ///< false keeps the initial drifts (no-correction ablation)
  bool local_search = true;      ///< plane-group shift moves verified by re-solving, after each drift search
  int max_moves = 64;            ///< accepted local-search moves per round
  int max_trials = 0;            ///< re-solved moves per local-search pass; 0 tries every move
  double kkt_tol = 1e-4;         ///< working-set admission: violation > kkt_tol * lambda
  int ws_initial = 64;           ///< initial working-set size
  int threads = 1;
};

inline void validate(const SolverConfig& c) {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::ConfigError, "solver: " + m); };
  if (c.lambda && !(*c.lambda >= 0.0)) fail("lambda must be >= 0");
  if (!(c.lambda_rel >= 0.0)) fail("lambda_rel must be >= 0");
  if (!(c.tol > 0.0)) fail("tol must be > 0");
  if (!(c.step_safety > 0.0 && c.step_safety <= 1.0)) fail("step_safety must lie in (0, 1]");
  if (c.max_iters < 1 || c.outer_rounds < 1) fail("max_iters and outer_rounds must be >= 1");
  if (c.max_drift < 0) fail("max_drift must be >= 0");
  if (!(c.kkt_tol >= 0.0)) fail("kkt_tol must be >= 0");
  if (c.ws_initial < 1) fail("ws_initial must be >= 1");
}

inline double soft_threshold(double v, double t) {
  return v > t ? v - t : (v < -t ? v + t : 0.0);
}

namespace detail {

inline std::vector<double> subtract_background(std::span<const double> y, double b) {
  std::vector<double> out(y.begin(), y.end());
  if (b != 0.0) {
    for (double& v : out) v -= b;
  }
  return out;
}

// Columns of H restricted to a working set, stored compressed, with their
// Gram matrix and correlations with y maintained as columns are added.
class ColumnSet {
 public:
  ColumnSet(std::span<const double> y, std::size_t plane_size, std::vector<char> active)
      : y_(y), plane_size_(plane_size), active_(std::move(active)), dense_(y.size(), 0.0) {}

  std::size_t size() const { return index_.size(); }
  std::int64_t voxel(std::size_t k) const { return index_[k]; }
  double gram(std::size_t k, std::size_t l) const { return gram_[k][l]; }
  double corr(std::size_t k) const { return corr_[k]; }

  void add(const ForwardOperator& op, std::int64_t j, std::vector<std::pair<int, double>>& scratch) {
    op.column(j, scratch);
    const std::size_t k = index_.size();
    index_.push_back(j);
    double c = 0.0;
    for (const auto& [r, v] : scratch) {
      if (!active_.empty() && !active_[std::size_t(r) / plane_size_]) continue;
      row_.push_back(r);
      val_.push_back(v);
      dense_[std::size_t(r)] = v;
      c += v * y_[std::size_t(r)];
    }
    ptr_.push_back(row_.size());
    corr_.push_back(c);
    std::vector<double> g(k + 1);
    for (std::size_t l = 0; l <= k; ++l) {
      double d = 0.0;
      for (std::size_t e = ptr_[l]; e < ptr_[l + 1]; ++e) d += val_[e] * dense_[std::size_t(row_[e])];
      g[l] = d;
      if (l < k) gram_[l].push_back(d);
    }
    gram_.push_back(std::move(g));
    for (std::size_t e = ptr_[k]; e < ptr_[k + 1]; ++e) dense_[std::size_t(row_[e])] = 0.0;
  }

  void apply(std::span<const double> x, std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t k = 0; k < index_.size(); ++k) {
      const double xv = x[k];
      if (xv == 0.0) continue;
      for (std::size_t e = ptr_[k]; e < ptr_[k + 1]; ++e) out[std::size_t(row_[e])] += val_[e] * xv;
    }
  }

  // out = G x
  void gram_apply(std::span<const double> x, std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t l = 0; l < index_.size(); ++l) {
      const double xv = x[l];
      if (xv == 0.0) continue;
      const double* g = gram_[l].data();
      for (std::size_t k = 0; k < out.size(); ++k) out[k] += g[k] * xv;
    }
  }

 private:
  std::span<const double> y_;
  std::size_t plane_size_;
  std::vector<char> active_;  // planes in the fit; empty means all
  std::vector<double> dense_;
  std::vector<std::int64_t> index_;
  std::vector<std::size_t> ptr_{0};
  std::vector<int> row_;
  std::vector<double> val_;
  std::vector<std::vector<double>> gram_;
  std::vector<double> corr_;
};

inline double half_sq_residual(std::span<const double> hx, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = hx[i] - y[i];
    s += r * r;
  }
  return 0.5 * s;
}

// Solves A u = b in place for symmetric positive definite A (row-major,
// n x n). Returns false if a pivot is not positive.
// In-place lower Cholesky factor of the row-major n x n matrix `a`.
inline bool cholesky_factor(std::vector<double>& a, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 0.0)) return false;
    d = std::sqrt(d);
    a[j * n + j] = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) v -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = v / d;
    }
  }
  return true;
}

// Solves L L^T x = b in place with the factor from cholesky_factor.
inline void cholesky_substitute(const std::vector<double>& a, std::size_t n, std::span<double> b) {
  for (std::size_t i = 0; i < n; ++i) {
    double v = b[i];
    for (std::size_t k = 0; k < i; ++k) v -= a[i * n + k] * b[k];
    b[i] = v / a[i * n + i];
  }
  for (std::size_t i = n; i-- > 0;) {
    double v = b[i];
    for (std::size_t k = i + 1; k < n; ++k) v -= a[k * n + i] * b[k];
    b[i] = v / a[i * n + i];
  }
}

inline bool cholesky_solve(std::vector<double>& a, std::size_t n, std::vector<double>& b) {
  if (!cholesky_factor(a, n)) return false;
  cholesky_substitute(a, n, b);
  return true;
}

inline double l1(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += std::abs(v);
  return s;
}

}  // namespace detail

struct LassoStats {
  double objective = 0.0;
  int iterations = 0;
  int working_set_rounds = 0;
  std::size_t working_set_size = 0;
  bool converged = false;
};

/// 0.5 ||y - H w||^2 + lambda ||w||_1 for a background-free y.
inline double lasso_objective(const ForwardOperator& op, std::span<const double> y, const SparseWeights& w,
                              double lambda) {
  const std::vector<double> hw = op.apply(w);
  return detail::half_sq_residual(hw, y) + lambda * w.l1();
}

/// Accelerated proximal gradient on a working set of columns.
///
/// Each working-set round runs FISTA with backtracking and adaptive restart
/// on the active columns, in Gram form; a step is kept only if it does not
/// increase the objective, so the returned iterate is the best seen. After
/// the inner solve the full gradient H^T (H w - y) is formed and the
/// strongest KKT violators outside the set are admitted. The solve ends when
/// no violation exceeds kkt_tol * lambda or the iteration budget is spent.
///
/// `y` must already have the background removed. A nonempty `planes` mask
/// restricts the fit to the rows of the planes flagged nonzero. With
/// `fixed_set` the support is limited to the warm start's voxels, zeros
/// included, and no full
/// gradient is formed; the result is then feasible but not the global optimum.
inline SparseWeights solve_lasso_sparse(const ForwardOperator& op, std::span<const double> y_in, double lambda,
                                        const SolverConfig& cfg, const SparseWeights& warm = {},
                                        LassoStats* stats = nullptr, std::span<const char> planes = {},
                                        bool fixed_set = false) {
  const std::size_t n = op.rows();
  const std::size_t m = op.cols();
  const std::size_t ps = op.grid().plane_size();
  if (y_in.size() != n) throw Error(ErrorKind::GridMismatch, "image size does not match the operator");
  if (!planes.empty() && planes.size() != std::size_t(op.grid().nplanes())) {
    throw Error(ErrorKind::GridMismatch, "plane mask length does not match the grid");
  }
  std::vector<double> y_masked;
  std::span<const double> y = y_in;
  if (!planes.empty()) {
    y_masked.assign(y_in.begin(), y_in.end());
    for (std::size_t i = 0; i < n; ++i)
      if (!planes[i / ps]) y_masked[i] = 0.0;
    y = y_masked;
  }
  const double half_yy = 0.5 * detail::norm2(y);

  detail::ColumnSet cols(y, ps, std::vector<char>(planes.begin(), planes.end()));
  std::vector<char> in_set(m, 0);
  std::vector<std::pair<int, double>> scratch;
  std::vector<double> x;
  for (std::size_t k = 0; k < warm.nnz(); ++k) {
    const double v = cfg.nonneg ? std::max(0.0, warm.value[k]) : warm.value[k];
    if (v == 0.0 && !fixed_set) continue;
    cols.add(op, warm.index[k], scratch);
    in_set[std::size_t(warm.index[k])] = 1;
    x.push_back(v);
  }

  std::vector<double> hw(n), r(n);
  std::vector<double> gx, gv, gz, grad, v, z, x_prev, power;
  int iterations = 0;
  int ws_rounds = 0;
  bool converged = false;
  const double kkt_margin = cfg.kkt_tol * lambda;

  auto prox = [&](double u, double t) {
    const double s = soft_threshold(u, t);
    return cfg.nonneg ? std::max(0.0, s) : s;
  };
  // 0.5 ||H_S u - y||^2 from G u.
  auto smooth = [&](std::span<const double> u, std::span<const double> gu) {
    double q = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) q += u[k] * (0.5 * gu[k] - cols.corr(k));
    return q + half_yy;
  };

  // Largest optimality violation over the working set, from G x - c.
  auto inner_violation = [&](std::span<const double> gxs) {
    double worst = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double gk = gxs[k] - cols.corr(k);
      double v;
      if (x[k] != 0.0) {
        v = std::abs(gk + (x[k] > 0.0 ? lambda : -lambda));
      } else {
        v = cfg.nonneg ? (-gk - lambda) : (std::abs(gk) - lambda);
      }
      worst = std::max(worst, v);
    }
    return worst;
  };

  // Newton step on the current support with signs held fixed: solves
  // G_SS u = c_S - lambda sign(x_S), stepping to the first sign change and
  // dropping that coordinate when the full step is infeasible. Kept only if
  // the objective decreases.
  auto polish = [&](double& fw) {
    const std::size_t s = cols.size();
    std::vector<double> cand(x.begin(), x.end()), gc(s);
    for (int pass = 0; pass < 8; ++pass) {
      std::vector<std::size_t> sup;
      for (std::size_t k = 0; k < s; ++k)
        if (cand[k] != 0.0) sup.push_back(k);
      const std::size_t q = sup.size();
      if (q == 0) break;
      std::vector<double> a(q * q), u(q);
      for (std::size_t i = 0; i < q; ++i) {
        for (std::size_t j = 0; j < q; ++j) a[i * q + j] = cols.gram(sup[i], sup[j]);
        u[i] = cols.corr(sup[i]) - (cand[sup[i]] > 0.0 ? lambda : -lambda);
      }
      if (!detail::cholesky_solve(a, q, u)) break;
      double alpha = 1.0;
      std::size_t hit = q;
      for (std::size_t i = 0; i < q; ++i) {
        const double c0 = cand[sup[i]];
        if ((c0 > 0.0) != (u[i] > 0.0) || u[i] == 0.0) {
          const double a_i = c0 / (c0 - u[i]);
          if (a_i < alpha) {
            alpha = a_i;
            hit = i;
          }
        }
      }
      for (std::size_t i = 0; i < q; ++i) cand[sup[i]] += alpha * (u[i] - cand[sup[i]]);
      if (hit == q) break;
      cand[sup[hit]] = 0.0;
    }
    if (!cfg.nonneg) {
      // nothing extra: signs were held fixed above
    } else {
      for (double& c : cand) c = std::max(0.0, c);
    }
    cols.gram_apply(cand, gc);
    const double fc = smooth(cand, gc) + lambda * detail::l1(cand);
    if (fc < fw) {
      x = cand;
      gx = gc;
      fw = fc;
      return true;
    }
    return false;
  };

  // Lawson-Hanson active-set solve of the nonnegative working-set problem
  // from zero: add the most violating coordinate, solve G_PP z = c_P - lambda
  // on the support and step back to the first sign boundary while any entry
  // is not positive. Exact in a few small solves when the solution is sparse.
  // Returns 1 when it improved x, 0 when it finished without improving, and
  // -1 when it gave up (support or pass cap, or a degenerate step).
  auto active_set = [&](double& fw) -> int {
    constexpr std::size_t kMaxSupport = 192;
    constexpr int kMaxPasses = 512;
    const std::size_t s = cols.size();
    std::vector<double> xa(s, 0.0), ga(s, 0.0);
    std::vector<std::size_t> sup;
    std::vector<char> in_sup(s, 0);
    // Solve to the true margin: stopping at a loose target can leave a
    // support that is worse than the FISTA iterate.
    for (int pass = 0; pass < kMaxPasses; ++pass) {
      double best = kkt_margin;
      std::size_t add = s;
      for (std::size_t k = 0; k < s; ++k) {
        const double w = cols.corr(k) - lambda - ga[k];
        if (!in_sup[k] && w > best) {
          best = w;
          add = k;
        }
      }
      if (add == s) {
        const double fa = smooth(xa, ga) + lambda * detail::l1(xa);
        // On flat problems both points tie to round-off; prefer the one
        // that meets the KKT target.
        const bool tie = fa <= fw + 1e-12 * std::abs(fw) && inner_violation(ga) < inner_violation(gx);
        if (!(fa <= fw) && !tie) return 0;
        x = xa;
        gx = ga;
        fw = fa;
        return 1;
      }
      if (sup.size() >= kMaxSupport) return -1;
      sup.push_back(add);
      in_sup[add] = 1;
      for (;;) {
        const std::size_t q = sup.size();
        std::vector<double> a(q * q), u(q), res(q);
        for (std::size_t i = 0; i < q; ++i) {
          for (std::size_t j = 0; j < q; ++j) a[i * q + j] = cols.gram(sup[i], sup[j]);
          u[i] = cols.corr(sup[i]) - lambda;
        }
        if (!detail::cholesky_factor(a, q)) return -1;
        detail::cholesky_substitute(a, q, u);
        // Iterative refinement: nearly collinear columns leave round-off
        // above the KKT margin after a single solve.
        for (int refine = 0; refine < 2; ++refine) {
          for (std::size_t i = 0; i < q; ++i) {
            double gz = 0.0;
            for (std::size_t j = 0; j < q; ++j) gz += cols.gram(sup[i], sup[j]) * u[j];
            res[i] = cols.corr(sup[i]) - lambda - gz;
          }
          detail::cholesky_substitute(a, q, res);
          for (std::size_t i = 0; i < q; ++i) u[i] += res[i];
        }
        double alpha = 1.0;
        for (std::size_t i = 0; i < q; ++i)
          if (u[i] <= 0.0) alpha = std::min(alpha, xa[sup[i]] / (xa[sup[i]] - u[i]));
        for (std::size_t i = 0; i < q; ++i) xa[sup[i]] += alpha * (u[i] - xa[sup[i]]);
        if (alpha == 1.0) break;
        std::vector<std::size_t> keep;
        for (std::size_t i = 0; i < q; ++i) {
          if (u[i] <= 0.0 && xa[sup[i]] <= 1e-12 * std::abs(u[i])) {
            xa[sup[i]] = 0.0;
            in_sup[sup[i]] = 0;
          } else {
            keep.push_back(sup[i]);
          }
        }
        if (keep.size() == q) return -1;
        sup.swap(keep);
        if (sup.empty()) break;
      }
      // A coordinate dropped as soon as it entered means no descent was made.
      if (!in_sup[add]) return -1;
      cols.gram_apply(xa, ga);
    }
    return -1;
  };

  // FISTA on the working set until its KKT conditions hold to `target`,
  // the relative objective change drops to tol, or the budget is spent.
  auto run_inner = [&](double target) {
    const std::size_t s = cols.size();
    gx.assign(s, 0.0);
    gz.assign(s, 0.0);
    grad.assign(s, 0.0);
    z.assign(s, 0.0);

    // Largest eigenvalue of the Gram matrix by power iteration.
    double lip = 0.0;
    power.resize(s, 1.0);
    {
      double nrm = std::sqrt(detail::norm2(power));
      for (double& p : power) p /= nrm;
      for (int it = 0; it < 30; ++it) {
        cols.gram_apply(power, gz);
        double rq = 0.0;
        for (std::size_t k = 0; k < s; ++k) rq += power[k] * gz[k];
        lip = std::max(lip, rq);
        nrm = std::sqrt(detail::norm2(gz));
        if (!(nrm > 0.0)) break;
        for (std::size_t k = 0; k < s; ++k) power[k] = gz[k] / nrm;
      }
    }
    if (!(lip > 0.0)) throw Error(ErrorKind::StepSizeFailure, "operator restricted to the working set is zero");
    double L = lip / cfg.step_safety;

    cols.gram_apply(x, gx);
    if (inner_violation(gx) <= target) return;
    double fw = smooth(x, gx) + lambda * detail::l1(x);
    v = x;
    gv = gx;
    double t = 1.0;
    bool try_active = true;
    while (iterations < cfg.max_iters) {
      ++iterations;
      for (std::size_t k = 0; k < s; ++k) grad[k] = gv[k] - cols.corr(k);
      const double fv_smooth = smooth(v, gv);
      double fz = 0.0;
      for (int bt = 0; bt < 60; ++bt) {
        const double inv = 1.0 / L;
        for (std::size_t k = 0; k < s; ++k) z[k] = prox(v[k] - inv * grad[k], lambda * inv);
        cols.gram_apply(z, gz);
        const double fz_smooth = smooth(z, gz);
        double lin = 0.0, quad = 0.0;
        for (std::size_t k = 0; k < s; ++k) {
          const double d = z[k] - v[k];
          lin += grad[k] * d;
          quad += d * d;
        }
        fz = fz_smooth + lambda * detail::l1(z);
        if (fz_smooth <= fv_smooth + lin + 0.5 * L * quad + 1e-12 * std::abs(fv_smooth)) break;
        L *= 2.0;
      }
      if (fz <= fw) {
        const double rel = (fw - fz) / std::max(std::abs(fz), std::numeric_limits<double>::min());
        x_prev.swap(x);
        x = z;
        gx.swap(gz);  // gz now holds G x_prev
        fw = fz;
        if (inner_violation(gx) <= target) return;
        if (rel <= cfg.tol || iterations % 50 == 0) {
          bool moved = false;
          if (cfg.nonneg && try_active) {
            const int r = active_set(fw);
            try_active = r >= 0;
            moved = r > 0;
          }
          if (!moved) moved = polish(fw);
          if (inner_violation(gx) <= target) return;
          if (moved) {
            t = 1.0;
            v = x;
            gv = gx;
            continue;
          }
          if (rel <= cfg.tol) return;
        }
        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        const double beta = (t - 1.0) / t_next;
        t = t_next;
        for (std::size_t k = 0; k < s; ++k) {
          v[k] = x[k] + beta * (x[k] - x_prev[k]);
          gv[k] = gx[k] + beta * (gx[k] - gz[k]);
        }
      } else {
        // Objective went up: restart momentum from the best iterate.
        t = 1.0;
        v = x;
        gv = gx;
      }
    }
  };

  if (fixed_set) {
    if (!x.empty()) run_inner(kkt_margin);
    converged = iterations < cfg.max_iters;
  }
  // Each working-set subproblem is solved only to a fraction of the current
  // outer violation, so the set grows before the budget is spent on a
  // subproblem that lacks columns. Convergence is certified on the full
  // gradient.
  constexpr double kInnerFraction = 0.3;
  constexpr double kAdmitFraction = 0.5;
  while (!fixed_set) {
    cols.apply(x, hw);
    for (std::size_t i = 0; i < n; ++i) r[i] = hw[i] - y[i];
    const std::vector<double> g = op.adjoint(r);

    struct Candidate {
      double score;
      std::int64_t j;
    };
    std::vector<Candidate> cand;
    for (std::size_t j = 0; j < m; ++j) {
      if (in_set[j]) continue;
      const double viol = cfg.nonneg ? (-g[j] - lambda) : (std::abs(g[j]) - lambda);
      if (viol > kkt_margin) cand.push_back({viol, std::int64_t(j)});
    }
    double outer = 0.0;
    for (const auto& c : cand) outer = std::max(outer, c.score);
    double inner = 0.0;
    for (std::size_t k = 0; k < cols.size(); ++k) {
      const double gk = g[std::size_t(cols.voxel(k))];
      inner = std::max(inner, x[k] != 0.0 ? std::abs(gk + (x[k] > 0.0 ? lambda : -lambda))
                                          : (cfg.nonneg ? -gk - lambda : std::abs(gk) - lambda));
    }
    if (cand.empty() && inner <= kkt_margin) {
      converged = iterations < cfg.max_iters;
      break;
    }
    if (iterations >= cfg.max_iters) break;
    if (!cand.empty()) {
      // Admit the strongest violators, at most doubling the set; weak ones
      // usually vanish once the strong ones are fitted.
      const std::size_t strong = std::size_t(std::count_if(
          cand.begin(), cand.end(), [&](const Candidate& c) { return c.score >= kAdmitFraction * outer; }));
      const std::size_t grow =
          std::min(strong, std::max<std::size_t>(std::size_t(cfg.ws_initial), cols.size()));
      std::partial_sort(cand.begin(), cand.begin() + std::ptrdiff_t(grow), cand.end(),
                        [](const Candidate& a, const Candidate& b) {
                          return a.score > b.score || (a.score == b.score && a.j < b.j);
                        });
      for (std::size_t k = 0; k < grow; ++k) {
        cols.add(op, cand[k].j, scratch);
        in_set[std::size_t(cand[k].j)] = 1;
        x.push_back(0.0);
      }
      ++ws_rounds;
    }
    const int before = iterations;
    run_inner(cand.empty() ? kkt_margin : std::max(kkt_margin, kInnerFraction * outer));
    // The working-set check passed where the full gradient differs by rounding.
    if (cand.empty() && iterations == before) {
      converged = true;
      break;
    }
  }

  SparseWeights out;
  std::vector<std::pair<std::int64_t, double>> entries;
  for (std::size_t k = 0; k < cols.size(); ++k) {
    if (x[k] != 0.0) entries.emplace_back(cols.voxel(k), x[k]);
  }
  std::sort(entries.begin(), entries.end());
  for (const auto& [j, val] : entries) {
    out.index.push_back(j);
    out.value.push_back(val);
  }
  if (stats) {
    if (planes.empty() && !fixed_set) {
      stats->objective = lasso_objective(op, y, out, lambda);
    } else {
      cols.apply(x, hw);
      stats->objective = detail::half_sq_residual(hw, y) + lambda * detail::l1(x);
    }
    stats->iterations = iterations;
    stats->working_set_rounds = ws_rounds;
    stats->working_set_size = cols.size();
    stats->converged = converged;
  }
  return out;
}

/// max ||H^T (y - b)||_inf over the given images, with H built for `drifts`.
inline double lambda_max(const ForwardOperator& op, std::span<const LowResImage> ys) {
  double best = 0.0;
  for (const auto& y : ys) {
    const auto g = op.adjoint(detail::subtract_background(y.data, op.psf().b));
    for (double v : g) best = std::max(best, std::abs(v));
  }
  return best;
}

inline double resolve_lambda(const SolverConfig& cfg, const ForwardOperator& op, std::span<const LowResImage> ys) {
  if (cfg.lambda) return *cfg.lambda;
  return cfg.lambda_rel * lambda_max(op, ys);
}

/// Single-frame Lasso with drifts fixed. Returns the dense weight volume.
inline WeightVolume solve_lasso(const LowResImage& y, const DriftSet& drifts, const PsfParams& psf,
                                const GridConfig& grid, const SolverConfig& cfg, LassoStats* stats = nullptr) {
  validate(cfg);
  detail::check_grid(y.grid, grid, "image");
  const ForwardOperator op(grid, psf, drifts);
  const double lambda = resolve_lambda(cfg, op, std::span<const LowResImage>(&y, 1));
  const auto yb = detail::subtract_background(y.data, psf.b);
  WeightVolume w(grid);
  // y = 0 (or lambda above lambda_max) has the zero solution.
  double ymax = 0.0;
  for (double v : yb) ymax = std::max(ymax, std::abs(v));
  if (ymax == 0.0) {
    if (stats) *stats = LassoStats{0.0, 0, 0, 0, true};
    return w;
  }
  const SparseWeights s = solve_lasso_sparse(op, yb, lambda, cfg, {}, stats);
  w.data = s.to_dense(grid.n_high());
  return w;
}

// ---------------------------------------------------------------------------
// Drift estimation
// ---------------------------------------------------------------------------

/// sum_t || y_t[plane] - b - H_plane(candidate) w_t ||^2 over the batch.
inline double score_drift_plane(std::span<const SparseWeights> w_set, std::span<const LowResImage> y_set, int plane,
                                LateralShift candidate, const PsfParams& psf, const GridConfig& grid) {
  if (std::max(std::abs(candidate.dx), std::abs(candidate.dy)) > grid.max_drift) {
    throw Error(ErrorKind::DriftOutOfRange, "candidate drift exceeds max_drift");
  }
  if (plane < 0 || plane >= grid.nplanes()) throw Error(ErrorKind::GridMismatch, "plane index out of range");
  if (w_set.size() != y_set.size()) throw Error(ErrorKind::GridMismatch, "weights and images differ in count");
  const PlaneKernel kernel(grid, psf, plane, candidate);
  const std::size_t ps = grid.plane_size();
  std::vector<double> pred(ps);
  double total = 0.0;
  for (std::size_t t = 0; t < y_set.size(); ++t) {
    std::fill(pred.begin(), pred.end(), 0.0);
    kernel.forward_sparse(w_set[t], pred);
    const double* yt = y_set[t].data.data() + std::size_t(plane) * ps;
    for (std::size_t i = 0; i < ps; ++i) {
      const double r = yt[i] - psf.b - pred[i];
      total += r * r;
    }
  }
  return total;
}

/// Candidate shifts within radius, ordered by l1 norm then lexicographically;
/// the search keeps the first strict minimum, which realises the tie-break.
inline std::vector<LateralShift> drift_candidates(int radius) {
  std::vector<LateralShift> c;
  for (int dx = -radius; dx <= radius; ++dx)
    for (int dy = -radius; dy <= radius; ++dy) c.push_back({dx, dy});
  std::stable_sort(c.begin(), c.end(), [](LateralShift a, LateralShift b) {
    const int na = std::abs(a.dx) + std::abs(a.dy), nb = std::abs(b.dx) + std::abs(b.dy);
    return na < nb || (na == nb && a < b);
  });
  return c;
}

/// Exhaustive per-plane search; exact for fixed weights because the residual
/// separates over plane blocks.
inline DriftSet estimate_drifts(std::span<const SparseWeights> w_set, std::span<const LowResImage> y_set,
                                const PsfParams& psf, const GridConfig& grid, const SolverConfig& cfg) {
  const int radius = std::min(cfg.max_drift, grid.max_drift);
  const auto cands = drift_candidates(radius);
  DriftSet out(grid.nplanes());
  std::vector<std::vector<double>> scores(std::size_t(grid.nplanes()));
  for (int p = 1; p < grid.nplanes(); ++p) {
    auto& sc = scores[std::size_t(p)];
    sc.resize(cands.size());
    parallel_for(cands.size(), cfg.threads, [&](std::size_t c) {
      sc[c] = score_drift_plane(w_set, y_set, p, cands[c], psf, grid);
    });
    std::size_t best = 0;
    for (std::size_t c = 1; c < cands.size(); ++c)
      if (sc[c] < sc[best]) best = c;
    out.set(p, cands[best]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch solve
// ---------------------------------------------------------------------------

/// Lateral translation of a sparse volume by `shift` voxels; entries that
/// leave the grid are dropped.
inline SparseWeights translate(const SparseWeights& w, LateralShift shift, const GridConfig& grid) {
  SparseWeights out;
  for (std::size_t k = 0; k < w.nnz(); ++k) {
    const auto v = grid.high_index3(w.index[k]);
    const int jx = v[0] + shift.dx, jy = v[1] + shift.dy;
    if (!grid.in_bounds(jx, jy, v[2])) continue;
    out.index.push_back(grid.high_index(jx, jy, v[2]));
    out.value.push_back(w.value[k]);
  }
  return out;
}

/// `w` with every voxel within `radius` laterally of its support added as an
/// explicit zero.
inline SparseWeights dilate(const SparseWeights& w, int radius, const GridConfig& grid) {
  std::vector<std::pair<std::int64_t, double>> e;
  for (std::size_t k = 0; k < w.nnz(); ++k) {
    const auto v = grid.high_index3(w.index[k]);
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx)
        if (grid.in_bounds(v[0] + dx, v[1] + dy, v[2])) e.emplace_back(grid.high_index(v[0] + dx, v[1] + dy, v[2]), 0.0);
  }
  for (std::size_t k = 0; k < w.nnz(); ++k) e.emplace_back(w.index[k], w.value[k]);
  // Stable order keeps the original value after its zero copies; keep the last.
  std::stable_sort(e.begin(), e.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  SparseWeights out;
  for (std::size_t k = 0; k < e.size(); ++k) {
    if (k + 1 < e.size() && e[k + 1].first == e[k].first) continue;
    out.index.push_back(e[k].first);
    out.value.push_back(e[k].second);
  }
  return out;
}

/// Batch objective sum_t 0.5 ||y_t - b - H w_t||^2 + lambda ||w_t||_1.
inline double batch_objective(const ForwardOperator& op, std::span<const LowResImage> ys,
                              std::span<const SparseWeights> ws, double lambda) {
  double total = 0.0;
  for (std::size_t t = 0; t < ys.size(); ++t) {
    const auto yb = detail::subtract_background(ys[t].data, op.psf().b);
    total += lasso_objective(op, yb, ws[t], lambda);
  }
  return total;
}

struct SolveResult {
  std::vector<SparseWeights> weights;     ///< one per frame
  DriftSet drifts;
  std::vector<double> objective_trace;    ///< batch objective after each outer round
  std::vector<int> inner_iterations;      ///< per frame, summed over rounds
  double lambda = 0.0;
  int rounds = 0;
  bool converged = false;
  double wall_seconds = 0.0;
};

/// Snapshot after a completed outer round; enough to resume deterministically.
struct AlternatingState {
  int round = 0;
  std::optional<DriftSet> local_optimum;  ///< drifts where the last local search found no move
  double lambda = 0.0;
  DriftSet drifts;
  std::vector<SparseWeights> weights;
  std::vector<double> objective_trace;
  std::vector<int> inner_iterations;
  bool converged = false;
};

using RoundCallback = std::function<void(const AlternatingState&)>;

namespace detail {

// Local search on the profile objective F(drifts) = min_w J(w, drifts).
//
// Weights fitted under the current drifts favour those drifts, so the
// per-plane search stalls when one plane, or a group of planes, is off by a
// voxel. A move shifts a group S of planes by a unit delta relative to the
// others; when S holds the reference plane this is written as the opposite
// shift of the remaining planes plus a translation of the weights. Moves are
// tried in order of their residual change at the current weights, each one
// verified by re-solving the weights warm, and the first that lowers the
// batch objective is taken. The search ends when no move improves.
inline void local_search(std::span<const LowResImage> ys, const std::vector<std::vector<double>>& ybs,
                         AlternatingState& st, double& objective, const PsfParams& psf, const GridConfig& grid,
                         const SolverConfig& cfg) {
  const int np = grid.nplanes();
  const int radius = std::min(cfg.max_drift, grid.max_drift);
  if (np < 2 || radius == 0) return;
  const auto steps = drift_candidates(1);  // steps[0] is (0, 0)
  GridConfig wide = grid;  // scores in the current gauge may leave the drift bound
  wide.max_drift = grid.max_drift + 1;

  // Groups with at most half the planes; at exactly half, those holding plane 0.
  std::vector<std::uint32_t> groups;
  for (std::uint32_t mask = 1; mask + 1 < (std::uint32_t(1) << np); ++mask) {
    const int size = std::popcount(mask);
    if (2 * size < np || (2 * size == np && (mask & 1u))) groups.push_back(mask);
  }

  for (int pass = 0; pass < cfg.max_moves; ++pass) {
    // score[p][k]: plane p residual with its drift moved by steps[k].
    std::vector<std::vector<double>> score(std::size_t(np), std::vector<double>(steps.size()));
    parallel_for(std::size_t(np) * steps.size(), cfg.threads, [&](std::size_t idx) {
      const int p = int(idx / steps.size());
      const auto k = idx % steps.size();
      const LateralShift q{st.drifts[p].dx + steps[k].dx, st.drifts[p].dy + steps[k].dy};
      score[std::size_t(p)][k] = score_drift_plane(st.weights, ys, p, q, psf, wide);
    });

    struct Move {
      double proxy;
      DriftSet drifts;
      LateralShift translate;
    };
    std::vector<Move> moves;
    for (const std::uint32_t group : groups) {
      const bool moves_reference = group & 1u;
      for (std::size_t k = 1; k < steps.size(); ++k) {
        const LateralShift d = steps[k];
        Move mv{0.0, st.drifts, moves_reference ? d : LateralShift{}};
        bool ok = true;
        for (int p = 1; p < np && ok; ++p) {
          const bool in_group = group >> p & 1u;
          LateralShift q = st.drifts[p];
          if (!moves_reference && in_group) q = {q.dx + d.dx, q.dy + d.dy};
          if (moves_reference && !in_group) q = {q.dx - d.dx, q.dy - d.dy};
          ok = std::max(std::abs(q.dx), std::abs(q.dy)) <= radius;
          if (ok) mv.drifts.set(p, q);
        }
        if (!ok) continue;
        for (int p = 0; p < np; ++p)
          if (group >> p & 1u) mv.proxy += 0.5 * (score[std::size_t(p)][k] - score[std::size_t(p)][0]);
        moves.push_back(std::move(mv));
      }
    }
    std::stable_sort(moves.begin(), moves.end(), [](const Move& a, const Move& b) { return a.proxy < b.proxy; });

    bool improved = false;
    if (cfg.max_trials > 0 && moves.size() > std::size_t(cfg.max_trials)) moves.resize(std::size_t(cfg.max_trials));
    for (const auto& mv : moves) {
      // Screen on the translated support alone; a lower restricted objective
      // is already a genuine decrease, and the full solve only refines it.
      const ForwardOperator op(grid, psf, mv.drifts);
      std::vector<SparseWeights> next(ys.size());
      std::vector<double> objs(ys.size(), 0.0);
      std::vector<int> iters(ys.size(), 0);
      parallel_for(ys.size(), cfg.threads, [&](std::size_t t) {
        LassoStats s;
        next[t] = solve_lasso_sparse(op, ybs[t], st.lambda, cfg, dilate(translate(st.weights[t], mv.translate, grid), 1, grid),
                                     &s, {}, true);
        objs[t] = s.objective;
        iters[t] = s.iterations;
      });
      if (!(std::accumulate(objs.begin(), objs.end(), 0.0) < objective)) continue;
      parallel_for(ys.size(), cfg.threads, [&](std::size_t t) {
        LassoStats s;
        next[t] = solve_lasso_sparse(op, ybs[t], st.lambda, cfg, next[t], &s);
        iters[t] += s.iterations;
      });
      const double obj = batch_objective(op, ys, next, st.lambda);
      if (obj < objective) {
        st.drifts = mv.drifts;
        st.weights = std::move(next);
        for (std::size_t t = 0; t < ys.size(); ++t) st.inner_iterations[t] += iters[t];
        objective = obj;
        improved = true;
        break;
      }
    }
    if (!improved) {
      st.local_optimum = st.drifts;
      break;
    }
  }
}

}  // namespace detail

/// Joint estimate of per-frame weights and shared relative drifts.
///
/// Starting from `initial` drifts (zero by default), each round
///   (a) solves every frame's Lasso with drifts fixed, warm-started,
///   (b) re-estimates each plane's drift by exhaustive search,
///   (c) with local_search set, shifts groups of planes by one voxel
///       against the rest while that lowers the objective.
/// Every step is accepted only if it does not raise the batch objective, so
/// the trace is nonincreasing. Stops once the drifts did not change and the
/// objective improved by less than tol (relative), or after outer_rounds.
inline SolveResult alternating_minimize(std::span<const LowResImage> ys, const PsfParams& psf, const GridConfig& grid,
                                        const SolverConfig& cfg, std::optional<DriftSet> initial = std::nullopt,
                                        const RoundCallback& on_round = {},
                                        std::optional<AlternatingState> resume = std::nullopt) {
  validate(cfg);
  validate(grid);
  if (ys.empty()) throw Error(ErrorKind::ConfigError, "alternating_minimize needs T >= 1 frames");
  for (const auto& y : ys) detail::check_grid(y.grid, grid, "image");
  const auto t0 = std::chrono::steady_clock::now();

  AlternatingState st;
  if (resume) {
    st = *resume;
  } else {
    st.drifts = initial ? *initial : DriftSet(grid.nplanes());
    check_drifts(st.drifts, grid);
    st.weights.assign(ys.size(), SparseWeights{});
    st.inner_iterations.assign(ys.size(), 0);
    const ForwardOperator op0(grid, psf, st.drifts);
    st.lambda = resolve_lambda(cfg, op0, ys);
  }
  std::vector<std::vector<double>> ybs(ys.size());
  for (std::size_t t = 0; t < ys.size(); ++t) ybs[t] = detail::subtract_background(ys[t].data, psf.b);

  while (!st.converged && st.round < cfg.outer_rounds) {
    const DriftSet before = st.drifts;
    const double prev = st.objective_trace.empty() ? std::numeric_limits<double>::infinity()
                                                   : st.objective_trace.back();
    // (a) weights
    std::vector<SparseWeights> next(ys.size());
    std::vector<int> iters(ys.size(), 0);
    {
      const ForwardOperator op(grid, psf, st.drifts);
      parallel_for(ys.size(), cfg.threads, [&](std::size_t t) {
        LassoStats s;
        next[t] = solve_lasso_sparse(op, ybs[t], st.lambda, cfg, st.weights[t], &s);
        iters[t] = s.iterations;
      });
      double obj = batch_objective(op, ys, next, st.lambda);
      if (obj <= prev) {
        st.weights = std::move(next);
        for (std::size_t t = 0; t < ys.size(); ++t) st.inner_iterations[t] += iters[t];
      } else {
        obj = prev;
      }
      // (b) drifts
      if (cfg.estimate_drifts && grid.nplanes() > 1) {
        const DriftSet cand = estimate_drifts(st.weights, ys, psf, grid, cfg);
        if (!(cand == st.drifts)) {
          const ForwardOperator opc(grid, psf, cand);
          const double oc = batch_objective(opc, ys, st.weights, st.lambda);
          if (oc <= obj) {
            st.drifts = cand;
            obj = oc;
          }
        }
        // (c) local search over plane-group shifts
        if (cfg.local_search && !(st.local_optimum && *st.local_optimum == st.drifts)) {
          detail::local_search(ys, ybs, st, obj, psf, grid, cfg);
        }
      }
      st.objective_trace.push_back(obj);
    }
    ++st.round;
    const double cur = st.objective_trace.back();
    const bool same = st.drifts == before;
    const bool small = !std::isfinite(prev) || (prev - cur) <= cfg.tol * std::max(1.0, std::abs(cur));
    st.converged = same && small;
    if (!cfg.estimate_drifts) st.converged = st.converged || same;
    if (on_round) on_round(st);
  }

  SolveResult res;
  res.weights = std::move(st.weights);
  res.drifts = st.drifts;
  res.objective_trace = st.objective_trace;
  res.inner_iterations = st.inner_iterations;
  res.lambda = st.lambda;
  res.rounds = st.round;
  res.converged = st.converged;
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------------------
// Detection
// ---------------------------------------------------------------------------

struct Detection {
  std::int64_t voxel = 0;
  double weight = 0.0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Voxels with weight > tau, by descending weight (lower index first on ties).
inline std::vector<Detection> threshold_detect(const SparseWeights& w, double tau) {
  if (!(tau >= 0.0)) throw Error(ErrorKind::ConfigError, "threshold must be >= 0");
  std::vector<Detection> out;
  for (std::size_t k = 0; k < w.nnz(); ++k)
    if (w.value[k] > tau) out.push_back({w.index[k], w.value[k]});
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
    return a.weight > b.weight || (a.weight == b.weight && a.voxel < b.voxel);
  });
  return out;
}

inline std::vector<Detection> threshold_detect(const WeightVolume& w, double tau) {
  return threshold_detect(SparseWeights::from_dense(w.data), tau);
}

/// Single strongest voxel, lowest index on ties; empty for an all-zero volume.
inline std::vector<Detection> top1_detect(const SparseWeights& w) {
  std::vector<Detection> out;
  for (std::size_t k = 0; k < w.nnz(); ++k) {
    if (w.value[k] == 0.0) continue;
    if (out.empty() || w.value[k] > out[0].weight) out = {{w.index[k], w.value[k]}};
  }
  return out;
}

inline std::vector<Detection> top1_detect(const WeightVolume& w) {
  return top1_detect(SparseWeights::from_dense(w.data));
}

/// Detection thresholds used for simulated and measured data.
inline constexpr double kThresholdSimulated = 0.1;
inline constexpr double kThresholdMeasured = 0.05;

}  // namespace mumloc

#endif  // MUMLOC_SOLVER_HPP
