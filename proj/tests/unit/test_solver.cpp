#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "mumloc/forward.hpp"
#include "mumloc/simulator.hpp"
#include "mumloc/solver.hpp"

using namespace mumloc;

namespace {

const PsfParams kInst = PsfParams::instrument();

// 4x4x2 camera samples over 16x16x4 voxels.
GridConfig tiny_grid() {
  GridConfig g;
  g.low_dims = {4, 4, 2};
  g.high_dims = {16, 16, 4};
  g.low_voxel = {192.0, 192.0, 400.0};
  g.high_voxel = {48.0, 48.0, 100.0};
  g.plane_offsets = {0.0, 400.0};
  return g;
}

// Three planes so drift sets have 25^2 members.
GridConfig tiny3_grid() {
  GridConfig g;
  g.low_dims = {4, 4, 3};
  g.high_dims = {16, 16, 6};
  g.low_voxel = {192.0, 192.0, 200.0};
  g.high_voxel = {48.0, 48.0, 100.0};
  g.plane_offsets = {0.0, 200.0, 400.0};
  return g;
}

GridConfig scalar_grid() {
  GridConfig g;
  g.low_dims = {1, 1, 1};
  g.high_dims = {1, 1, 1};
  g.low_voxel = {24.0, 24.0, 50.0};
  g.high_voxel = {24.0, 24.0, 50.0};
  g.plane_offsets = {25.0};
  g.max_drift = 0;
  return g;
}

SolverConfig tight() {
  SolverConfig c;
  c.max_iters = 200000;
  c.tol = 1e-14;
  c.kkt_tol = 1e-9;
  return c;
}

Eigen::MatrixXd dense(const GridConfig& g, const DriftSet& d, const PsfParams& psf = kInst) {
  const DenseMatrix h = build_dense_matrix(d, psf, g);
  Eigen::MatrixXd m(Eigen::Index(h.rows), Eigen::Index(h.cols));
  for (std::size_t i = 0; i < h.rows; ++i)
    for (std::size_t j = 0; j < h.cols; ++j) m(Eigen::Index(i), Eigen::Index(j)) = h(i, j);
  return m;
}

// Cyclic coordinate descent on 0.5 ||y - H w||^2 + lambda ||w||_1, w >= 0.
Eigen::VectorXd coordinate_descent(const Eigen::MatrixXd& h, const Eigen::VectorXd& y, double lambda) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(h.cols());
  Eigen::VectorXd r = y;
  const Eigen::VectorXd sq = h.colwise().squaredNorm();
  for (int sweep = 0; sweep < 20000; ++sweep) {
    double change = 0.0;
    for (Eigen::Index j = 0; j < h.cols(); ++j) {
      if (sq(j) == 0.0) continue;
      const double rho = h.col(j).dot(r) + sq(j) * w(j);
      const double nw = std::max(0.0, (rho - lambda) / sq(j));
      if (nw != w(j)) {
        r -= (nw - w(j)) * h.col(j);
        change = std::max(change, std::abs(nw - w(j)));
        w(j) = nw;
      }
    }
    if (change < 1e-13) break;
  }
  return w;
}

// Duality gap of a nonnegative Lasso iterate: the residual scaled into the
// dual feasible set {theta : H^T theta <= lambda} gives a lower bound.
double duality_gap(const Eigen::MatrixXd& h, const Eigen::VectorXd& y, const Eigen::VectorXd& w, double lambda) {
  const Eigen::VectorXd r = y - h * w;
  const double m = (h.transpose() * r).maxCoeff();
  const Eigen::VectorXd theta = m > lambda ? Eigen::VectorXd(r * (lambda / m)) : r;
  const double primal = 0.5 * r.squaredNorm() + lambda * w.lpNorm<1>();
  const double dual = theta.dot(y) - 0.5 * theta.squaredNorm();
  return primal - dual;
}

double dense_objective(const Eigen::MatrixXd& h, const Eigen::VectorXd& y, const Eigen::VectorXd& w, double lambda) {
  return 0.5 * (y - h * w).squaredNorm() + lambda * w.lpNorm<1>();
}

struct Instance {
  std::vector<LowResImage> ys;
  std::vector<SparseWeights> truth;
};

// Noiseless frames of K voxel-centred molecules under `drifts`.
Instance make_instance(const GridConfig& g, const DriftSet& drifts, int frames, int k, std::uint64_t seed,
                       int margin = 0) {
  Instance in;
  Rng rng(seed, StreamPurpose::Test, 20);
  for (int t = 0; t < frames; ++t) {
    WeightVolume w(g);
    for (int m = 0; m < k; ++m) {
      const int ix = rng.uniform_int(margin, g.high_dims[0] - 1 - margin);
      const int iy = rng.uniform_int(margin, g.high_dims[1] - 1 - margin);
      const int iz = rng.uniform_int(0, g.high_dims[2] - 1);
      w[std::size_t(g.high_index(ix, iy, iz))] = rng.uniform(0.3, 1.0);
    }
    in.truth.push_back(SparseWeights::from_dense(w.data));
    in.ys.push_back(apply_forward(w, drifts, kInst, g));
  }
  return in;
}

}  // namespace

TEST(SoftThreshold, Values) {
  EXPECT_EQ(soft_threshold(3.0, 1.0), 2.0);
  EXPECT_EQ(soft_threshold(-3.0, 1.0), -2.0);
  EXPECT_EQ(soft_threshold(0.5, 1.0), 0.0);
  EXPECT_EQ(soft_threshold(-1.0, 1.0), 0.0);
}

TEST(SolveLasso, ZeroImageGivesZeroWeights) {
  const GridConfig g = GridConfig::half();
  LassoStats st;
  const WeightVolume w = solve_lasso(LowResImage(g), DriftSet(4), kInst, g, SolverConfig{}, &st);
  for (double v : w.data) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(st.converged);
}

TEST(SolveLasso, ScalarClosedForm) {
  const GridConfig g = scalar_grid();
  const double h = peak_amplitude(0.0, kInst) * truncated_gaussian(0.0, 1.0, 4.0);
  for (double y : {0.0, 10.0, 449.0, 1000.0}) {
    for (double lambda : {0.0, 50.0, 2000.0}) {
      LowResImage img(g);
      img[0] = y;
      SolverConfig c = tight();
      c.lambda = lambda;
      const WeightVolume w = solve_lasso(img, DriftSet(1), kInst, g, c);
      const double oracle = std::max(0.0, (h * y - lambda) / (h * h));
      EXPECT_NEAR(w[0], oracle, 1e-8 * std::max(1.0, oracle)) << "y=" << y << " lambda=" << lambda;
    }
  }
}

TEST(SolveLasso, ScalarSignedClosedForm) {
  const GridConfig g = scalar_grid();
  const double h = peak_amplitude(0.0, kInst);
  LowResImage img(g);
  img[0] = -500.0;
  SolverConfig c = tight();
  c.lambda = 100.0;
  c.nonneg = false;
  const double oracle = soft_threshold(h * -500.0, 100.0) / (h * h);
  EXPECT_NEAR(solve_lasso(img, DriftSet(1), kInst, g, c)[0], oracle, 1e-8 * std::abs(oracle));
  c.nonneg = true;
  EXPECT_EQ(solve_lasso(img, DriftSet(1), kInst, g, c)[0], 0.0);
}

TEST(SolveLasso, LambdaAboveMaxGivesZero) {
  const GridConfig g = tiny_grid();
  const Instance in = make_instance(g, DriftSet(2), 1, 3, 1);
  SolverConfig c;
  c.lambda_rel = 1.0 + 1e-9;
  const WeightVolume w = solve_lasso(in.ys[0], DriftSet(2), kInst, g, c);
  for (double v : w.data) EXPECT_EQ(v, 0.0);
}

TEST(SolveLasso, MatchesCoordinateDescentOracle) {
  const GridConfig g = tiny_grid();
  Rng rng(3, StreamPurpose::Test, 21);
  for (int trial = 0; trial < 4; ++trial) {
    DriftSet d(2);
    d.set(1, {rng.uniform_int(-2, 2), rng.uniform_int(-2, 2)});
    const Instance in = make_instance(g, d, 1, 2, std::uint64_t(trial));
    LowResImage y = in.ys[0];
    for (double& v : y.data) v += 5.0 * rng.normal();
    const Eigen::MatrixXd h = dense(g, d);
    const Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data.data(), Eigen::Index(y.size()));
    const double lambda = 0.05 * (h.transpose() * yv).cwiseAbs().maxCoeff();
    SolverConfig c = tight();
    c.lambda = lambda;
    const WeightVolume w = solve_lasso(y, d, kInst, g, c);
    const Eigen::VectorXd ws = Eigen::Map<const Eigen::VectorXd>(w.data.data(), Eigen::Index(w.size()));
    const Eigen::VectorXd wo = coordinate_descent(h, yv, lambda);
    const double fo = dense_objective(h, yv, wo, lambda);
    const double fs = dense_objective(h, yv, ws, lambda);
    EXPECT_LE(fs, fo * (1 + 1e-9));
    EXPECT_GE(ws.minCoeff(), 0.0);
    EXPECT_LE(duality_gap(h, yv, ws, lambda), 1e-6 * fs);
  }
}

TEST(SolveLasso, SatisfiesKktConditions) {
  const GridConfig g = GridConfig::half();
  DriftSet d(4);
  d.set(2, {1, -1});
  const Instance in = make_instance(g, d, 1, 3, 5, 8);
  const ForwardOperator op(g, kInst, d);
  SolverConfig c;
  c.lambda_rel = 0.02;
  c.kkt_tol = 1e-6;
  c.tol = 1e-12;
  c.max_iters = 100000;
  const double lambda = resolve_lambda(c, op, in.ys);
  const SparseWeights w = solve_lasso_sparse(op, in.ys[0].data, lambda, c);
  const auto hw = op.apply(w);
  std::vector<double> r(hw.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = in.ys[0][i] - hw[i];
  const auto grad = op.adjoint(r);
  const auto wd = w.to_dense(g.n_high());
  for (std::size_t j = 0; j < wd.size(); ++j) {
    if (wd[j] > 0.0) {
      ASSERT_NEAR(grad[j], lambda, 1e-4 * lambda) << j;
    } else {
      ASSERT_LE(grad[j], lambda * (1.0 + 1e-4)) << j;
    }
  }
}

TEST(SolveLasso, ScalesWithImage) {
  const GridConfig g = tiny_grid();
  const Instance in = make_instance(g, DriftSet(2), 1, 3, 7);
  SolverConfig c = tight();
  c.lambda = 20.0;
  const WeightVolume w1 = solve_lasso(in.ys[0], DriftSet(2), kInst, g, c);
  LowResImage y2 = in.ys[0];
  for (double& v : y2.data) v *= 3.0;
  c.lambda = 60.0;
  const WeightVolume w3 = solve_lasso(y2, DriftSet(2), kInst, g, c);
  double m = 0.0;
  for (double v : w1.data) m = std::max(m, v);
  for (std::size_t j = 0; j < w1.size(); ++j) EXPECT_NEAR(w3[j], 3.0 * w1[j], 1e-5 * m);
}

TEST(SolveLasso, BackgroundIsRemoved) {
  const GridConfig g = tiny_grid();
  const Instance in = make_instance(g, DriftSet(2), 1, 2, 8);
  PsfParams p = kInst;
  p.b = 12.0;
  LowResImage y = in.ys[0];
  for (double& v : y.data) v += 12.0;
  SolverConfig c = tight();
  c.lambda = 10.0;
  const WeightVolume a = solve_lasso(in.ys[0], DriftSet(2), kInst, g, c);
  const WeightVolume b = solve_lasso(y, DriftSet(2), p, g, c);
  for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(a[j], b[j], 1e-9);
}

TEST(SolveLassoSparse, FixedSetKeepsSupport) {
  const GridConfig g = GridConfig::half();
  const Instance in = make_instance(g, DriftSet(4), 1, 3, 9, 4);
  const ForwardOperator op(g, kInst, DriftSet(4));
  SolverConfig c;
  const double lambda = resolve_lambda(c, op, in.ys);
  const SparseWeights warm = dilate(in.truth[0], 1, g);
  LassoStats st;
  const SparseWeights w = solve_lasso_sparse(op, in.ys[0].data, lambda, c, warm, &st, {}, true);
  for (auto j : w.index) EXPECT_TRUE(std::binary_search(warm.index.begin(), warm.index.end(), j));
  EXPECT_NEAR(st.objective, lasso_objective(op, in.ys[0].data, w, lambda), 1e-9 * st.objective);
  // The unrestricted solve can only do better.
  const SparseWeights full = solve_lasso_sparse(op, in.ys[0].data, lambda, c);
  EXPECT_LE(lasso_objective(op, in.ys[0].data, full, lambda), st.objective * (1 + 1e-6));
}

TEST(Dilate, AddsZeroNeighboursKeepsValues) {
  const GridConfig g = GridConfig::half();
  SparseWeights w;
  w.index = {g.high_index(0, 0, 3), g.high_index(10, 10, 5), g.high_index(11, 10, 5)};
  w.value = {0.5, 0.7, 0.9};
  const SparseWeights d = dilate(w, 1, g);
  EXPECT_TRUE(std::is_sorted(d.index.begin(), d.index.end()));
  EXPECT_EQ(d.nnz(), 4u + 12u);  // corner keeps 2x2, the adjacent pair covers 4x3
  for (std::size_t k = 0; k < d.nnz(); ++k) {
    const auto it = std::find(w.index.begin(), w.index.end(), d.index[k]);
    const double expected = it == w.index.end() ? 0.0 : w.value[std::size_t(it - w.index.begin())];
    EXPECT_EQ(d.value[k], expected);
  }
  EXPECT_EQ(d.l1(), w.l1());
}

TEST(Translate, MovesAndDropsOutOfGrid) {
  const GridConfig g = GridConfig::half();
  SparseWeights w;
  w.index = {g.high_index(0, 5, 1), g.high_index(20, 30, 2)};
  w.value = {0.4, 0.8};
  const SparseWeights t = translate(w, {-1, 2}, g);
  ASSERT_EQ(t.nnz(), 1u);
  EXPECT_EQ(t.index[0], g.high_index(19, 32, 2));
  EXPECT_EQ(t.value[0], 0.8);
}

TEST(DriftCandidates, OrderedByL1ThenLexicographic) {
  const auto c = drift_candidates(2);
  ASSERT_EQ(c.size(), 25u);
  EXPECT_EQ(c[0].dx, 0);
  EXPECT_EQ(c[0].dy, 0);
  for (std::size_t k = 1; k < c.size(); ++k) {
    const int a = std::abs(c[k - 1].dx) + std::abs(c[k - 1].dy), b = std::abs(c[k].dx) + std::abs(c[k].dy);
    EXPECT_LE(a, b);
    if (a == b) {
      EXPECT_TRUE(c[k - 1] < c[k]);
    }
  }
  EXPECT_EQ(drift_candidates(0).size(), 1u);
}

TEST(ScoreDriftPlane, MatchesDenseResidual) {
  const GridConfig g = tiny3_grid();
  Rng rng(12, StreamPurpose::Test, 22);
  DriftSet truth(3);
  truth.set(1, {1, 0});
  truth.set(2, {-2, 1});
  const Instance in = make_instance(g, truth, 2, 2, 12);
  for (int p = 0; p < 3; ++p)
    for (const LateralShift s : drift_candidates(2)) {
      DriftSet d(3);
      if (p > 0) d.set(p, s);
      else if (s.dx != 0 || s.dy != 0) continue;
      const Eigen::MatrixXd h = dense(g, d);
      double oracle = 0.0;
      for (std::size_t t = 0; t < 2; ++t) {
        const auto wd = in.truth[t].to_dense(g.n_high());
        const Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(wd.data(), Eigen::Index(wd.size()));
        const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(in.ys[t].data.data(), Eigen::Index(in.ys[t].size()));
        oracle += (y - h * w).segment(p * 16, 16).squaredNorm();
      }
      EXPECT_NEAR(score_drift_plane(in.truth, in.ys, p, p > 0 ? s : LateralShift{}, kInst, g), oracle,
                  1e-9 * std::max(1.0, oracle));
    }
  EXPECT_THROW(score_drift_plane(in.truth, in.ys, 1, {3, 0}, kInst, g), Error);
}

TEST(EstimateDrifts, ExactWithTrueWeights) {
  const GridConfig g = GridConfig::full();
  Rng rng(13, StreamPurpose::Test, 23);
  for (int trial = 0; trial < 5; ++trial) {
    const DriftSet truth = sample_drifts(rng, 4, 2);
    const Instance in = make_instance(g, truth, 3, 3, std::uint64_t(100 + trial), 8);
    const DriftSet est = estimate_drifts(in.truth, in.ys, kInst, g, SolverConfig{});
    for (int p = 0; p < 4; ++p) {
      EXPECT_EQ(est[p].dx, truth[p].dx);
      EXPECT_EQ(est[p].dy, truth[p].dy);
    }
  }
}

TEST(EstimateDrifts, ArgminOfPerPlaneScores) {
  const GridConfig g = tiny3_grid();
  DriftSet truth(3);
  truth.set(1, {2, 2});
  const Instance in = make_instance(g, truth, 2, 2, 14);
  // Perturbed weights so the minimum is not trivially the truth.
  std::vector<SparseWeights> w = in.truth;
  for (auto& s : w)
    for (auto& v : s.value) v *= 0.7;
  const DriftSet est = estimate_drifts(w, in.ys, kInst, g, SolverConfig{});
  for (int p = 1; p < 3; ++p) {
    double best = std::numeric_limits<double>::infinity();
    LateralShift arg{};
    for (const LateralShift s : drift_candidates(2)) {
      const double v = score_drift_plane(w, in.ys, p, s, kInst, g);
      if (v < best) {
        best = v;
        arg = s;
      }
    }
    EXPECT_EQ(est[p].dx, arg.dx);
    EXPECT_EQ(est[p].dy, arg.dy);
  }
}

TEST(EstimateDrifts, ZeroRadiusReturnsZero) {
  const GridConfig g = tiny3_grid();
  DriftSet truth(3);
  truth.set(1, {1, 1});
  const Instance in = make_instance(g, truth, 1, 2, 15);
  SolverConfig c;
  c.max_drift = 0;
  EXPECT_EQ(estimate_drifts(in.truth, in.ys, kInst, g, c).max_abs(), 0);
}

TEST(EstimateDrifts, PlanesAreIndependent) {
  const GridConfig g = tiny3_grid();
  DriftSet truth(3);
  truth.set(1, {-1, 2});
  truth.set(2, {1, 0});
  const Instance in = make_instance(g, truth, 2, 2, 16);
  const DriftSet a = estimate_drifts(in.truth, in.ys, kInst, g, SolverConfig{});
  std::vector<LowResImage> ys = in.ys;
  for (auto& y : ys)
    for (std::size_t i = 32; i < 48; ++i) y[i] = 0.0;  // wipe plane 2
  const DriftSet b = estimate_drifts(in.truth, ys, kInst, g, SolverConfig{});
  EXPECT_EQ(a[1].dx, b[1].dx);
  EXPECT_EQ(a[1].dy, b[1].dy);
}

TEST(AlternatingMinimize, TraceIsNonincreasingAndDriftsRecovered) {
  const GridConfig g = GridConfig::full();
  Rng rng(17, StreamPurpose::Test, 24);
  for (int trial = 0; trial < 3; ++trial) {
    const DriftSet truth = sample_drifts(rng, 4, 2);
    const Instance in = make_instance(g, truth, 4, 3, std::uint64_t(200 + trial), 8);
    SolverConfig c;
    c.lambda_rel = 0.01;
    const SolveResult r = alternating_minimize(in.ys, kInst, g, c);
    ASSERT_FALSE(r.objective_trace.empty());
    for (std::size_t k = 1; k < r.objective_trace.size(); ++k)
      EXPECT_LE(r.objective_trace[k], r.objective_trace[k - 1] * (1 + 1e-12));
    for (int p = 0; p < 4; ++p) {
      EXPECT_EQ(r.drifts[p].dx, truth[p].dx) << "trial " << trial << " plane " << p;
      EXPECT_EQ(r.drifts[p].dy, truth[p].dy) << "trial " << trial << " plane " << p;
    }
    EXPECT_EQ(r.weights.size(), 4u);
  }
}

TEST(AlternatingMinimize, SingleZeroDriftFrameConverges) {
  const GridConfig g = GridConfig::full();
  const Instance in = make_instance(g, DriftSet(4), 1, 2, 18, 8);
  SolverConfig c;
  c.lambda_rel = 0.01;
  const SolveResult r = alternating_minimize(in.ys, kInst, g, c);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.drifts.max_abs(), 0);
}

TEST(AlternatingMinimize, FixedDriftsWhenEstimationDisabled) {
  const GridConfig g = GridConfig::full();
  DriftSet truth(4);
  truth.set(3, {2, 2});
  const Instance in = make_instance(g, truth, 2, 2, 19, 8);
  SolverConfig c;
  c.estimate_drifts = false;
  c.local_search = false;
  EXPECT_EQ(alternating_minimize(in.ys, kInst, g, c).drifts.max_abs(), 0);
  DriftSet init(4);
  init.set(1, {-1, 0});
  const SolveResult r = alternating_minimize(in.ys, kInst, g, c, init);
  EXPECT_EQ(r.drifts[1].dx, -1);
}

TEST(AlternatingMinimize, ReachesExhaustiveOptimumOnTinyInstances) {
  const GridConfig g = tiny3_grid();
  Rng rng(20, StreamPurpose::Test, 25);
  for (int trial = 0; trial < 3; ++trial) {
    const DriftSet truth = sample_drifts(rng, 3, 2);
    const Instance in = make_instance(g, truth, 3, 2, std::uint64_t(300 + trial), 2);
    SolverConfig c = tight();
    c.lambda_rel = 0.01;
    const SolveResult r = alternating_minimize(in.ys, kInst, g, c);
    // Profile objective min_w J(w, d) over all 625 drift sets.
    double best = std::numeric_limits<double>::infinity();
    for (const LateralShift s1 : drift_candidates(2))
      for (const LateralShift s2 : drift_candidates(2)) {
        DriftSet d(3);
        d.set(1, s1);
        d.set(2, s2);
        const ForwardOperator op(g, kInst, d);
        double f = 0.0;
        for (const auto& y : in.ys) {
          LassoStats st;
          solve_lasso_sparse(op, y.data, r.lambda, c, {}, &st);
          f += st.objective;
        }
        best = std::min(best, f);
      }
    EXPECT_LE(r.objective_trace.back(), best * (1 + 1e-6)) << "trial " << trial;
  }
}

TEST(AlternatingMinimize, RoundCallbackAndResumeAgree) {
  const GridConfig g = GridConfig::full();
  DriftSet truth(4);
  truth.set(1, {1, -2});
  truth.set(2, {0, 1});
  const Instance in = make_instance(g, truth, 3, 2, 21, 8);
  SolverConfig c;
  c.lambda_rel = 0.01;
  std::vector<AlternatingState> states;
  const SolveResult full = alternating_minimize(in.ys, kInst, g, c, std::nullopt,
                                                [&](const AlternatingState& s) { states.push_back(s); });
  ASSERT_FALSE(states.empty());
  EXPECT_EQ(int(states.size()), full.rounds);
  const SolveResult resumed = alternating_minimize(in.ys, kInst, g, c, std::nullopt, {}, states.front());
  EXPECT_EQ(resumed.objective_trace, full.objective_trace);
  for (std::size_t t = 0; t < full.weights.size(); ++t) {
    EXPECT_EQ(resumed.weights[t].index, full.weights[t].index);
    EXPECT_EQ(resumed.weights[t].value, full.weights[t].value);
  }
}

TEST(AlternatingMinimize, RejectsEmptyBatch) {
  EXPECT_THROW(alternating_minimize({}, kInst, GridConfig::half(), SolverConfig{}), Error);
}

TEST(Detect, ThresholdIsStrictAndOrdered) {
  SparseWeights w;
  w.index = {3, 7, 9, 12};
  w.value = {0.1, 0.5, 0.5, 0.2};
  const auto d = threshold_detect(w, 0.1);
  ASSERT_EQ(d.size(), 3u);
  EXPECT_EQ(d[0], (Detection{7, 0.5}));
  EXPECT_EQ(d[1], (Detection{9, 0.5}));
  EXPECT_EQ(d[2], (Detection{12, 0.2}));
  EXPECT_TRUE(threshold_detect(w, 0.6).empty());
  EXPECT_THROW(threshold_detect(w, -1.0), Error);
}

TEST(Detect, Top1PicksLowestIndexOnTies) {
  SparseWeights w;
  w.index = {3, 7, 9};
  w.value = {0.1, 0.5, 0.5};
  const auto d = top1_detect(w);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0], (Detection{7, 0.5}));
  EXPECT_TRUE(top1_detect(SparseWeights{}).empty());
}

TEST(Detect, DenseAndSparseOverloadsAgree) {
  const GridConfig g = tiny_grid();
  WeightVolume w(g);
  w[5] = 0.3;
  w[40] = 0.06;
  w[99] = 0.8;
  EXPECT_EQ(threshold_detect(w, kThresholdSimulated), threshold_detect(SparseWeights::from_dense(w.data), 0.1));
  EXPECT_EQ(top1_detect(w)[0].voxel, 99);
  EXPECT_EQ(threshold_detect(w, kThresholdMeasured).size(), 3u);
}

TEST(SolverConfig, ValidationRejectsBadValues) {
  SolverConfig c;
  c.lambda = -1.0;
  EXPECT_THROW(validate(c), Error);
  c = {};
  c.step_safety = 1.5;
  EXPECT_THROW(validate(c), Error);
  c = {};
  c.outer_rounds = 0;
  EXPECT_THROW(validate(c), Error);
  EXPECT_NO_THROW(validate(SolverConfig{}));
}
