#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace cpd;
using namespace cpd::testing;

namespace {

/// Q of the non-rigid M-step at fixed P and sigma2 as a function of W.
double q_of_w(const Matrix& p, const Matrix& x, const Matrix& y, const Matrix& g, const Matrix& w, double lambda,
              double sigma2) {
  const Matrix t = y + g * w;
  return brute_q(p, x, t, sigma2) + 0.5 * lambda * (w.transpose() * g * w).trace();
}

KernelMatrix kernel_of(const Matrix& y, double beta) { return build_kernel(PointSet(y), beta); }

// Deformation level at which the fish outline is recovered on every seed.
constexpr double kModerate = 0.03;

}  // namespace

// ------------------------------------------------------------------ kernel

TEST(Kernel, SinglePoint) {
  const KernelMatrix g = kernel_of(Matrix::Zero(1, 3), 2.0);
  ASSERT_EQ(g.size(), 1);
  EXPECT_EQ(g.g(0, 0), 1.0);
}

TEST(Kernel, OffDiagonalAtBetaRootTwo) {
  const double beta = 1.7;
  Matrix y = Matrix::Zero(2, 2);
  y(1, 0) = beta * std::sqrt(2.0);
  const KernelMatrix g = kernel_of(y, beta);
  EXPECT_NEAR(g.g(0, 1), std::exp(-1.0), 1e-15);
  EXPECT_NEAR(g.g(0, 1), 0.36788, 1e-5);
}

TEST(Kernel, RejectsNonPositiveBeta) {
  EXPECT_THROW(kernel_of(Matrix::Zero(2, 2), 0.0), Error);
  EXPECT_THROW(kernel_of(Matrix::Zero(2, 2), -1.0), Error);
}

TEST(Kernel, InvariantBattery) {
  Rng rng(31);
  for (int seed = 0; seed < 100; ++seed) {
    const Index dim = 1 + seed % 3;
    const Index m = 5 + static_cast<Index>(rng() % 25);
    const Matrix y = random_points(m, dim, rng);
    const double beta = uniform(rng, 0.2, 3.0);
    const KernelMatrix g = kernel_of(y, beta);
    ASSERT_LT((g.g - g.g.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    ASSERT_TRUE((g.g.diagonal().array() == 1.0).all());
    ASSERT_GT(g.g.minCoeff(), 0.0 - 0.0);
    ASSERT_LE(g.g.maxCoeff(), 1.0);
    const Matrix sym = 0.5 * (g.g + g.g.transpose());
    ASSERT_GE(Eigen::SelfAdjointEigenSolver<Matrix>(sym).eigenvalues().minCoeff(), -1e-9);
    // Rigid motion of the model leaves every affinity unchanged.
    const Matrix moved = (y * random_rotation(dim, rng).transpose()).rowwise() + random_points(1, dim, rng, 3.0).row(0);
    ASSERT_LT((kernel_of(moved, beta).g - g.g).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Kernel, DuplicatePointsStillSolvable) {
  Rng rng(32);
  Matrix y = random_points(10, 2, rng);
  y.row(7) = y.row(2);
  const KernelMatrix g = kernel_of(y, 1.0);
  EXPECT_EQ(g.g.row(7), g.g.row(2));
  const Matrix x = random_points(12, 2, rng);
  const PosteriorStats s = stats_from_dense(dense_posterior(x, y, 0.5, 0.1), x);
  const Matrix w = solve_coefficients(g, s, PointSet(x), PointSet(y), 2.0, 0.5);
  Matrix a = s.p1.asDiagonal() * g.g;
  a.diagonal().array() += 2.0 * 0.5;
  const Matrix rhs = s.px - s.p1.asDiagonal() * y;
  EXPECT_LT((a * w - rhs).norm() / rhs.norm(), 1e-8);
}

// ------------------------------------------------------ solve_coefficients

TEST(SolveCoefficients, ZeroRightHandSide) {
  Rng rng(33);
  const Matrix y = random_points(8, 2, rng);
  PosteriorStats s;
  s.p1 = Vector::Constant(8, 0.7);
  s.pt1 = Vector::Constant(8, 0.7);
  s.px = s.p1.asDiagonal() * y;
  s.np = s.p1.sum();
  const Matrix w = solve_coefficients(kernel_of(y, 2.0), s, PointSet(y), PointSet(y), 2.0, 0.3);
  EXPECT_LT(w.norm(), 1e-15);
}

TEST(SolveCoefficients, ScalarSystem) {
  // (1 + lambda sigma2 / p) w = px / p - y with p = 1, lambda sigma2 = 1, px = 2, y = 0.
  PosteriorStats s;
  s.p1 = Vector::Ones(1);
  s.pt1 = Vector::Ones(1);
  s.px = Matrix::Constant(1, 1, 2.0);
  s.np = 1.0;
  const Matrix y = Matrix::Zero(1, 1);
  const Matrix x = Matrix::Constant(1, 1, 2.0);
  const Matrix w = solve_coefficients(kernel_of(y, 2.0), s, PointSet(x), PointSet(y), 1.0, 1.0);
  EXPECT_NEAR(w(0, 0), 1.0, 1e-15);
}

TEST(SolveCoefficients, GradientOfQVanishes) {
  Rng rng(34);
  for (int trial = 0; trial < 3; ++trial) {
    const Matrix y = random_points(30, 2, rng);
    const Matrix x = y + random_points(30, 2, rng, 0.3);
    const double sigma2 = 0.4, lambda = 2.0;
    const Matrix p = dense_posterior(x, y, sigma2, 0.1);
    const KernelMatrix g = kernel_of(y, 1.5);
    const Matrix w = solve_coefficients(g, stats_from_dense(p, x), PointSet(x), PointSet(y), lambda, sigma2);
    const double h = 1e-6;
    double worst = 0.0;
    for (Index i = 0; i < w.rows(); ++i) {
      for (Index d = 0; d < w.cols(); ++d) {
        Matrix wp = w, wm = w;
        wp(i, d) += h;
        wm(i, d) -= h;
        const double grad =
            (q_of_w(p, x, y, g.g, wp, lambda, sigma2) - q_of_w(p, x, y, g.g, wm, lambda, sigma2)) / (2.0 * h);
        worst = std::max(worst, std::abs(grad));
      }
    }
    EXPECT_LT(worst, 1e-6);
  }
}

TEST(SolveCoefficients, ScaledSystemMatchesKernelForm) {
  Rng rng(35);
  for (int trial = 0; trial < 20; ++trial) {
    const Index m = 15 + trial;
    const Matrix y = random_points(m, 3, rng);
    const Matrix x = random_points(m + 5, 3, rng);
    const double sigma2 = uniform(rng, 0.2, 1.5), lambda = uniform(rng, 0.5, 4.0);
    const PosteriorStats s = stats_from_dense(dense_posterior(x, y, sigma2, 0.2), x);
    ASSERT_GT(s.p1.minCoeff(), 1e-12);
    const KernelMatrix g = kernel_of(y, 2.0);
    const Matrix w = solve_coefficients(g, s, PointSet(x), PointSet(y), lambda, sigma2);
    // (G + lambda sigma2 d(P1)^-1) W = d(P1)^-1 PX - Y, solved directly.
    Matrix a = g.g;
    a.diagonal() += lambda * sigma2 * s.p1.cwiseInverse();
    const Matrix rhs = s.p1.cwiseInverse().asDiagonal() * s.px - y;
    const Matrix direct = a.fullPivLu().solve(rhs);
    ASSERT_LT((w - direct).norm() / direct.norm(), 1e-8);
    ASSERT_LT((a * w - rhs).norm() / rhs.norm(), 1e-9);
  }
}

TEST(SolveCoefficients, ZeroPosteriorRowsStayFinite) {
  Rng rng(36);
  const Matrix y = random_points(10, 2, rng);
  const Matrix x = random_points(10, 2, rng);
  Matrix p = dense_posterior(x, y, 0.5, 0.0);
  p.row(4).setZero();
  const PosteriorStats s = stats_from_dense(p, x);
  const Matrix w = solve_coefficients(kernel_of(y, 2.0), s, PointSet(x), PointSet(y), 2.0, 0.5);
  EXPECT_TRUE(w.allFinite());
  // Row 4 of the scaled system reads lambda sigma2 w_4 = 0.
  EXPECT_LT(w.row(4).norm(), 1e-14);
}

TEST(SolveCoefficients, RejectsBadParameters) {
  Rng rng(37);
  const Matrix y = random_points(4, 2, rng);
  const PosteriorStats s = stats_from_dense(Matrix::Identity(4, 4), y);
  EXPECT_THROW(solve_coefficients(kernel_of(y, 1.0), s, PointSet(y), PointSet(y), 0.0, 1.0), Error);
  EXPECT_THROW(solve_coefficients(kernel_of(y, 1.0), s, PointSet(y), PointSet(y), 1.0, 0.0), Error);
}

// -------------------------------------------------------- transform_points

TEST(TransformPoints, ZeroCoefficientsIsIdentity) {
  Rng rng(38);
  const Matrix y = random_points(6, 3, rng);
  const NonRigidField f{y, Matrix::Zero(6, 3), 2.0};
  const Matrix z = random_points(9, 3, rng);
  EXPECT_EQ(transform_points(f, z), z);
}

TEST(TransformPoints, AtAnchorsMatchesKernelProduct) {
  Rng rng(39);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix y = random_points(20, 2, rng);
    const Matrix w = random_points(20, 2, rng);
    const NonRigidField f{y, w, uniform(rng, 0.5, 3.0)};
    const Matrix expected = y + kernel_of(y, f.beta).g * w;
    EXPECT_LT((transform_points(f, y) - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(TransformPoints, SingleAnchorDisplacement) {
  Matrix y = Matrix::Zero(1, 2);
  Matrix w(1, 2);
  w << 1.0, 0.0;
  const NonRigidField f{y, w, 1.0};
  Matrix z(1, 2);
  z << 1.0, 1.0;
  const Matrix out = transform_points(f, z);
  EXPECT_NEAR(out(0, 0) - 1.0, std::exp(-1.0), 1e-15);
  EXPECT_NEAR(out(0, 1) - 1.0, 0.0, 1e-15);
}

// ---------------------------------------------------- update_sigma2_nonrigid

TEST(UpdateSigma2, PerfectFitHitsFloor) {
  Rng rng(40);
  const Matrix x = random_points(7, 2, rng);
  const PosteriorStats s = stats_from_dense(Matrix::Identity(7, 7), x);
  EXPECT_EQ(update_sigma2_nonrigid(s, PointSet(x), PointSet(x)), kSigma2Floor);
}

TEST(UpdateSigma2, OnePoint) {
  const Matrix x = Matrix::Constant(1, 1, 2.0);
  const PosteriorStats s = stats_from_dense(Matrix::Ones(1, 1), x);
  EXPECT_DOUBLE_EQ(update_sigma2_nonrigid(s, PointSet(x), PointSet(Matrix::Zero(1, 1))), 4.0);
}

TEST(UpdateSigma2, MatchesDoubleLoop) {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = random_points(25, 3, rng);
    const Matrix t = random_points(18, 3, rng);
    const Matrix p = dense_posterior(x, t, uniform(rng, 0.3, 2.0), 0.2);
    double r = 0.0;
    for (Index n = 0; n < 25; ++n)
      for (Index m = 0; m < 18; ++m) r += p(m, n) * (x.row(n) - t.row(m)).squaredNorm();
    const double oracle = r / (p.sum() * 3.0);
    EXPECT_LT(rel_diff(update_sigma2_nonrigid(stats_from_dense(p, x), PointSet(x), PointSet(t)), oracle), 1e-10);
  }
}

TEST(UpdateSigma2, CollapseRejected) {
  const Matrix x = Matrix::Zero(2, 1);
  EXPECT_THROW(update_sigma2_nonrigid(stats_from_dense(Matrix::Zero(2, 2), x), PointSet(x), PointSet(x)), Error);
}

// ------------------------------------------------------- register_nonrigid

TEST(RegisterNonRigid, IdenticalSets) {
  Rng rng(42);
  const Matrix x = random_points(40, 2, rng);
  const RegistrationReport rep = register_nonrigid(PointSet(x), PointSet(x), RegistrationConfig{});
  EXPECT_TRUE(rep.converged);
  const auto& tr = std::get<NonRigidTransform>(rep.transform);
  EXPECT_LT(tr.field.w_coef.cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((rep.aligned - x).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(RegisterNonRigid, CleanDeformedFish) {
  DegradationSpec spec;
  spec.deform = kModerate;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    spec.seed = seed;
    const SyntheticPair pair = synth_pair(spec, fish_shape(), TransformKind::kNonRigid);
    const RegistrationReport rep = register_nonrigid(pair.x, pair.y, RegistrationConfig{});
    const auto m = evaluate(rep, pair.truth);
    EXPECT_LT(m.at("correspondence_mse_norm"), 1e-4) << "seed " << seed;
    EXPECT_GE(m.at("correspondence_accuracy"), 0.99) << "seed " << seed;
    // Evaluating the returned map on Y reproduces the aligned points.
    EXPECT_LT((apply_transform(rep.transform, pair.y.matrix()) - rep.aligned).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(RegisterNonRigid, QDecreasesEveryIteration) {
  Rng rng(43);
  DegradationSpec spec;
  spec.deform = 0.2;
  spec.noise = 0.01;
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    spec.seed = seed;
    const SyntheticPair pair = synth_pair(spec, fish_shape(), TransformKind::kNonRigid);
    RegistrationConfig c;
    c.w = seed % 2 == 0 ? 0.0 : 0.2;
    const RegistrationReport rep = register_nonrigid(pair.x, pair.y, c);
    for (const auto& d : rep.diagnostics) {
      ASSERT_LE(d.q_after, d.q_before + 1e-9 * std::abs(d.q_before)) << "seed " << seed << " iter " << d.iteration;
      ASSERT_GE(d.sigma2, kSigma2Floor);
    }
  }
}

TEST(RegisterNonRigid, LargeLambdaApproachesIdentity) {
  DegradationSpec spec;
  spec.deform = 0.2;
  spec.seed = 4;
  const SyntheticPair pair = synth_pair(spec, fish_shape(), TransformKind::kNonRigid);
  RegistrationConfig c;
  c.lambda = 1e6;
  const RegistrationReport rep = register_nonrigid(pair.x, pair.y, c);
  const auto& tr = std::get<NonRigidTransform>(rep.transform);
  const Matrix yn = normalize_with(tr.input, pair.y.matrix());
  const Matrix disp = transform_points(tr.field, yn) - yn;
  EXPECT_LT(disp.rowwise().norm().maxCoeff(), 1e-3);
  EXPECT_LT(tr.field.w_coef.norm(), 1e-3);
}

TEST(SolveCoefficients, StrongerRegularizationNeverBendsMore) {
  // Fixed posteriors, variance and kernel; lambda sweeps upward.
  Rng rng(44);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix y = random_points(30, 2, rng);
    const Matrix x = y + random_points(30, 2, rng, uniform(rng, 0.05, 0.5));
    const double sigma2 = uniform(rng, 0.05, 1.0);
    const PosteriorStats s = stats_from_dense(dense_posterior(x, y, sigma2, 0.1), x);
    const KernelMatrix g = kernel_of(y, uniform(rng, 0.5, 4.0));
    double prev = std::numeric_limits<double>::infinity();
    for (double lambda : {0.1, 0.5, 2.0, 8.0, 32.0}) {
      const Matrix w = solve_coefficients(g, s, PointSet(x), PointSet(y), lambda, sigma2);
      const double energy = bending_energy(w, g.g * w);
      ASSERT_LE(energy, prev * (1.0 + 1e-9)) << "trial " << trial << " lambda " << lambda;
      prev = energy;
    }
  }
}

TEST(RegisterNonRigid, OutliersBeatIcpBaseline) {
  DegradationSpec spec;
  spec.deform = kModerate;
  spec.outliers = 91;
  spec.outliers_on = SetTarget::kBoth;
  int wins = 0;
  double cpd_total = 0.0, icp_total = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    spec.seed = seed;
    const SyntheticPair pair = synth_pair(spec, fish_shape(), TransformKind::kNonRigid);
    RegistrationConfig c;
    c.w = 0.5;
    const double cpd_err = evaluate(register_nonrigid(pair.x, pair.y, c), pair.truth).at("correspondence_mse_norm");
    const double icp_err = evaluate(icp_baseline(pair.x, pair.y, c), pair.truth).at("correspondence_mse_norm");
    wins += cpd_err < icp_err ? 1 : 0;
    cpd_total += cpd_err;
    icp_total += icp_err;
  }
  EXPECT_LT(cpd_total, icp_total);
  EXPECT_GE(wins, 8);
}

TEST(RegisterNonRigid, LowRankCloseToDense) {
  DegradationSpec spec;
  spec.deform = kModerate;
  spec.seed = 2;
  const SyntheticPair pair = synth_pair(spec, fish_shape(), TransformKind::kNonRigid);
  RegistrationConfig c;
  const RegistrationReport dense = register_nonrigid(pair.x, pair.y, c);
  c.lowrank = 40;
  const RegistrationReport low = register_nonrigid(pair.x, pair.y, c);
  EXPECT_LT(evaluate(low, pair.truth).at("correspondence_mse_norm"), 1e-3);
  EXPECT_LT(correspondence_mse(dense.aligned, low.aligned), 1e-3);
  for (const auto& d : low.diagnostics) ASSERT_LE(d.q_after, d.q_before + 1e-9 * std::abs(d.q_before));
}

TEST(RegisterNonRigid, InnerPassesKnob) {
  DegradationSpec spec;
  spec.deform = kModerate;
  spec.seed = 6;
  const SyntheticPair pair = synth_pair(spec, fish_shape(), TransformKind::kNonRigid);
  RegistrationConfig c;
  c.inner_iters = 3;
  const RegistrationReport rep = register_nonrigid(pair.x, pair.y, c);
  EXPECT_LT(evaluate(rep, pair.truth).at("correspondence_mse_norm"), 1e-4);
  // Near the exact fit sigma2 reaches 1e-8 and Q carries cancellation noise.
  for (const auto& d : rep.diagnostics) ASSERT_LE(d.q_after, d.q_before + 1e-8 * std::abs(d.q_before));
}
