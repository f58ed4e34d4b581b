#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace cpd;
using namespace cpd::testing;

namespace {

double trace_objective(const Matrix& a, const Matrix& r) { return (a.transpose() * r).trace(); }

void expect_rotation(const Matrix& r, double tol = 1e-12) {
  const Index d = r.rows();
  EXPECT_LT((r.transpose() * r - Matrix::Identity(d, d)).norm(), tol);
  EXPECT_NEAR(r.determinant(), 1.0, tol);
}

/// Q of the rigid/affine M-step with P fixed: residual / 2 sigma2 + N_P D / 2 log sigma2.
double fixed_p_objective(const Matrix& p, const Matrix& x, const Matrix& t, double sigma2) {
  return brute_q(p, x, t, sigma2);
}

RegistrationConfig exact_config() {
  RegistrationConfig c;
  c.w = 0.0;
  return c;
}

}  // namespace

// ------------------------------------------------------------ solve_rotation

TEST(SolveRotation, IdentityInput) {
  for (Index d = 1; d <= 4; ++d) {
    EXPECT_LT((solve_rotation(Matrix::Identity(d, d)) - Matrix::Identity(d, d)).norm(), 1e-14);
  }
}

TEST(SolveRotation, PositiveDiagonal) {
  Matrix a(2, 2);
  a << 2, 0, 0, 1;
  EXPECT_LT((solve_rotation(a) - Matrix::Identity(2, 2)).norm(), 1e-14);
}

TEST(SolveRotation, ThirtyDegreesMatchesAngleGrid) {
  Matrix d(2, 2);
  d << 3, 0, 0, 1;
  const double angle = 30.0 * std::numbers::pi / 180.0;
  const Matrix a = rotation_2d(angle) * d;
  const Matrix r = solve_rotation(a);
  EXPECT_LT((r - rotation_2d(angle)).norm(), 1e-12);
  double best = -1e300, best_theta = 0.0;
  for (int k = 0; k < 36000; ++k) {
    const double theta = 2.0 * std::numbers::pi * k / 36000.0;
    const double v = trace_objective(a, rotation_2d(theta));
    if (v > best) {
      best = v;
      best_theta = theta;
    }
  }
  EXPECT_NEAR(std::atan2(r(1, 0), r(0, 0)), best_theta, 2.0 * std::numbers::pi / 36000.0);
}

TEST(SolveRotation, ReflectionIsCorrected) {
  // A proper reflection: the best rotation cannot be A itself.
  Matrix a(2, 2);
  a << 1, 0, 0, -2;
  const Matrix r = solve_rotation(a);
  expect_rotation(r);
  for (int k = 0; k < 3600; ++k) {
    ASSERT_GE(trace_objective(a, r) + 1e-12, trace_objective(a, rotation_2d(2.0 * std::numbers::pi * k / 3600.0)));
  }
}

TEST(SolveRotation, DegenerateFlagged) {
  Matrix a = Matrix::Identity(3, 3);
  a(1, 1) = -1.0;
  a(2, 2) = -1.0;
  a(0, 0) = 2.0;
  // det(U V^T) = +1 here; make it a reflection with equal trailing values.
  a(2, 2) = 1.0;
  const RotationSolution sol = solve_rotation_detailed(a);
  expect_rotation(sol.r);
  EXPECT_TRUE(sol.ambiguous);
}

TEST(SolveRotation, RejectsBadInput) {
  EXPECT_THROW(solve_rotation(Matrix::Zero(2, 3)), Error);
  Matrix a = Matrix::Identity(2, 2);
  a(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(solve_rotation(a), Error);
}

TEST(SolveRotation, BeatsRandomRotationsAndIsProper) {
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    const Index d = 2 + trial % 3;
    const Matrix a = random_points(d, d, rng);
    const Matrix r = solve_rotation(a);
    expect_rotation(r);
    const double best = trace_objective(a, r);
    for (int k = 0; k < 1000; ++k) ASSERT_GE(best + 1e-12, trace_objective(a, random_rotation(d, rng)));
  }
}

TEST(SolveRotation, SignConventionIrrelevant) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_points(3, 3, rng);
    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
    // Flip a consistent pair of singular vectors; the product must not change.
    Matrix u = svd.matrixU(), v = svd.matrixV();
    u.col(1) *= -1.0;
    v.col(1) *= -1.0;
    Vector c = Vector::Ones(3);
    c[2] = (u * v.transpose()).determinant() < 0 ? -1.0 : 1.0;
    EXPECT_LT((u * c.asDiagonal() * v.transpose() - solve_rotation(a)).norm(), 1e-12);
  }
}

// --------------------------------------------------------------- M-steps

TEST(RigidMStep, IdenticalSetsIdentityTransform) {
  Rng rng(1);
  const Matrix y = random_points(10, 3, rng);
  const PosteriorStats s = stats_from_dense(Matrix::Identity(10, 10), y);
  const RigidStep step = rigid_mstep(s, PointSet(y), PointSet(y));
  EXPECT_LT((step.transform.r - Matrix::Identity(3, 3)).norm(), 1e-12);
  EXPECT_NEAR(step.transform.s, 1.0, 1e-12);
  EXPECT_LT(step.transform.t.norm(), 1e-12);
  EXPECT_EQ(step.sigma2, kSigma2Floor);
}

TEST(RigidMStep, RecoversSimilarity) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix y = random_points(15, 3, rng);
    const Matrix r0 = random_rotation(3, rng);
    const Vector t0 = random_points(3, 1, rng, 3.0);
    const RigidTransform truth{r0, 1.7, t0};
    const Matrix x = apply_transform(truth, y);
    const RigidStep step = rigid_mstep(stats_from_dense(Matrix::Identity(15, 15), x), PointSet(x), PointSet(y));
    EXPECT_LT((step.transform.r - r0).norm(), 1e-10);
    EXPECT_NEAR(step.transform.s, 1.7, 1e-10);
    EXPECT_LT((step.transform.t - t0).norm(), 1e-10);
    expect_rotation(step.transform.r);
  }
}

TEST(RigidMStep, OptimalAgainstRandomSearch) {
  Rng rng(3);
  const Matrix x = random_points(20, 2, rng);
  const Matrix y = random_points(30, 2, rng);
  const Matrix p = dense_posterior(x, y, 0.8, 0.2);
  const PosteriorStats s = stats_from_dense(p, x);
  const RigidStep step = rigid_mstep(s, PointSet(x), PointSet(y));
  const double q_opt = fixed_p_objective(p, x, apply_transform(step.transform, y), step.sigma2);
  const double angle0 = std::atan2(step.transform.r(1, 0), step.transform.r(0, 0));
  for (int k = 0; k < 10000; ++k) {
    const double spread = k < 5000 ? 0.05 : 1.0;
    RigidTransform cand{rotation_2d(angle0 + spread * uniform(rng, -1, 1)),
                        step.transform.s * (1.0 + spread * uniform(rng, -0.5, 0.5)),
                        step.transform.t + spread * random_points(2, 1, rng)};
    const Matrix t = apply_transform(cand, y);
    const double s2 = std::max(step.sigma2 * (1.0 + spread * uniform(rng, -0.5, 0.5)), 1e-6);
    ASSERT_LE(q_opt, fixed_p_objective(p, x, t, s2) + 1e-12 * std::abs(q_opt));
  }
}

TEST(RigidMStep, Sigma2MatchesFixedPResidual) {
  Rng rng(4);
  const Matrix x = random_points(20, 3, rng);
  const Matrix y = random_points(25, 3, rng);
  const Matrix p = dense_posterior(x, y, 1.1, 0.1);
  for (bool scale : {true, false}) {
    const RigidStep step = rigid_mstep(stats_from_dense(p, x), PointSet(x), PointSet(y), scale);
    const Matrix t = apply_transform(step.transform, y);
    double r = 0.0;
    for (Index n = 0; n < 20; ++n)
      for (Index m = 0; m < 25; ++m) r += p(m, n) * (x.row(n) - t.row(m)).squaredNorm();
    EXPECT_LT(rel_diff(step.sigma2, r / (p.sum() * 3.0)), 1e-10);
    if (!scale) {
      EXPECT_EQ(step.transform.s, 1.0);
    }
  }
}

TEST(RigidMStep, CollapseAndDegenerateModel) {
  Rng rng(5);
  const Matrix x = random_points(5, 2, rng);
  const Matrix y = random_points(4, 2, rng);
  const PosteriorStats zero = stats_from_dense(Matrix::Zero(4, 5), x);
  try {
    rigid_mstep(zero, PointSet(x), PointSet(y));
    FAIL() << "expected collapse";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCorrespondenceCollapse);
  }
  // All model mass on a single point: scale cannot be estimated.
  Matrix p = Matrix::Zero(4, 5);
  p.row(2).setConstant(0.5);
  const RigidStep step = rigid_mstep(stats_from_dense(p, x), PointSet(x), PointSet(y));
  EXPECT_EQ(step.transform.s, 1.0);
  EXPECT_FALSE(step.warnings.empty());
}

TEST(AffineMStep, IdentityFit) {
  Rng rng(6);
  const Matrix y = random_points(12, 2, rng);
  const AffineStep step = affine_mstep(stats_from_dense(Matrix::Identity(12, 12), y), PointSet(y), PointSet(y));
  EXPECT_LT((step.transform.b - Matrix::Identity(2, 2)).norm(), 1e-12);
  EXPECT_LT(step.transform.t.norm(), 1e-12);
}

TEST(AffineMStep, RecoversAffineMap) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix b0 = random_points(2, 2, rng);
    if (b0.determinant() < 0) b0.col(0) *= -1.0;
    const Vector t0 = random_points(2, 1, rng);
    const Matrix y = random_points(20, 2, rng);
    const Matrix x = apply_transform(AffineTransform{b0, t0}, y);
    const AffineStep step = affine_mstep(stats_from_dense(Matrix::Identity(20, 20), x), PointSet(x), PointSet(y));
    EXPECT_LT((step.transform.b - b0).norm(), 1e-10);
    EXPECT_LT((step.transform.t - t0).norm(), 1e-10);
  }
}

TEST(AffineMStep, FiniteDifferenceGradient) {
  Rng rng(8);
  const Matrix x = random_points(15, 2, rng);
  const Matrix y = random_points(15, 2, rng);
  const Matrix p = dense_posterior(x, y, 0.9, 0.1);
  const AffineStep step = affine_mstep(stats_from_dense(p, x), PointSet(x), PointSet(y));
  const double h = 1e-6;
  Matrix grad(2, 2);
  for (Index i = 0; i < 2; ++i) {
    for (Index j = 0; j < 2; ++j) {
      AffineTransform plus = step.transform, minus = step.transform;
      plus.b(i, j) += h;
      minus.b(i, j) -= h;
      grad(i, j) = (fixed_p_objective(p, x, apply_transform(plus, y), step.sigma2) -
                    fixed_p_objective(p, x, apply_transform(minus, y), step.sigma2)) /
                   (2.0 * h);
    }
  }
  EXPECT_LT(grad.norm(), 1e-8);
}

TEST(AffineMStep, RankDeficientModelIsRegularized) {
  Matrix y(6, 2);
  for (Index i = 0; i < 6; ++i) y.row(i) << static_cast<double>(i), 2.0 * static_cast<double>(i);
  Rng rng(9);
  const Matrix x = random_points(6, 2, rng);
  const AffineStep step = affine_mstep(stats_from_dense(Matrix::Identity(6, 6), x), PointSet(x), PointSet(y));
  EXPECT_TRUE(step.transform.b.allFinite());
  EXPECT_FALSE(step.warnings.empty());
}

// --------------------------------------------------------------- transforms

TEST(ApplyTransform, IdentityAndBasis) {
  Rng rng(10);
  const Matrix y = random_points(7, 2, rng);
  EXPECT_EQ(apply_transform(RigidTransform::identity(2), y), y);
  EXPECT_EQ(apply_transform(AffineTransform::identity(2), y), y);
  Vector t(2);
  t << 1.0, -1.0;
  const RigidTransform tr{rotation_2d(std::numbers::pi / 2.0), 2.0, t};
  const Matrix basis = Matrix::Identity(2, 2);
  Matrix expected(2, 2);
  expected << 1.0, 1.0, -1.0, -1.0;
  EXPECT_LT((apply_transform(tr, basis) - expected).norm(), 1e-15);
  EXPECT_THROW(apply_transform(tr, PointSet(random_points(3, 3, rng))), Error);
}

TEST(ApplyTransform, InverseRoundTrip) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const RigidTransform tr{random_rotation(3, rng), uniform(rng, 0.5, 2.0), random_points(3, 1, rng)};
    const Matrix y = random_points(10, 3, rng);
    EXPECT_LT((apply_transform(tr.inverse(), apply_transform(tr, y)) - y).norm(), 1e-12);
  }
}

// ------------------------------------------------------------ EM drivers

TEST(RegisterRigid, IdenticalSets) {
  Rng rng(12);
  const Matrix x = random_points(40, 3, rng);
  for (bool scale : {true, false}) {
    RegistrationConfig c = exact_config();
    c.estimate_scale = scale;
    const RegistrationReport rep = register_rigid(PointSet(x), PointSet(x), c);
    const auto& t = std::get<RigidTransform>(rep.transform);
    EXPECT_TRUE(rep.converged);
    EXPECT_LT((t.r - Matrix::Identity(3, 3)).norm(), 1e-9);
    EXPECT_NEAR(t.s, 1.0, 1e-9);
    EXPECT_LT(t.t.norm(), 1e-9);
  }
}

TEST(RegisterRigid, RecoversCleanSimilarity) {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const Index d = 2 + trial % 2;
    const Matrix y = random_points(60, d, rng);
    const RigidTransform truth{rotation_by_angle(d, uniform(rng, 0.0, 0.8), rng), uniform(rng, 0.5, 2.0),
                               random_points(d, 1, rng)};
    const Matrix x = apply_transform(truth, y);
    const RegistrationReport rep = register_rigid(PointSet(x), PointSet(y), exact_config());
    const auto& t = std::get<RigidTransform>(rep.transform);
    EXPECT_LT(rotation_error(truth.r, t.r), 1e-6);
    EXPECT_LT(std::abs(t.s - truth.s) / truth.s, 1e-6);
    EXPECT_LT((rep.aligned - x).cwiseAbs().maxCoeff(), 1e-5);
    expect_rotation(t.r, 1e-12);
  }
}

TEST(RegisterRigid, MonotoneDiagnostics) {
  Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix y = random_points(50, 3, rng);
    Matrix x = apply_transform(RigidTransform{random_rotation(3, rng), 1.3, random_points(3, 1, rng)}, y);
    x += random_points(50, 3, rng, 0.05);
    RegistrationConfig c;
    c.w = 0.2;
    const RegistrationReport rep = register_rigid(PointSet(x), PointSet(y), c);
    for (size_t k = 0; k < rep.diagnostics.size(); ++k) {
      const auto& d = rep.diagnostics[k];
      ASSERT_GE(d.sigma2, kSigma2Floor);
      ASSERT_LE(d.q_after, d.q_before + 1e-9 * std::abs(d.q_before));
      if (k > 0) {
        const double prev = rep.diagnostics[k - 1].neg_log_likelihood;
        ASSERT_LE(d.neg_log_likelihood, prev + 1e-9 * std::abs(prev));
      }
    }
  }
}

TEST(RegisterRigid, Equivariance) {
  Rng rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix y = random_points(50, 3, rng);
    const Matrix r0 = rotation_by_angle(3, 0.4, rng);
    const Matrix x = apply_transform(RigidTransform{r0, 1.0, Vector::Zero(3)}, y);
    const Matrix q = rotation_by_angle(3, 0.3, rng);
    const Vector c = random_points(3, 1, rng);
    const Matrix xq = apply_transform(RigidTransform{q, 1.0, c}, x);
    const auto a = std::get<RigidTransform>(register_rigid(PointSet(x), PointSet(y), exact_config()).transform);
    const auto b = std::get<RigidTransform>(register_rigid(PointSet(xq), PointSet(y), exact_config()).transform);
    EXPECT_LT((b.r - q * a.r).norm(), 1e-6);
  }
}

TEST(RegisterRigid, FishWithMissingPartsAndOutlierWeight) {
  DegradationSpec spec;
  spec.missing = MissingRegion{SetTarget::kY, 0, 0.4, 0.6};
  spec.seed = 3;
  const SyntheticPair pair = synth_pair(spec, fish_shape(), TransformKind::kRigid);
  RegistrationConfig c;
  c.w = 0.5;
  const RegistrationReport rep = register_rigid(pair.x, pair.y, c);
  const auto& est = std::get<RigidTransform>(rep.transform);
  const auto& truth = std::get<RigidTransform>(pair.truth.transform);
  EXPECT_LT(pair.y.count(), pair.x.count());
  EXPECT_LT(rotation_error(truth.r, est.r), 1e-6);
  EXPECT_NEAR(est.s, truth.s, 1e-6);
}

TEST(RegisterRigid, BunnyAnalogScaleTwo) {
  DegradationSpec spec;
  spec.scale = 2.0;
  spec.translation = 1.0;
  spec.seed = 4;
  const SyntheticPair pair = synth_pair(spec, bunny_shape(400, 3), TransformKind::kRigid);
  const RegistrationReport rep = register_rigid(pair.x, pair.y, exact_config());
  const auto& est = std::get<RigidTransform>(rep.transform);
  const auto& truth = std::get<RigidTransform>(pair.truth.transform);
  EXPECT_LT(rotation_error(truth.r, est.r), 1e-6);
  EXPECT_NEAR(est.s, 2.0, 2e-6);
}

TEST(RegisterRigid, WithoutNormalization) {
  Rng rng(16);
  const Matrix y = random_points(40, 2, rng);
  const RigidTransform truth{rotation_2d(0.5), 1.5, random_points(2, 1, rng)};
  RegistrationConfig c = exact_config();
  c.normalize = false;
  const RegistrationReport rep = register_rigid(PointSet(apply_transform(truth, y)), PointSet(y), c);
  EXPECT_LT(rotation_error(truth.r, std::get<RigidTransform>(rep.transform).r), 1e-6);
}

TEST(RegisterRigid, InvalidConfig) {
  Rng rng(17);
  const PointSet x(random_points(5, 2, rng));
  RegistrationConfig c;
  c.w = 1.0;
  EXPECT_THROW(register_rigid(x, x, c), Error);
  c.w = 0.0;
  c.max_iters = 0;
  EXPECT_THROW(register_rigid(x, x, c), Error);
  EXPECT_THROW(register_rigid(x, PointSet(random_points(5, 3, rng)), RegistrationConfig{}), Error);
}

TEST(RegisterRigid, IterationCapReportsNotConverged) {
  Rng rng(18);
  const Matrix y = random_points(30, 2, rng);
  const Matrix x = apply_transform(RigidTransform{rotation_2d(0.7), 1.0, Vector::Zero(2)}, y);
  RegistrationConfig c;
  c.max_iters = 2;
  const RegistrationReport rep = register_rigid(PointSet(x), PointSet(y), c);
  EXPECT_FALSE(rep.converged);
  EXPECT_EQ(rep.iterations, 2);
  EXPECT_EQ(rep.diagnostics.size(), 2u);
}

TEST(RegisterAffine, Identity) {
  Rng rng(19);
  const Matrix x = random_points(30, 2, rng);
  const RegistrationReport rep = register_affine(PointSet(x), PointSet(x), exact_config());
  const auto& t = std::get<AffineTransform>(rep.transform);
  EXPECT_LT((t.b - Matrix::Identity(2, 2)).norm(), 1e-9);
  EXPECT_LT(t.t.norm(), 1e-9);
}

TEST(RegisterAffine, RecoversRandomWarp) {
  Rng rng(20);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix y = random_points(100, 2, rng);
    Matrix b0 = Matrix::Identity(2, 2) + 0.3 * random_points(2, 2, rng);
    const AffineTransform truth{b0, random_points(2, 1, rng)};
    const RegistrationReport rep = register_affine(PointSet(apply_transform(truth, y)), PointSet(y), exact_config());
    const auto& t = std::get<AffineTransform>(rep.transform);
    EXPECT_LT((t.b - truth.b).norm(), 1e-6);
    EXPECT_LT((t.t - truth.t).norm(), 1e-6);
  }
}

TEST(RegisterAffine, FitsShearThatRigidCannot) {
  Rng rng(21);
  const Matrix y = random_points(100, 2, rng);
  Matrix b0(2, 2);
  b0 << 1.6, 0.5, 0.0, 0.7;
  const Matrix x = apply_transform(AffineTransform{b0, Vector::Zero(2)}, y);
  const RegistrationReport aff = register_affine(PointSet(x), PointSet(y), exact_config());
  const RegistrationReport rig = register_rigid(PointSet(x), PointSet(y), exact_config());
  EXPECT_LT(correspondence_mse(x, aff.aligned), 1e-8);
  EXPECT_GT(correspondence_mse(x, rig.aligned), 1e-3);
  for (const auto& d : aff.diagnostics) ASSERT_LE(d.q_after, d.q_before + 1e-9 * std::abs(d.q_before));
}

TEST(RegisterRigid, AutoAccelerationSmallProblemIsExact) {
  Rng rng(22);
  const Matrix y = random_points(50, 3, rng);
  const Matrix x = apply_transform(RigidTransform{random_rotation(3, rng), 1.0, Vector::Zero(3)}, y);
  RegistrationConfig c;
  c.fast = Acceleration::kAuto;
  const RegistrationReport a = register_rigid(PointSet(x), PointSet(y), c);
  c.fast = Acceleration::kExact;
  const RegistrationReport b = register_rigid(PointSet(x), PointSet(y), c);
  EXPECT_EQ(a.diagnostics.front().estep_mode, "exact");
  EXPECT_EQ(a.iterations, b.iterations);
}

TEST(RegisterRigid, FgtModeMatchesExact) {
  const PointSet base = bunny_shape(600, 5);
  DegradationSpec spec;
  spec.rotation_deg = 40.0;
  spec.seed = 8;
  const SyntheticPair pair = synth_pair(spec, base, TransformKind::kRigid);
  RegistrationConfig c;
  c.w = 0.1;
  c.fast = Acceleration::kFgt;
  const RegistrationReport fast = register_rigid(pair.x, pair.y, c);
  const auto& truth = std::get<RigidTransform>(pair.truth.transform);
  EXPECT_LT(rotation_error(truth.r, std::get<RigidTransform>(fast.transform).r), 1e-4);
  bool used_approx = false;
  for (const auto& d : fast.diagnostics) used_approx |= d.estep_mode != "exact";
  EXPECT_TRUE(used_approx);
}
