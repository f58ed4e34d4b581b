#pragma once

// Rigid (s R y + t) and affine (B y + t) registration: closed-form M-steps
// and the EM drivers.

#include <cpd/em.hpp>
#include <cpd/estep.hpp>
#include <cpd/transforms.hpp>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <cmath>
#include <string>
#include <vector>

namespace cpd {

struct RotationSolution {
  Matrix r;
  /// det(U V^T) = -1 with a repeated smallest singular value: the maximizer
  /// is not unique.
  bool ambiguous = false;
};

/// Rotation maximizing tr(A^T R): R = U diag(1, ..., 1, det(U V^T)) V^T.
inline RotationSolution solve_rotation_detailed(const Matrix& a) {
  if (a.rows() != a.cols() || a.rows() < 1) throw Error(ErrorCode::kInvalidArgument, "A must be square");
  if (!a.allFinite()) throw Error(ErrorCode::kInvalidArgument, "A must be finite");
  const Index dim = a.rows();
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Matrix& u = svd.matrixU();
  const Matrix& v = svd.matrixV();
  const double det = (u * v.transpose()).determinant();
  Vector c = Vector::Ones(dim);
  RotationSolution out;
  if (det < 0.0) {
    c[dim - 1] = -1.0;
    const Vector& sv = svd.singularValues();
    if (dim >= 2 && std::abs(sv[dim - 1] - sv[dim - 2]) <= 1e-12 * std::max(1.0, sv[0])) out.ambiguous = true;
  }
  out.r = u * c.asDiagonal() * v.transpose();
  return out;
}

inline Matrix solve_rotation(const Matrix& a) { return solve_rotation_detailed(a).r; }

struct RigidStep {
  RigidTransform transform;
  double sigma2 = kSigma2Floor;
  std::vector<std::string> warnings;
};

struct AffineStep {
  AffineTransform transform;
  double sigma2 = kSigma2Floor;
  std::vector<std::string> warnings;
};

namespace detail {

/// Posterior-weighted means and centred second moments shared by the rigid
/// and affine M-steps.
struct WeightedMoments {
  Vector mu_x;
  Vector mu_y;
  Matrix yc;    // centred model points
  Matrix a;     // X^T P^T Y (both centred), D x D
  double xx;    // tr(X^T d(P^T 1) X), centred
  double yy;    // tr(Y^T d(P 1) Y), centred
};

inline WeightedMoments weighted_moments(const PosteriorStats& stats, const PointSet& x, const PointSet& y) {
  require_same_dim(x, y);
  if (stats.p1.size() != y.count() || stats.pt1.size() != x.count()) {
    throw Error(ErrorCode::kDimensionMismatch, "posterior statistics do not match the point sets");
  }
  if (!(stats.np > 1e-10)) {
    throw Error(ErrorCode::kCorrespondenceCollapse, "all posterior mass is on the outlier component (N_P ~ 0)");
  }
  WeightedMoments mo;
  mo.mu_x = x.matrix().transpose() * stats.pt1 / stats.np;
  mo.mu_y = y.matrix().transpose() * stats.p1 / stats.np;
  mo.yc = y.matrix().rowwise() - mo.mu_y.transpose();
  const Matrix xc = x.matrix().rowwise() - mo.mu_x.transpose();
  // sum_mn p_mn (x_n - mu_x)(y_m - mu_y)^T = PX^T Yc - mu_x (P1^T Yc)
  mo.a = stats.px.transpose() * mo.yc - mo.mu_x * (stats.p1.transpose() * mo.yc);
  mo.xx = stats.pt1.dot(xc.rowwise().squaredNorm());
  mo.yy = stats.p1.dot(mo.yc.rowwise().squaredNorm());
  return mo;
}

inline double clamp_sigma2(double v) { return v > kSigma2Floor ? v : kSigma2Floor; }

}  // namespace detail

inline RigidStep rigid_mstep(const PosteriorStats& stats, const PointSet& x, const PointSet& y,
                             bool estimate_scale = true) {
  const detail::WeightedMoments mo = detail::weighted_moments(stats, x, y);
  RigidStep step;
  const RotationSolution rot = solve_rotation_detailed(mo.a);
  if (rot.ambiguous) step.warnings.emplace_back("rotation maximizer is not unique (degenerate cross-covariance)");
  const double tr_ar = (mo.a.transpose() * rot.r).trace();
  double s = 1.0;
  if (estimate_scale) {
    if (mo.yy > 0.0) {
      s = tr_ar / mo.yy;
    } else {
      step.warnings.emplace_back("model mass concentrated at one point; scale fixed to 1");
    }
    if (s < 0.0) step.warnings.emplace_back("negative scale estimate");
  }
  step.transform.r = rot.r;
  step.transform.s = s;
  step.transform.t = mo.mu_x - s * (rot.r * mo.mu_y);
  const double dim = static_cast<double>(x.dim());
  step.sigma2 = detail::clamp_sigma2((mo.xx - 2.0 * s * tr_ar + s * s * mo.yy) / (stats.np * dim));
  return step;
}

inline AffineStep affine_mstep(const PosteriorStats& stats, const PointSet& x, const PointSet& y) {
  const detail::WeightedMoments mo = detail::weighted_moments(stats, x, y);
  AffineStep step;
  const Index dim = x.dim();
  Matrix yty = mo.yc.transpose() * stats.p1.asDiagonal() * mo.yc;
  const Vector eig = Eigen::SelfAdjointEigenSolver<Matrix>(yty, Eigen::EigenvaluesOnly).eigenvalues();
  if (!(eig[0] > 1e-12 * eig[dim - 1])) {
    const double ridge = 1e-10 * yty.trace() / static_cast<double>(dim);
    yty.diagonal().array() += ridge > 0.0 ? ridge : 1e-10;
    step.warnings.emplace_back("rank-deficient model covariance; ridge-regularized affine solve");
  }
  const Eigen::LDLT<Matrix> ldlt(yty);
  // B = A (Y^T d(P1) Y)^-1, solved as B^T = S^-1 A^T with S symmetric.
  const Matrix b = ldlt.solve(mo.a.transpose()).transpose();
  step.transform.b = b;
  step.transform.t = mo.mu_x - b * mo.mu_y;
  const double ab = (mo.a * b.transpose()).trace();
  const double bsb = (b * yty * b.transpose()).trace();
  step.sigma2 = detail::clamp_sigma2((mo.xx - 2.0 * ab + bsb) / (stats.np * static_cast<double>(dim)));
  return step;
}

namespace detail {

class RigidModel {
 public:
  RigidModel(PointSet y, bool estimate_scale)
      : y_(std::move(y)), tr_(RigidTransform::identity(y_.dim())), estimate_scale_(estimate_scale) {}

  Matrix transformed() const { return apply_transform(tr_, y_.matrix()); }
  double regularizer() const { return 0.0; }

  MStepResult mstep(const PosteriorStats& stats, const PointSet& x, double /*sigma2*/) {
    RigidStep step = rigid_mstep(stats, x, y_, estimate_scale_);
    MStepResult out;
    out.change = (step.transform.r - tr_.r).norm() + std::abs(step.transform.s - tr_.s) +
                 (step.transform.t - tr_.t).norm();
    out.sigma2 = step.sigma2;
    out.warnings = std::move(step.warnings);
    tr_ = std::move(step.transform);
    return out;
  }

  Transform finalize(const NormalizationParams& nx, const NormalizationParams& ny) const {
    return denormalize_transform(tr_, nx, ny);
  }

 private:
  PointSet y_;
  RigidTransform tr_;
  bool estimate_scale_;
};

class AffineModel {
 public:
  explicit AffineModel(PointSet y) : y_(std::move(y)), tr_(AffineTransform::identity(y_.dim())) {}

  Matrix transformed() const { return apply_transform(tr_, y_.matrix()); }
  double regularizer() const { return 0.0; }

  MStepResult mstep(const PosteriorStats& stats, const PointSet& x, double /*sigma2*/) {
    AffineStep step = affine_mstep(stats, x, y_);
    MStepResult out;
    out.change = (step.transform.b - tr_.b).norm() + (step.transform.t - tr_.t).norm();
    out.sigma2 = step.sigma2;
    out.warnings = std::move(step.warnings);
    tr_ = std::move(step.transform);
    return out;
  }

  Transform finalize(const NormalizationParams& nx, const NormalizationParams& ny) const {
    return denormalize_transform(tr_, nx, ny);
  }

 private:
  PointSet y_;
  AffineTransform tr_;
};

}  // namespace detail

/// Rigid registration of model Y onto data X. The returned transform maps
/// the original Y coordinates onto X.
inline RegistrationReport register_rigid(const PointSet& x, const PointSet& y, const RegistrationConfig& config) {
  config.validate();
  std::vector<std::string> warnings;
  const WorkingFrame frame = make_working_frame(x, y, config.normalize, warnings);
  detail::RigidModel model(frame.y, config.estimate_scale);
  return run_em(frame, model, config, "rigid", std::move(warnings));
}

inline RegistrationReport register_affine(const PointSet& x, const PointSet& y, const RegistrationConfig& config) {
  config.validate();
  std::vector<std::string> warnings;
  const WorkingFrame frame = make_working_frame(x, y, config.normalize, warnings);
  detail::AffineModel model(frame.y);
  return run_em(frame, model, config, "affine", std::move(warnings));
}

}  // namespace cpd
