#pragma once

// Coherent non-rigid registration: T(Y) = Y + G W with a Gaussian kernel G
// among the model points.

#include <cpd/em.hpp>
#include <cpd/estep.hpp>
#include <cpd/fastops.hpp>
#include <cpd/kernel.hpp>
#include <cpd/transforms.hpp>

#include <Eigen/LU>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace cpd {

/// Right-hand side of the scaled coefficient system, PX - d(P1) Y.
inline Matrix coefficient_rhs(const PosteriorStats& stats, const PointSet& y) {
  if (stats.p1.size() != y.count() || stats.px.rows() != y.count() || stats.px.cols() != y.dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "posterior statistics do not match the model set");
  }
  return stats.px - stats.p1.asDiagonal() * y.matrix();
}

/// Solves (d(P1) G + lambda sigma2 I) W = PX - d(P1) Y. For p1 > 0 this is
/// the kernel system (G + lambda sigma2 d(P1)^-1) W = d(P1)^-1 PX - Y
/// left-multiplied by d(P1); it stays finite when some p1[m] = 0.
inline Matrix solve_coefficients(const KernelMatrix& g, const PosteriorStats& stats, const PointSet& x,
                                 const PointSet& y, double lambda, double sigma2) {
  require_same_dim(x, y);
  if (!(lambda > 0.0)) throw Error(ErrorCode::kInvalidArgument, "lambda must be positive");
  if (!(sigma2 > 0.0)) throw Error(ErrorCode::kInvalidArgument, "sigma2 must be positive");
  if (g.size() != y.count()) throw Error(ErrorCode::kDimensionMismatch, "kernel size differs from model count");
  const Matrix rhs = coefficient_rhs(stats, y);
  Matrix a = stats.p1.asDiagonal() * g.g;
  a.diagonal().array() += lambda * sigma2;
  Eigen::PartialPivLU<Matrix> lu(a);
  Matrix w = lu.solve(rhs);
  if (!w.allFinite()) {
    throw Error(ErrorCode::kNumerical,
                "coefficient solve produced non-finite values (rcond ~ " + std::to_string(lu.rcond()) + ")");
  }
  return w;
}

/// Low-rank variant: G ~ Q Lambda Q^T, solved through the Woodbury identity.
inline Matrix solve_coefficients(const LowRankKernel& g, const PosteriorStats& stats, const PointSet& y,
                                 double lambda, double sigma2) {
  if (!(lambda > 0.0)) throw Error(ErrorCode::kInvalidArgument, "lambda must be positive");
  Matrix w = woodbury_solve_scaled(g, stats.p1, lambda * sigma2, coefficient_rhs(stats, y));
  if (!w.allFinite()) throw Error(ErrorCode::kNumerical, "low-rank coefficient solve produced non-finite values");
  return w;
}

/// sigma2 = (tr(X^T d(P^T 1) X) - 2 tr((PX)^T T) + tr(T^T d(P1) T)) / (N_P D),
/// clamped to the floor.
inline double update_sigma2_nonrigid(const PosteriorStats& stats, const PointSet& x, const PointSet& t) {
  require_same_dim(x, t);
  if (!(stats.np > 0.0)) {
    throw Error(ErrorCode::kCorrespondenceCollapse, "all posterior mass is on the outlier component (N_P ~ 0)");
  }
  const double denom = stats.np * static_cast<double>(x.dim());
  double value = weighted_residual(stats, x, t.matrix()) / denom;
  if (value < -1e-9) {
    // Cancellation between large terms: recompute about the weighted data
    // mean with extended-precision accumulation.
    const Vector c = x.matrix().transpose() * stats.pt1 / stats.np;
    const Matrix xc = x.matrix().rowwise() - c.transpose();
    const Matrix tc = t.matrix().rowwise() - c.transpose();
    // PX about c is PX - P1 c^T.
    const Matrix pxc = stats.px - stats.p1 * c.transpose();
    long double sum = 0.0L;
    for (Index n = 0; n < xc.rows(); ++n) sum += static_cast<long double>(stats.pt1[n]) * xc.row(n).squaredNorm();
    for (Index m = 0; m < tc.rows(); ++m) {
      sum -= 2.0L * static_cast<long double>(pxc.row(m).dot(tc.row(m)));
      sum += static_cast<long double>(stats.p1[m]) * tc.row(m).squaredNorm();
    }
    value = static_cast<double>(sum / denom);
    if (value < -1e-9) {
      throw Error(ErrorCode::kNumerical, "negative variance estimate " + std::to_string(value));
    }
  }
  return value > kSigma2Floor ? value : kSigma2Floor;
}

/// tr(W^T G W) given GW.
inline double bending_energy(const Matrix& w, const Matrix& gw) { return w.cwiseProduct(gw).sum(); }

namespace detail {

class NonRigidModel {
 public:
  NonRigidModel(PointSet y, const RegistrationConfig& config, std::vector<std::string>& warnings)
      : y_(std::move(y)), lambda_(config.lambda), beta_(config.beta), inner_(config.inner_iters) {
    const Index m = y_.count();
    Index rank = config.lowrank;
    if (rank == 0 && m > kDenseSolveLimit) rank = std::min<Index>(m, 100);
    if (rank > m) {
      warnings.emplace_back("lowrank exceeds model count; using M");
      rank = m;
    }
    if (rank == 0) {
      dense_ = build_kernel(y_, beta_);
    } else if (m <= kDenseSolveLimit) {
      low_ = topk_eigs(build_kernel(y_, beta_), rank);
    } else {
      // Kernel products without storing G.
      GaussTransformPlan plan = config.plan;
      plan.mode = y_.dim() <= 3 ? GaussMode::kFgt : GaussMode::kExact;
      EigenOptions options;
      options.tol = std::max(1e-6, 10.0 * plan.epsilon);
      low_ = topk_eigs_operator(
          [&](const Matrix& v) -> Matrix { return gauss_transform(y_, y_, v, beta_ * beta_, plan); }, m, rank,
          options);
    }
    w_ = Matrix::Zero(m, y_.dim());
    gw_ = Matrix::Zero(m, y_.dim());
  }

  Matrix transformed() const { return y_.matrix() + gw_; }
  double regularizer() const { return 0.5 * lambda_ * bending_energy(w_, gw_); }

  MStepResult mstep(const PosteriorStats& stats, const PointSet& x, double sigma2) {
    MStepResult out;
    const Matrix w_old = w_;
    double s2 = sigma2;
    for (int pass = 0; pass < inner_; ++pass) {
      if (dense_) {
        w_ = solve_coefficients(*dense_, stats, x, y_, lambda_, s2);
        gw_ = dense_->g * w_;
      } else {
        w_ = solve_coefficients(*low_, stats, y_, lambda_, s2);
        gw_ = low_->apply(w_);
      }
      s2 = update_sigma2_nonrigid(stats, x, PointSet(transformed()));
    }
    out.sigma2 = s2;
    out.change = (w_ - w_old).norm();
    return out;
  }

  Transform finalize(const NormalizationParams& nx, const NormalizationParams& ny) const {
    return denormalize_transform(field(), nx, ny);
  }

  /// The field in the working frame. With a low-rank kernel the exact field
  /// evaluated at Y differs from Y + Q Lambda Q^T W by the truncation error.
  NonRigidField field() const { return {y_.matrix(), w_, beta_}; }
  const Matrix& coefficients() const { return w_; }
  bool low_rank() const { return low_.has_value(); }

 private:
  PointSet y_;
  double lambda_;
  double beta_;
  int inner_;
  std::optional<KernelMatrix> dense_;
  std::optional<LowRankKernel> low_;
  Matrix w_;
  Matrix gw_;
};

}  // namespace detail

inline RegistrationReport register_nonrigid(const PointSet& x, const PointSet& y, const RegistrationConfig& config) {
  config.validate();
  std::vector<std::string> warnings;
  const WorkingFrame frame = make_working_frame(x, y, config.normalize, warnings);
  detail::NonRigidModel model(frame.y, config, warnings);
  if (model.low_rank()) warnings.emplace_back("low-rank kernel approximation in use");
  return run_em(frame, model, config, "nonrigid", std::move(warnings));
}

}  // namespace cpd
