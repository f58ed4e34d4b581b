#pragma once

// Nearest-neighbour ICP with a closed-form similarity (Procrustes) step. A
// hard-assignment baseline for the robustness comparisons.

#include <cpd/em.hpp>
#include <cpd/rigid.hpp>

#include <chrono>
#include <limits>

namespace cpd {

namespace detail {

/// For each row of `from`, the index of the nearest row of `to`.
inline std::vector<Index> nearest_rows(const Matrix& from, const Matrix& to, double* mean_sq = nullptr) {
  std::vector<Index> idx(static_cast<size_t>(from.rows()), 0);
  double total = 0.0;
  for (Index i = 0; i < from.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Index j = 0; j < to.rows(); ++j) {
      const double d2 = (from.row(i) - to.row(j)).squaredNorm();
      if (d2 < best) {
        best = d2;
        idx[i] = j;
      }
    }
    total += best;
  }
  if (mean_sq) *mean_sq = total / static_cast<double>(from.rows());
  return idx;
}

}  // namespace detail

/// Uses config.tol (on the norm of the transform update), max_iters,
/// estimate_scale and normalize; the mixture parameters are ignored.
inline RegistrationReport icp_baseline(const PointSet& x, const PointSet& y, const RegistrationConfig& config) {
  config.validate();
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  RegistrationReport report;
  report.method = "icp";
  report.config = config;
  const WorkingFrame frame = make_working_frame(x, y, config.normalize, report.warnings);
  const Matrix& xm = frame.x.matrix();
  const Matrix& ym = frame.y.matrix();
  const Index m = ym.rows();
  const double dim = static_cast<double>(ym.cols());

  RigidTransform tr = RigidTransform::identity(frame.y.dim());
  double residual = 0.0;
  for (int it = 1; it <= config.max_iters; ++it) {
    const auto iter_start = Clock::now();
    const Matrix ty = apply_transform(tr, ym);
    double before = 0.0;
    const std::vector<Index> nn = detail::nearest_rows(ty, xm, &before);
    Matrix matched(m, ym.cols());
    for (Index i = 0; i < m; ++i) matched.row(i) = xm.row(nn[i]);

    const Eigen::RowVectorXd mu_x = matched.colwise().mean();
    const Eigen::RowVectorXd mu_y = ym.colwise().mean();
    const Matrix xc = matched.rowwise() - mu_x;
    const Matrix yc = ym.rowwise() - mu_y;
    const Matrix a = xc.transpose() * yc;
    RigidTransform next;
    next.r = solve_rotation(a);
    const double yy = yc.squaredNorm();
    next.s = config.estimate_scale && yy > 0.0 ? (a.transpose() * next.r).trace() / yy : 1.0;
    next.t = mu_x.transpose() - next.s * (next.r * mu_y.transpose());

    const double change = (next.r - tr.r).norm() + std::abs(next.s - tr.s) + (next.t - tr.t).norm();
    tr = next;
    residual = (apply_transform(tr, ym) - matched).squaredNorm() / static_cast<double>(m);

    IterationRecord rec;
    rec.iteration = it;
    rec.sigma2 = std::max(residual / dim, kSigma2Floor);
    rec.q_before = before;
    rec.q_after = residual;
    rec.change = change;
    rec.estep_mode = "nearest";
    rec.seconds = std::chrono::duration<double>(Clock::now() - iter_start).count();
    report.diagnostics.push_back(rec);
    report.iterations = it;
    if (change <= config.tol) {
      report.converged = true;
      break;
    }
  }

  const Matrix t_final = apply_transform(tr, ym);
  report.sigma2 = std::max(residual / dim, kSigma2Floor);
  report.transform = denormalize_transform(tr, frame.nx, frame.ny);
  report.aligned = denormalize(frame.nx, t_final);
  report.correspondence.assignment = detail::hard_assignment(xm, t_final);
  report.correspondence.np = static_cast<double>(xm.rows());
  report.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return report;
}

}  // namespace cpd
