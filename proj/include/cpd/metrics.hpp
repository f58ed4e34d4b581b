#pragma once

// Error measures against ground truth.

#include <cpd/report.hpp>
#include <cpd/synth.hpp>
#include <cpd/types.hpp>

#include <cmath>
#include <map>
#include <string>

namespace cpd {

/// |R_true - R_est|_F
inline double rotation_error(const Matrix& r_true, const Matrix& r_est) {
  if (r_true.rows() != r_est.rows() || r_true.cols() != r_est.cols()) {
    throw Error(ErrorCode::kDimensionMismatch, "rotation matrices differ in size");
  }
  return (r_true - r_est).norm();
}

/// Mean over pairs of the squared distance between row i of each set.
inline double correspondence_mse(const Matrix& x_true_corr, const Matrix& t_y) {
  if (x_true_corr.rows() != t_y.rows() || x_true_corr.cols() != t_y.cols()) {
    throw Error(ErrorCode::kDimensionMismatch, "correspondence sets differ in size");
  }
  if (x_true_corr.rows() == 0) throw Error(ErrorCode::kInvalidArgument, "no correspondences");
  return (x_true_corr - t_y).rowwise().squaredNorm().mean();
}

inline double correspondence_mse(const PointSet& x_true_corr, const PointSet& t_y) {
  return correspondence_mse(x_true_corr.matrix(), t_y.matrix());
}

/// Fraction of data points with a true counterpart whose hard assignment
/// picks that counterpart.
inline double correspondence_accuracy(const std::vector<Index>& assignment, const std::vector<Index>& x_to_y) {
  if (assignment.size() != x_to_y.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "assignment and ground truth differ in length");
  }
  double total = 0.0, hit = 0.0;
  for (size_t n = 0; n < x_to_y.size(); ++n) {
    if (x_to_y[n] < 0) continue;
    total += 1.0;
    if (assignment[n] == x_to_y[n]) hit += 1.0;
  }
  return total > 0.0 ? hit / total : 1.0;
}

/// Metrics for a finished registration. Keys:
///   correspondence_mse       mean squared distance between T(y_m) and the
///                            true position of y_m, over model points with
///                            a counterpart, in data units
///   correspondence_mse_norm  the same divided by the squared RMS radius of
///                            the true positions
///   correspondence_accuracy  see correspondence_accuracy
///   rotation_error, scale_error, translation_error   rigid truth and rigid
///                            estimate only; scale error is relative
inline std::map<std::string, double> evaluate(const RegistrationReport& report, const GroundTruth& truth) {
  if (report.aligned.rows() != truth.y_target.rows()) {
    throw Error(ErrorCode::kDimensionMismatch, "report and ground truth model counts differ");
  }
  std::map<std::string, double> out;
  std::vector<Index> rows;
  for (size_t m = 0; m < truth.y_to_x.size(); ++m)
    if (truth.y_to_x[m] >= 0) rows.push_back(static_cast<Index>(m));
  if (!rows.empty()) {
    Matrix est(static_cast<Index>(rows.size()), report.aligned.cols());
    Matrix tgt(est.rows(), est.cols());
    for (size_t k = 0; k < rows.size(); ++k) {
      est.row(static_cast<Index>(k)) = report.aligned.row(rows[k]);
      tgt.row(static_cast<Index>(k)) = truth.y_target.row(rows[k]);
    }
    const double mse = correspondence_mse(tgt, est);
    out["correspondence_mse"] = mse;
    const double rho = detail::rms_radius(tgt);
    out["correspondence_mse_norm"] = mse / (rho * rho);
  }
  if (!report.correspondence.assignment.empty()) {
    out["correspondence_accuracy"] = correspondence_accuracy(report.correspondence.assignment, truth.x_to_y);
  }
  const auto* rt = std::get_if<RigidTransform>(&truth.transform);
  const auto* re = std::get_if<RigidTransform>(&report.transform);
  if (rt && re) {
    out["rotation_error"] = rotation_error(rt->r, re->r);
    out["scale_error"] = std::abs(re->s - rt->s) / rt->s;
    out["translation_error"] = (re->t - rt->t).norm();
  }
  return out;
}

}  // namespace cpd
