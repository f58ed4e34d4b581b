#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cpd {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Lower bound on the mixture variance in normalized units. EM stops when it
/// is reached (perfect alignment drives the variance update to exactly zero).
inline constexpr double kSigma2Floor = 1e-10;

enum class ErrorCode {
  kInvalidArgument,
  kDimensionMismatch,
  kCorrespondenceCollapse,
  kNumerical,
  kNotConverged,
  kParse,
  kIo,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kDimensionMismatch: return "dimension mismatch";
    case ErrorCode::kCorrespondenceCollapse: return "correspondence collapse";
    case ErrorCode::kNumerical: return "numerical failure";
    case ErrorCode::kNotConverged: return "not converged";
    case ErrorCode::kParse: return "parse error";
    case ErrorCode::kIo: return "i/o error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// An ordered set of N points in D dimensions, stored one point per row.
/// Construction validates that the set is non-empty and every coordinate is
/// finite.
class PointSet {
 public:
  PointSet() = default;

  explicit PointSet(Matrix points) : points_(std::move(points)) {
    if (points_.rows() < 1 || points_.cols() < 1) {
      throw Error(ErrorCode::kInvalidArgument, "point set needs at least one point and one dimension");
    }
    if (!points_.allFinite()) {
      throw Error(ErrorCode::kInvalidArgument, "point set contains non-finite coordinates");
    }
  }

  Index count() const noexcept { return points_.rows(); }
  Index dim() const noexcept { return points_.cols(); }
  bool empty() const noexcept { return points_.size() == 0; }

  const Matrix& matrix() const noexcept { return points_; }
  auto row(Index i) const { return points_.row(i); }

 private:
  Matrix points_;
};

inline void require_same_dim(const PointSet& a, const PointSet& b) {
  if (a.dim() != b.dim()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "dimensions " + std::to_string(a.dim()) + " and " + std::to_string(b.dim()));
  }
}

inline double squared_distance(const Eigen::Ref<const Eigen::RowVectorXd>& a,
                               const Eigen::Ref<const Eigen::RowVectorXd>& b) {
  return (a - b).squaredNorm();
}

}  // namespace cpd
