#pragma once

// Transform value types. Points are stored one per row, so a transform
// applied to a set reads T(Y) = s Y R^T + 1 t^T.

#include <cpd/types.hpp>

#include <cmath>

namespace cpd {

struct RigidTransform {
  Matrix r;
  double s = 1.0;
  Vector t;

  static RigidTransform identity(Index dim) { return {Matrix::Identity(dim, dim), 1.0, Vector::Zero(dim)}; }
  Index dim() const noexcept { return r.rows(); }

  /// Algebraic inverse: R^T, 1/s, -(1/s) R^T t.
  RigidTransform inverse() const { return {r.transpose(), 1.0 / s, -(1.0 / s) * (r.transpose() * t)}; }
};

struct AffineTransform {
  Matrix b;
  Vector t;

  static AffineTransform identity(Index dim) { return {Matrix::Identity(dim, dim), Vector::Zero(dim)}; }
  Index dim() const noexcept { return b.rows(); }
};

inline Matrix apply_transform(const RigidTransform& tr, const Matrix& pts) {
  return (tr.s * (pts * tr.r.transpose())).rowwise() + tr.t.transpose();
}

inline Matrix apply_transform(const AffineTransform& tr, const Matrix& pts) {
  return (pts * tr.b.transpose()).rowwise() + tr.t.transpose();
}

template <typename T>
PointSet apply_transform(const T& tr, const PointSet& pts) {
  if (tr.dim() != pts.dim()) throw Error(ErrorCode::kDimensionMismatch, "transform and point set dimensions differ");
  return PointSet(apply_transform(tr, pts.matrix()));
}

/// Coherent displacement field v(z) = sum_m w_m exp(-|z - y_m|^2 / 2 beta^2),
/// anchored at the original model points.
struct NonRigidField {
  Matrix y_ref;
  Matrix w_coef;
  double beta = 2.0;

  Index dim() const noexcept { return y_ref.cols(); }
};

/// z + v(z) for every row of z.
inline Matrix transform_points(const NonRigidField& field, const Matrix& z) {
  if (z.cols() != field.y_ref.cols()) throw Error(ErrorCode::kDimensionMismatch, "field and points differ in D");
  const double k = -0.5 / (field.beta * field.beta);
  Matrix out = z;
  for (Index i = 0; i < z.rows(); ++i) {
    for (Index m = 0; m < field.y_ref.rows(); ++m) {
      const double g = std::exp(k * (z.row(i) - field.y_ref.row(m)).squaredNorm());
      out.row(i) += g * field.w_coef.row(m);
    }
  }
  return out;
}

inline PointSet transform_points(const NonRigidField& field, const PointSet& z) {
  return PointSet(transform_points(field, z.matrix()));
}

}  // namespace cpd
