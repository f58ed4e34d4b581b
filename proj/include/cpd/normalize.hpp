#pragma once

// Zero-mean / unit-variance pre-alignment and the back-composition of
// transforms estimated between normalized sets.

#include <cpd/transforms.hpp>
#include <cpd/types.hpp>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace cpd {

struct NormalizationParams {
  Vector mu;
  double rho = 1.0;

  static NormalizationParams identity(Index dim) { return {Vector::Zero(dim), 1.0}; }
};

struct Normalized {
  PointSet points;
  NormalizationParams params;
  bool degenerate = false;  // zero variance input, rho forced to 1
};

/// Shifts to zero mean and scales so that the mean squared norm divided by D
/// is one (a single scale over all coordinates).
inline Normalized normalize(const PointSet& p) {
  const Matrix& pm = p.matrix();
  Normalized out;
  out.params.mu = pm.colwise().mean().transpose();
  const Matrix centered = pm.rowwise() - out.params.mu.transpose();
  const double var = centered.squaredNorm() / static_cast<double>(p.count() * p.dim());
  out.params.rho = std::sqrt(var);
  if (!(out.params.rho > 0.0)) {
    out.params.rho = 1.0;
    out.degenerate = true;
  }
  out.points = PointSet(centered / out.params.rho);
  return out;
}

inline Matrix normalize_with(const NormalizationParams& np, const Matrix& pts) {
  return (pts.rowwise() - np.mu.transpose()) / np.rho;
}

inline Matrix denormalize(const NormalizationParams& np, const Matrix& pts) {
  return (pts * np.rho).rowwise() + np.mu.transpose();
}

/// A non-rigid map expressed in original coordinates:
/// z -> denormalize_x(field(normalize_y(z))).
struct NonRigidTransform {
  NonRigidField field;
  NormalizationParams input;
  NormalizationParams output;

  Index dim() const noexcept { return field.dim(); }
};

inline Matrix apply_transform(const NonRigidTransform& tr, const Matrix& pts) {
  return denormalize(tr.output, transform_points(tr.field, normalize_with(tr.input, pts)));
}

/// Maps a transform estimated between normalize(Y) and normalize(X) into one
/// acting on the original coordinates.
inline RigidTransform denormalize_transform(const RigidTransform& t, const NormalizationParams& nx,
                                            const NormalizationParams& ny) {
  RigidTransform out;
  out.r = t.r;
  out.s = t.s * nx.rho / ny.rho;
  out.t = nx.rho * t.t + nx.mu - out.s * (t.r * ny.mu);
  return out;
}

inline AffineTransform denormalize_transform(const AffineTransform& t, const NormalizationParams& nx,
                                             const NormalizationParams& ny) {
  AffineTransform out;
  out.b = (nx.rho / ny.rho) * t.b;
  out.t = nx.rho * t.t + nx.mu - out.b * ny.mu;
  return out;
}

inline NonRigidTransform denormalize_transform(const NonRigidField& field, const NormalizationParams& nx,
                                               const NormalizationParams& ny) {
  return {field, ny, nx};
}

}  // namespace cpd
