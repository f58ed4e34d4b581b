#pragma once

#include <cpd/types.hpp>

#include <cmath>

namespace cpd {

/// Gaussian affinity matrix among model points, g_ij = exp(-|y_i - y_j|^2 / 2 beta^2).
struct KernelMatrix {
  Matrix g;
  double beta = 1.0;

  Index size() const noexcept { return g.rows(); }
};

inline KernelMatrix build_kernel(const PointSet& y, double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) {
    throw Error(ErrorCode::kInvalidArgument, "kernel width beta must be positive");
  }
  const Index m = y.count();
  const Matrix& ym = y.matrix();
  const double k = -0.5 / (beta * beta);
  KernelMatrix out{Matrix(m, m), beta};
  for (Index j = 0; j < m; ++j) {
    out.g(j, j) = 1.0;
    for (Index i = j + 1; i < m; ++i) {
      const double v = std::exp(k * (ym.row(i) - ym.row(j)).squaredNorm());
      out.g(i, j) = v;
      out.g(j, i) = v;
    }
  }
  return out;
}

}  // namespace cpd
