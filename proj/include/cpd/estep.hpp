#pragma once

// Shared E-step: posterior correspondence probabilities of the Gaussian
// mixture (centroids = transformed model points, plus a uniform outlier
// component) and the associated objectives.

#include <cpd/types.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace cpd {

/// Dense posterior matrices are only kept for problems up to this many pairs.
inline constexpr double kDensePosteriorLimit = 1e7;

struct MixtureParams {
  double sigma2 = 1.0;
  double w = 0.0;

  void validate() const {
    if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) {
      throw Error(ErrorCode::kInvalidArgument, "sigma2 must be positive and finite");
    }
    if (!(w >= 0.0) || !(w < 1.0)) {
      throw Error(ErrorCode::kInvalidArgument, "outlier weight w must lie in [0, 1)");
    }
  }
};

/// Products of the M x N posterior matrix P needed by every M-step.
struct PosteriorStats {
  Vector p1;   // P * 1, length M
  Vector pt1;  // P^T * 1, length N
  Matrix px;   // P * X, M x D
  double np = 0.0;
  /// -log likelihood of the data under the mixture used for this E-step.
  double neg_log_likelihood = 0.0;
  std::optional<Matrix> dense_p;
  std::vector<std::string> warnings;
};

struct Sigma2Init {
  double sigma2 = kSigma2Floor;
  bool degenerate = false;
};

/// Mean squared pairwise distance between the sets divided by D.
inline Sigma2Init init_sigma2(const PointSet& x, const PointSet& y) {
  require_same_dim(x, y);
  const Matrix& xm = x.matrix();
  const Matrix& ym = y.matrix();
  const double n = static_cast<double>(x.count());
  const double m = static_cast<double>(y.count());
  const Eigen::RowVectorXd mx = xm.colwise().mean();
  const Eigen::RowVectorXd my = ym.colwise().mean();
  // sum_nm |x_n - y_m|^2 = M sum|x - mx|^2 + N sum|y - my|^2 + NM |mx - my|^2
  const double total = m * (xm.rowwise() - mx).squaredNorm() +
                       n * (ym.rowwise() - my).squaredNorm() + n * m * (mx - my).squaredNorm();
  const double value = total / (static_cast<double>(x.dim()) * n * m);
  if (!(value > kSigma2Floor)) return {kSigma2Floor, true};
  return {value, false};
}

/// Uniform-component constant c = (2 pi sigma2)^(D/2) * w/(1-w) * M/N.
inline double outlier_constant(const MixtureParams& params, Index m_count, Index n_count, Index dim) {
  params.validate();
  if (params.w == 0.0) return 0.0;
  return std::pow(2.0 * std::numbers::pi * params.sigma2, 0.5 * static_cast<double>(dim)) *
         (params.w / (1.0 - params.w)) * (static_cast<double>(m_count) / static_cast<double>(n_count));
}

namespace detail {

inline double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

/// Per-data-point mixture normalizer. Works on one column of P at a time with
/// the smallest squared distance subtracted, so that the largest numerator is
/// exactly one and the column can never underflow as a whole.
struct ColumnNormalizer {
  double inv_two_sigma2;
  double log_c;  // -inf when w == 0
  double log_density_offset;  // log((1-w)/M) - D/2 log(2 pi sigma2)

  ColumnNormalizer(const MixtureParams& params, Index m_count, Index n_count, Index dim) {
    params.validate();
    inv_two_sigma2 = 0.5 / params.sigma2;
    const double c = outlier_constant(params, m_count, n_count, dim);
    log_c = c > 0.0 ? std::log(c) : -std::numeric_limits<double>::infinity();
    log_density_offset = std::log((1.0 - params.w) / static_cast<double>(m_count)) -
                         0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi * params.sigma2);
  }
};

inline void squared_distances_to(const Matrix& centroids, const double* point, Index dim, double* out) {
  const Index m_count = centroids.rows();
  for (Index m = 0; m < m_count; ++m) {
    double d2 = 0.0;
    for (Index d = 0; d < dim; ++d) {
      const double diff = point[d] - centroids(m, d);
      d2 += diff * diff;
    }
    out[m] = d2;
  }
}

struct ColumnScratch {
  std::vector<double> d2;
  std::vector<double> numer;
};

/// Adds column n of P (data point xn) into the products of `stats` and
/// returns that point's contribution to the negative log-likelihood.
inline double accumulate_column(const ColumnNormalizer& norm, const Matrix& ty, const double* xn, Index dim, Index n,
                                ColumnScratch& scratch, PosteriorStats& stats) {
  const Index m_count = ty.rows();
  scratch.d2.resize(static_cast<size_t>(m_count));
  scratch.numer.resize(static_cast<size_t>(m_count));
  squared_distances_to(ty, xn, dim, scratch.d2.data());
  const double d2min = *std::min_element(scratch.d2.begin(), scratch.d2.end());
  double sum = 0.0;
  for (Index m = 0; m < m_count; ++m) {
    scratch.numer[m] = std::exp(-(scratch.d2[m] - d2min) * norm.inv_two_sigma2);
    sum += scratch.numer[m];
  }
  // Outlier constant rescaled into the shifted frame, in log space.
  const double log_c_shifted = norm.log_c + d2min * norm.inv_two_sigma2;
  const double log_den = log_add_exp(std::log(sum), log_c_shifted);
  const double nll = -(norm.log_density_offset + log_den - d2min * norm.inv_two_sigma2);

  if (!(sum > 0.0)) {
    // Unreachable with the shift (largest numerator is 1); kept as a guard.
    if (norm.log_c != -std::numeric_limits<double>::infinity()) return nll;
    std::fill(scratch.numer.begin(), scratch.numer.end(), 1.0);
    sum = static_cast<double>(m_count);
    stats.warnings.emplace_back("posterior column underflow; uniform assignment used");
  }
  const double scale = std::exp(-log_den);
  if (scale == 0.0) return nll;  // all mass on the uniform component
  stats.pt1[n] = sum * scale;
  for (Index m = 0; m < m_count; ++m) {
    const double p = scratch.numer[m] * scale;
    if (p == 0.0) continue;
    stats.p1[m] += p;
    for (Index d = 0; d < dim; ++d) stats.px(m, d) += p * xn[d];
    if (stats.dense_p) (*stats.dense_p)(m, n) = p;
  }
  return nll;
}

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

/// Posterior probabilities p_mn for data X and transformed model points T(Y).
/// Streams over data points; the dense matrix is kept only on request (and
/// only when M*N is small enough).
inline PosteriorStats compute_posteriors(const PointSet& x, const PointSet& t_y, const MixtureParams& params,
                                         bool want_dense = false) {
  require_same_dim(x, t_y);
  const Index n_count = x.count();
  const Index m_count = t_y.count();
  const Index dim = x.dim();
  const detail::ColumnNormalizer norm(params, m_count, n_count, dim);

  PosteriorStats stats;
  stats.p1 = Vector::Zero(m_count);
  stats.pt1 = Vector::Zero(n_count);
  stats.px = Matrix::Zero(m_count, dim);
  if (want_dense) {
    if (static_cast<double>(m_count) * static_cast<double>(n_count) <= kDensePosteriorLimit) {
      stats.dense_p = Matrix::Zero(m_count, n_count);
    } else {
      stats.warnings.emplace_back("dense posterior matrix too large; only products kept");
    }
  }

  const detail::RowMajorMatrix xr = x.matrix();
  detail::ColumnScratch scratch;
  double nll = 0.0;
  for (Index n = 0; n < n_count; ++n) {
    nll += detail::accumulate_column(norm, t_y.matrix(), xr.row(n).data(), dim, n, scratch, stats);
  }
  stats.np = stats.pt1.sum();
  stats.neg_log_likelihood = nll;
  return stats;
}

/// Negative log-likelihood of X under the mixture centred at T(Y).
/// Evaluated with a log-sum-exp per data point, so it stays finite for any
/// finite input; +inf is returned only if the likelihood is genuinely zero.
inline double negative_log_likelihood(const PointSet& x, const PointSet& t_y, const MixtureParams& params) {
  require_same_dim(x, t_y);
  const Index m_count = t_y.count();
  const Index dim = x.dim();
  const detail::ColumnNormalizer norm(params, m_count, x.count(), dim);
  const detail::RowMajorMatrix xr = x.matrix();
  std::vector<double> d2(static_cast<size_t>(m_count));
  double nll = 0.0;
  for (Index n = 0; n < x.count(); ++n) {
    detail::squared_distances_to(t_y.matrix(), xr.row(n).data(), dim, d2.data());
    const double d2min = *std::min_element(d2.begin(), d2.end());
    double sum = 0.0;
    for (double v : d2) sum += std::exp(-(v - d2min) * norm.inv_two_sigma2);
    const double log_den = detail::log_add_exp(std::log(sum), norm.log_c + d2min * norm.inv_two_sigma2);
    nll -= norm.log_density_offset + log_den - d2min * norm.inv_two_sigma2;
  }
  if (std::isnan(nll)) return std::numeric_limits<double>::infinity();
  return nll;
}

/// sum_mn p_mn |x_n - t_m|^2 from the posterior products alone.
inline double weighted_residual(const PosteriorStats& stats, const PointSet& x, const Matrix& t) {
  const double xx = (stats.pt1.asDiagonal() * x.matrix().rowwise().squaredNorm()).sum();
  const double xt = stats.px.cwiseProduct(t).sum();
  const double tt = stats.p1.dot(t.rowwise().squaredNorm());
  return xx - 2.0 * xt + tt;
}

/// Expected complete-data objective with constants dropped:
/// Q = residual / (2 sigma2) + N_P D / 2 log sigma2. Uses only the products.
inline double objective_from_stats(const PosteriorStats& stats, const PointSet& x, const Matrix& t, double sigma2) {
  if (!(sigma2 > 0.0)) throw Error(ErrorCode::kInvalidArgument, "sigma2 must be positive");
  return weighted_residual(stats, x, t) / (2.0 * sigma2) +
         0.5 * stats.np * static_cast<double>(x.dim()) * std::log(sigma2);
}

/// Same objective evaluated pair by pair from the dense posterior matrix.
inline double objective_q(const PosteriorStats& stats, const PointSet& x, const PointSet& t_y, double sigma2_new) {
  if (!(sigma2_new > 0.0)) throw Error(ErrorCode::kInvalidArgument, "sigma2 must be positive");
  if (!stats.dense_p) throw Error(ErrorCode::kInvalidArgument, "objective_q needs the dense posterior matrix");
  require_same_dim(x, t_y);
  const Matrix& p = *stats.dense_p;
  if (p.rows() != t_y.count() || p.cols() != x.count()) {
    throw Error(ErrorCode::kDimensionMismatch, "posterior matrix does not match point counts");
  }
  double residual = 0.0;
  for (Index n = 0; n < x.count(); ++n) {
    for (Index m = 0; m < t_y.count(); ++m) {
      residual += p(m, n) * (x.matrix().row(n) - t_y.matrix().row(m)).squaredNorm();
    }
  }
  return residual / (2.0 * sigma2_new) + 0.5 * stats.np * static_cast<double>(x.dim()) * std::log(sigma2_new);
}

}  // namespace cpd
