#pragma once

// EM loop shared by the rigid, affine and non-rigid drivers. A model type
// supplies the transform-specific parts:
//
//   Matrix transformed() const            current T(Y) in the working frame
//   double regularizer() const            extra objective term (0 if none)
//   MStepResult mstep(stats, x, sigma2)   updates parameters, returns sigma2
//   Transform finalize(nx, ny) const      transform in original coordinates

#include <cpd/estep.hpp>
#include <cpd/fastops.hpp>
#include <cpd/normalize.hpp>
#include <cpd/report.hpp>

#include <chrono>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace cpd {

struct MStepResult {
  double sigma2 = kSigma2Floor;
  double change = 0.0;
  std::vector<std::string> warnings;
};

namespace detail {

inline double rms_scale(const PointSet& p) {
  const Matrix centered = p.matrix().rowwise() - p.matrix().colwise().mean();
  const double v = std::sqrt(centered.squaredNorm() / static_cast<double>(p.count() * p.dim()));
  return v > 0.0 ? v : 1.0;
}

/// Problems at or below this many pairs run the exact E-step in auto mode.
inline constexpr double kAutoExactPairs = 1e6;

inline PosteriorStats run_estep(const PointSet& x, const PointSet& t_y, const MixtureParams& params,
                                const RegistrationConfig& config, double data_scale, std::string& mode) {
  const double pairs = static_cast<double>(x.count()) * static_cast<double>(t_y.count());
  if (config.fast == Acceleration::kExact || (config.fast == Acceleration::kAuto && pairs <= kAutoExactPairs)) {
    mode = "exact";
    return compute_posteriors(x, t_y, params);
  }
  GaussTransformPlan plan = config.plan;
  plan.mode = truncation_switch(params.sigma2, data_scale, plan);
  mode = to_string(plan.mode);
  return posterior_products_fast(x, t_y, params, plan);
}

/// Index of the nearest row of `t` for every row of `x`; this is the argmax of
/// the posterior over model points since all components share sigma2.
inline std::vector<Index> hard_assignment(const Matrix& x, const Matrix& t) {
  std::vector<Index> out(static_cast<size_t>(x.rows()), 0);
  for (Index n = 0; n < x.rows(); ++n) {
    double best = std::numeric_limits<double>::infinity();
    for (Index m = 0; m < t.rows(); ++m) {
      const double d2 = (x.row(n) - t.row(m)).squaredNorm();
      if (d2 < best) {
        best = d2;
        out[n] = m;
      }
    }
  }
  return out;
}

}  // namespace detail

struct WorkingFrame {
  PointSet x;
  PointSet y;
  NormalizationParams nx;
  NormalizationParams ny;
  double data_scale = 1.0;
};

inline WorkingFrame make_working_frame(const PointSet& x, const PointSet& y, bool normalize_sets,
                                       std::vector<std::string>& warnings) {
  require_same_dim(x, y);
  if (!normalize_sets) {
    return {x, y, NormalizationParams::identity(x.dim()), NormalizationParams::identity(x.dim()), detail::rms_scale(x)};
  }
  Normalized nxs = normalize(x);
  Normalized nys = normalize(y);
  if (nxs.degenerate) warnings.emplace_back("data set has zero variance; scale left at 1");
  if (nys.degenerate) warnings.emplace_back("model set has zero variance; scale left at 1");
  return {nxs.points, nys.points, nxs.params, nys.params, 1.0};
}

template <typename Model>
RegistrationReport run_em(const WorkingFrame& frame, Model& model, const RegistrationConfig& config,
                          std::string method, std::vector<std::string> warnings = {}) {
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  RegistrationReport report;
  report.method = std::move(method);
  report.config = config;
  report.warnings = std::move(warnings);

  const Sigma2Init init = init_sigma2(frame.x, frame.y);
  if (init.degenerate) report.warnings.emplace_back("all points coincide; sigma2 starts at the floor");
  double sigma2 = init.sigma2;
  double np = 0.0;

  for (int it = 1; it <= config.max_iters; ++it) {
    const auto iter_start = Clock::now();
    const Matrix t_old = model.transformed();
    IterationRecord rec;
    rec.iteration = it;
    const PosteriorStats stats =
        detail::run_estep(frame.x, PointSet(t_old), {sigma2, config.w}, config, frame.data_scale, rec.estep_mode);
    for (const auto& msg : stats.warnings) report.warnings.push_back(msg);
    np = stats.np;
    rec.neg_log_likelihood = stats.neg_log_likelihood;
    rec.q_before = objective_from_stats(stats, frame.x, t_old, sigma2) + model.regularizer();

    MStepResult step;
    try {
      step = model.mstep(stats, frame.x, sigma2);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kCorrespondenceCollapse) throw;
      report.warnings.emplace_back(e.what());
      break;
    }
    for (auto& msg : step.warnings) report.warnings.push_back(std::move(msg));
    rec.sigma2 = step.sigma2;
    rec.change = step.change;
    rec.q_after = objective_from_stats(stats, frame.x, model.transformed(), step.sigma2) + model.regularizer();
    rec.seconds = std::chrono::duration<double>(Clock::now() - iter_start).count();
    report.diagnostics.push_back(rec);
    report.iterations = it;

    const double rel = std::abs(sigma2 - step.sigma2) / sigma2;
    sigma2 = step.sigma2;
    if (sigma2 <= kSigma2Floor || rel < config.tol) {
      report.converged = true;
      break;
    }
  }

  const Matrix t_final = model.transformed();
  report.sigma2 = sigma2;
  report.transform = model.finalize(frame.nx, frame.ny);
  report.aligned = denormalize(frame.nx, t_final);
  report.correspondence.assignment = detail::hard_assignment(frame.x.matrix(), t_final);
  report.correspondence.np = np;
  report.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return report;
}

}  // namespace cpd
