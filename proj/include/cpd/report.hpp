#pragma once

// Registration configuration, per-iteration diagnostics and the report
// returned by every registration method, with a JSON representation.

#include <cpd/fastops.hpp>
#include <cpd/normalize.hpp>
#include <cpd/transforms.hpp>

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace cpd {

enum class Acceleration { kExact, kFgt, kAuto };

struct RegistrationConfig {
  double w = 0.0;
  double lambda = 2.0;
  double beta = 2.0;
  double tol = 1e-8;
  int max_iters = 150;
  bool estimate_scale = true;
  Acceleration fast = Acceleration::kExact;
  /// Rank of the kernel approximation; 0 selects dense solves up to
  /// kDenseSolveLimit model points and rank min(M, 100) beyond.
  Index lowrank = 0;
  /// Coefficient / variance passes per non-rigid M-step.
  int inner_iters = 1;
  bool normalize = true;
  std::uint64_t seed = 0;
  GaussTransformPlan plan;

  void validate() const {
    if (!(w >= 0.0) || !(w < 1.0)) throw Error(ErrorCode::kInvalidArgument, "w must lie in [0, 1)");
    if (!(lambda > 0.0)) throw Error(ErrorCode::kInvalidArgument, "lambda must be positive");
    if (!(beta > 0.0)) throw Error(ErrorCode::kInvalidArgument, "beta must be positive");
    if (!(tol >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "tol must be non-negative");
    if (max_iters < 1) throw Error(ErrorCode::kInvalidArgument, "max_iters must be >= 1");
    if (inner_iters < 1) throw Error(ErrorCode::kInvalidArgument, "inner_iters must be >= 1");
    if (lowrank < 0) throw Error(ErrorCode::kInvalidArgument, "lowrank must be >= 0");
    plan.validate();
  }
};

inline constexpr Index kDenseSolveLimit = 3000;

struct IterationRecord {
  int iteration = 0;
  double sigma2 = 0.0;           // after the M-step
  double q_before = 0.0;         // objective at the previous parameters, current posteriors
  double q_after = 0.0;          // objective after the M-step
  double neg_log_likelihood = 0.0;  // at the parameters the E-step used
  double change = 0.0;           // norm of the parameter update
  double seconds = 0.0;
  std::string estep_mode;
};

struct CorrespondenceSummary {
  /// For every data point, the model index with the largest posterior.
  std::vector<Index> assignment;
  double np = 0.0;
};

using Transform = std::variant<RigidTransform, AffineTransform, NonRigidTransform>;

inline Matrix apply_transform(const Transform& t, const Matrix& pts) {
  return std::visit([&](const auto& tr) -> Matrix { return apply_transform(tr, pts); }, t);
}

struct RegistrationReport {
  std::string method;
  RegistrationConfig config;
  Transform transform = RigidTransform::identity(1);
  /// The registered model points T(Y) in original coordinates.
  Matrix aligned;
  std::vector<IterationRecord> diagnostics;
  CorrespondenceSummary correspondence;
  std::map<std::string, double> metrics;
  double sigma2 = 0.0;
  double seconds = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<std::string> warnings;
};

// --------------------------------------------------------------------- json

using Json = nlohmann::json;

inline Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const Json& j) {
  if (!j.is_array()) throw Error(ErrorCode::kParse, "matrix must be an array of rows");
  if (j.empty()) return Matrix(0, 0);
  const Index rows = static_cast<Index>(j.size());
  const Index cols = static_cast<Index>(j.at(0).size());
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    if (static_cast<Index>(j[i].size()) != cols) throw Error(ErrorCode::kParse, "ragged matrix");
    for (Index c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

inline Json vector_to_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Vector vector_from_json(const Json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
}

inline const char* to_string(Acceleration a) {
  switch (a) {
    case Acceleration::kExact: return "exact";
    case Acceleration::kFgt: return "fgt";
    case Acceleration::kAuto: return "auto";
  }
  return "exact";
}

inline Acceleration acceleration_from_string(const std::string& s) {
  if (s == "exact") return Acceleration::kExact;
  if (s == "fgt") return Acceleration::kFgt;
  if (s == "auto") return Acceleration::kAuto;
  throw Error(ErrorCode::kParse, "unknown acceleration mode '" + s + "'");
}

inline GaussMode gauss_mode_from_string(const std::string& s) {
  if (s == "exact") return GaussMode::kExact;
  if (s == "fgt") return GaussMode::kFgt;
  if (s == "truncated") return GaussMode::kTruncated;
  throw Error(ErrorCode::kParse, "unknown gauss transform mode '" + s + "'");
}

inline Json to_json(const GaussTransformPlan& p) {
  return {{"mode", to_string(p.mode)},
          {"epsilon", p.epsilon},
          {"far_field_ratio", p.far_field_ratio},
          {"centers", p.centers},
          {"order", p.order},
          {"max_order", p.max_order},
          {"truncation_radius", p.truncation_radius},
          {"switch_fraction", p.switch_fraction}};
}

inline GaussTransformPlan plan_from_json(const Json& j) {
  GaussTransformPlan p;
  p.mode = gauss_mode_from_string(j.value("mode", std::string("fgt")));
  p.epsilon = j.value("epsilon", p.epsilon);
  p.far_field_ratio = j.value("far_field_ratio", p.far_field_ratio);
  p.centers = j.value("centers", p.centers);
  p.order = j.value("order", p.order);
  p.max_order = j.value("max_order", p.max_order);
  p.truncation_radius = j.value("truncation_radius", p.truncation_radius);
  p.switch_fraction = j.value("switch_fraction", p.switch_fraction);
  return p;
}

inline Json to_json(const RegistrationConfig& c) {
  return {{"w", c.w},
          {"lambda", c.lambda},
          {"beta", c.beta},
          {"tol", c.tol},
          {"max_iters", c.max_iters},
          {"estimate_scale", c.estimate_scale},
          {"fast", to_string(c.fast)},
          {"lowrank", c.lowrank},
          {"inner_iters", c.inner_iters},
          {"normalize", c.normalize},
          {"seed", c.seed},
          {"plan", to_json(c.plan)}};
}

/// Missing keys keep their defaults, so partial configs are accepted.
inline RegistrationConfig config_from_json(const Json& j) {
  RegistrationConfig c;
  c.w = j.value("w", c.w);
  c.lambda = j.value("lambda", c.lambda);
  c.beta = j.value("beta", c.beta);
  c.tol = j.value("tol", c.tol);
  c.max_iters = j.value("max_iters", c.max_iters);
  c.estimate_scale = j.value("estimate_scale", c.estimate_scale);
  c.fast = acceleration_from_string(j.value("fast", std::string("exact")));
  c.lowrank = j.value("lowrank", c.lowrank);
  c.inner_iters = j.value("inner_iters", c.inner_iters);
  c.normalize = j.value("normalize", c.normalize);
  c.seed = j.value("seed", c.seed);
  if (j.contains("plan")) c.plan = plan_from_json(j.at("plan"));
  return c;
}

inline Json to_json(const NormalizationParams& n) { return {{"mu", vector_to_json(n.mu)}, {"rho", n.rho}}; }

inline NormalizationParams normalization_from_json(const Json& j) {
  return {vector_from_json(j.at("mu")), j.at("rho").get<double>()};
}

inline Json to_json(const Transform& t) {
  return std::visit(
      [](const auto& tr) -> Json {
        using T = std::decay_t<decltype(tr)>;
        if constexpr (std::is_same_v<T, RigidTransform>) {
          return {{"kind", "rigid"}, {"r", matrix_to_json(tr.r)}, {"s", tr.s}, {"t", vector_to_json(tr.t)}};
        } else if constexpr (std::is_same_v<T, AffineTransform>) {
          return {{"kind", "affine"}, {"b", matrix_to_json(tr.b)}, {"t", vector_to_json(tr.t)}};
        } else {
          return {{"kind", "nonrigid"},
                  {"y_ref", matrix_to_json(tr.field.y_ref)},
                  {"w", matrix_to_json(tr.field.w_coef)},
                  {"beta", tr.field.beta},
                  {"input", to_json(tr.input)},
                  {"output", to_json(tr.output)}};
        }
      },
      t);
}

inline Transform transform_from_json(const Json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "rigid") {
    return RigidTransform{matrix_from_json(j.at("r")), j.at("s").get<double>(), vector_from_json(j.at("t"))};
  }
  if (kind == "affine") return AffineTransform{matrix_from_json(j.at("b")), vector_from_json(j.at("t"))};
  if (kind == "nonrigid") {
    NonRigidTransform t;
    t.field = {matrix_from_json(j.at("y_ref")), matrix_from_json(j.at("w")), j.at("beta").get<double>()};
    t.input = normalization_from_json(j.at("input"));
    t.output = normalization_from_json(j.at("output"));
    return t;
  }
  throw Error(ErrorCode::kParse, "unknown transform kind '" + kind + "'");
}

inline Json to_json(const RegistrationReport& r) {
  Json diag = Json::array();
  for (const auto& d : r.diagnostics) {
    diag.push_back({{"iteration", d.iteration},
                    {"sigma2", d.sigma2},
                    {"q_before", d.q_before},
                    {"q_after", d.q_after},
                    {"neg_log_likelihood", d.neg_log_likelihood},
                    {"change", d.change},
                    {"seconds", d.seconds},
                    {"estep_mode", d.estep_mode}});
  }
  return {{"method", r.method},
          {"config", to_json(r.config)},
          {"transform", to_json(r.transform)},
          {"aligned", matrix_to_json(r.aligned)},
          {"diagnostics", diag},
          {"correspondence", {{"assignment", r.correspondence.assignment}, {"np", r.correspondence.np}}},
          {"metrics", r.metrics},
          {"sigma2", r.sigma2},
          {"seconds", r.seconds},
          {"iterations", r.iterations},
          {"converged", r.converged},
          {"warnings", r.warnings}};
}

inline RegistrationReport report_from_json(const Json& j) {
  RegistrationReport r;
  r.method = j.at("method").get<std::string>();
  r.config = config_from_json(j.at("config"));
  r.transform = transform_from_json(j.at("transform"));
  r.aligned = matrix_from_json(j.at("aligned"));
  for (const auto& d : j.at("diagnostics")) {
    r.diagnostics.push_back({d.at("iteration").get<int>(), d.at("sigma2").get<double>(),
                             d.at("q_before").get<double>(), d.at("q_after").get<double>(),
                             d.at("neg_log_likelihood").get<double>(), d.at("change").get<double>(),
                             d.at("seconds").get<double>(), d.at("estep_mode").get<std::string>()});
  }
  r.correspondence.assignment = j.at("correspondence").at("assignment").get<std::vector<Index>>();
  r.correspondence.np = j.at("correspondence").at("np").get<double>();
  r.metrics = j.at("metrics").get<std::map<std::string, double>>();
  r.sigma2 = j.at("sigma2").get<double>();
  r.seconds = j.at("seconds").get<double>();
  r.iterations = j.at("iterations").get<int>();
  r.converged = j.at("converged").get<bool>();
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  return r;
}

}  // namespace cpd
