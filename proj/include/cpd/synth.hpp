#pragma once

// Seeded synthetic shapes and degraded registration pairs with ground truth.

#include <cpd/report.hpp>
#include <cpd/transforms.hpp>
#include <cpd/types.hpp>

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace cpd {

// ------------------------------------------------------------------ shapes

/// Closed 2-D fish outline (body, dorsal fin, forked tail) resampled along its
/// arc length. Sample positions are jittered by up to 0.45 of the mean gap in a
/// fixed pattern, so no shift by whole samples maps the outline onto itself.
/// The outline has no rotational symmetry.
inline PointSet fish_shape(Index count = 91) {
  if (count < 3) throw Error(ErrorCode::kInvalidArgument, "fish outline needs at least 3 points");
  static const double kOutline[][2] = {
      {1.00, 0.00},   {0.80, 0.22},  {0.50, 0.36},  {0.15, 0.44},  {0.05, 0.70},  {-0.20, 0.62},
      {-0.28, 0.38},  {-0.60, 0.26}, {-0.88, 0.10}, {-1.25, 0.42}, {-1.12, 0.02}, {-1.30, -0.36},
      {-0.90, -0.10}, {-0.55, -0.24}, {-0.30, -0.36}, {-0.10, -0.52}, {0.05, -0.38}, {0.45, -0.33},
      {0.78, -0.20}};
  const int nv = static_cast<int>(std::size(kOutline));
  std::vector<double> cum(nv + 1, 0.0);
  for (int i = 0; i < nv; ++i) {
    const int j = (i + 1) % nv;
    cum[i + 1] = cum[i] + std::hypot(kOutline[j][0] - kOutline[i][0], kOutline[j][1] - kOutline[i][1]);
  }
  const double total = cum[nv];
  Matrix pts(count, 2);
  int seg = 0;
  for (Index k = 0; k < count; ++k) {
    const double jitter = 0.45 * std::sin(7.0 * 2.399963 * static_cast<double>(k) + 1.0);
    const double s = std::clamp(total * (static_cast<double>(k) + jitter) / static_cast<double>(count), 0.0, total);
    while (seg + 1 < nv && cum[seg + 1] < s) ++seg;
    const int j = (seg + 1) % nv;
    const double f = (s - cum[seg]) / (cum[seg + 1] - cum[seg]);
    pts(k, 0) = kOutline[seg][0] + f * (kOutline[j][0] - kOutline[seg][0]);
    pts(k, 1) = kOutline[seg][1] + f * (kOutline[j][1] - kOutline[seg][1]);
  }
  return PointSet(pts);
}

/// Clustered 3-D cloud with bunny-like proportions: a body, a head, two ears,
/// a tail and a foot, each an anisotropic Gaussian blob.
inline PointSet bunny_shape(Index count = 2000, std::uint64_t seed = 7) {
  if (count < 1) throw Error(ErrorCode::kInvalidArgument, "count must be positive");
  struct Blob {
    double c[3];
    double s[3];
    double weight;
  };
  static const Blob kBlobs[] = {
      {{0.0, 0.0, 0.0}, {1.00, 0.70, 0.80}, 0.55}, {{1.10, 0.60, 0.0}, {0.45, 0.40, 0.40}, 0.20},
      {{1.20, 1.30, 0.20}, {0.12, 0.45, 0.10}, 0.06}, {{1.00, 1.30, -0.20}, {0.12, 0.45, 0.10}, 0.06},
      {{-1.10, 0.10, 0.0}, {0.20, 0.20, 0.20}, 0.05}, {{0.60, -0.70, 0.0}, {0.40, 0.15, 0.50}, 0.08}};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Matrix pts(count, 3);
  Index row = 0;
  const int nb = static_cast<int>(std::size(kBlobs));
  for (int b = 0; b < nb; ++b) {
    const Index n = b + 1 == nb ? count - row : static_cast<Index>(std::floor(kBlobs[b].weight * count));
    for (Index i = 0; i < n && row < count; ++i, ++row)
      for (int d = 0; d < 3; ++d) pts(row, d) = kBlobs[b].c[d] + kBlobs[b].s[d] * normal(rng);
  }
  return PointSet(pts);
}

/// Named built-in shape ("fish", "bunny") or a point file path.
inline PointSet builtin_shape(const std::string& name, Index count = 0, std::uint64_t seed = 7) {
  if (name == "fish") return fish_shape(count > 0 ? count : 91);
  if (name == "bunny") return bunny_shape(count > 0 ? count : 2000, seed);
  throw Error(ErrorCode::kInvalidArgument, "unknown built-in shape '" + name + "'");
}

// ------------------------------------------------------------- degradation

enum class SetTarget { kX, kY, kBoth };

inline const char* to_string(SetTarget t) {
  switch (t) {
    case SetTarget::kX: return "x";
    case SetTarget::kY: return "y";
    case SetTarget::kBoth: return "both";
  }
  return "x";
}

inline SetTarget set_target_from_string(const std::string& s) {
  if (s == "x") return SetTarget::kX;
  if (s == "y") return SetTarget::kY;
  if (s == "both") return SetTarget::kBoth;
  throw Error(ErrorCode::kParse, "set must be x, y or both, got '" + s + "'");
}

inline bool targets_x(SetTarget t) { return t != SetTarget::kY; }
inline bool targets_y(SetTarget t) { return t != SetTarget::kX; }

/// Points of the base shape whose coordinate along `axis` falls in
/// [lo, hi] (fractions of the base bounding box) are removed from `set`.
struct MissingRegion {
  SetTarget set = SetTarget::kY;
  int axis = 0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Text form "<set>:<axis>:<lo>:<hi>", e.g. "y:0:0.0:0.25".
inline MissingRegion parse_missing(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ':')) parts.push_back(item);
  if (parts.size() != 4) throw Error(ErrorCode::kParse, "missing region must be <set>:<axis>:<lo>:<hi>");
  MissingRegion r;
  try {
    r.set = set_target_from_string(parts[0]);
    r.axis = std::stoi(parts[1]);
    r.lo = std::stod(parts[2]);
    r.hi = std::stod(parts[3]);
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::kParse, "malformed missing region '" + text + "'");
  }
  if (r.axis < 0 || !(r.lo <= r.hi)) throw Error(ErrorCode::kParse, "missing region needs axis >= 0 and lo <= hi");
  return r;
}

inline std::string to_string(const MissingRegion& r) {
  std::ostringstream ss;
  ss << to_string(r.set) << ':' << r.axis << ':' << r.lo << ':' << r.hi;
  return ss.str();
}

/// Degradation parameters. Lengths (deform, noise, outlier_std) are in units
/// of the base shape's RMS radius, so the same spec means the same thing for
/// any base scale.
struct DegradationSpec {
  /// Control-grid perturbation std (non-rigid); std of the perturbation of B
  /// away from s R (affine).
  double deform = 0.0;
  double noise = 0.0;
  SetTarget noise_on = SetTarget::kBoth;
  Index outliers = 0;
  double outlier_std = 1.0;
  SetTarget outliers_on = SetTarget::kX;
  std::optional<MissingRegion> missing;
  /// Rotation applied to X; unset means 50 degrees for rigid/affine pairs and
  /// none for non-rigid pairs.
  std::optional<double> rotation_deg;
  double scale = 1.0;
  /// Translation length; the direction is drawn from the seed.
  double translation = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(deform >= 0.0) || !(noise >= 0.0) || !(outlier_std >= 0.0) || !(translation >= 0.0)) {
      throw Error(ErrorCode::kInvalidArgument, "degradation levels must be non-negative");
    }
    if (outliers < 0) throw Error(ErrorCode::kInvalidArgument, "outlier count must be non-negative");
    if (!(scale > 0.0)) throw Error(ErrorCode::kInvalidArgument, "scale must be positive");
  }
};

enum class TransformKind { kRigid, kAffine, kNonRigid };

inline const char* to_string(TransformKind k) {
  switch (k) {
    case TransformKind::kRigid: return "rigid";
    case TransformKind::kAffine: return "affine";
    case TransformKind::kNonRigid: return "nonrigid";
  }
  return "rigid";
}

inline TransformKind transform_kind_from_string(const std::string& s) {
  if (s == "rigid") return TransformKind::kRigid;
  if (s == "affine") return TransformKind::kAffine;
  if (s == "nonrigid") return TransformKind::kNonRigid;
  throw Error(ErrorCode::kParse, "unknown transform kind '" + s + "'");
}

struct GroundTruth {
  TransformKind kind = TransformKind::kRigid;
  /// Maps base (= clean Y) coordinates to clean X coordinates.
  Transform transform;
  /// Noise-free position in X's frame of every point of y.
  Matrix y_target;
  /// For each point of y, the index of its counterpart in x, or -1.
  std::vector<Index> y_to_x;
  /// For each point of x, the index of its counterpart in y, or -1.
  std::vector<Index> x_to_y;
};

struct SyntheticPair {
  PointSet x;
  PointSet y;
  GroundTruth truth;
};

namespace detail {

inline double rms_radius(const Matrix& p) {
  const Matrix c = p.rowwise() - p.colwise().mean();
  const double r = std::sqrt(c.squaredNorm() / static_cast<double>(p.rows() * p.cols()));
  return r > 0.0 ? r : 1.0;
}

inline Vector random_unit(Index dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Vector v(dim);
  do {
    for (Index d = 0; d < dim; ++d) v[d] = normal(rng);
  } while (v.norm() < 1e-12);
  return v.normalized();
}

/// Rotation by `angle` radians: in the plane for D = 2, about `axis` for
/// D = 3, and in the plane of the first two coordinates otherwise.
inline Matrix rotation_matrix(Index dim, double angle, const Vector& axis) {
  Matrix r = Matrix::Identity(dim, dim);
  if (dim == 1) return r;
  if (dim == 3) {
    Eigen::Vector3d a(axis[0], axis[1], axis[2]);
    return Eigen::AngleAxisd(angle, a.normalized()).toRotationMatrix();
  }
  r(0, 0) = std::cos(angle);
  r(0, 1) = -std::sin(angle);
  r(1, 0) = std::sin(angle);
  r(1, 1) = std::cos(angle);
  return r;
}

/// Smooth random displacement: control-grid node perturbations interpolated
/// by Gaussian radial basis functions of width equal to the grid spacing.
inline NonRigidField control_grid_field(const Matrix& base, double std_dev, std::mt19937_64& rng) {
  const Index dim = base.cols();
  const int per_axis = dim == 2 ? 4 : 3;
  const Eigen::RowVectorXd lo = base.colwise().minCoeff();
  const Eigen::RowVectorXd hi = base.colwise().maxCoeff();
  Index nodes = 1;
  for (Index d = 0; d < dim; ++d) nodes *= per_axis;
  Matrix grid(nodes, dim);
  for (Index i = 0; i < nodes; ++i) {
    Index rem = i;
    for (Index d = 0; d < dim; ++d) {
      const Index k = rem % per_axis;
      rem /= per_axis;
      grid(i, d) = lo[d] + (hi[d] - lo[d]) * static_cast<double>(k) / (per_axis - 1);
    }
  }
  double spacing = ((hi - lo) / static_cast<double>(per_axis - 1)).mean();
  if (!(spacing > 0.0)) spacing = 1.0;
  std::normal_distribution<double> normal;
  Matrix disp(nodes, dim);
  for (Index i = 0; i < nodes; ++i)
    for (Index d = 0; d < dim; ++d) disp(i, d) = std_dev * normal(rng);
  Matrix g(nodes, nodes);
  const double k = -0.5 / (spacing * spacing);
  for (Index i = 0; i < nodes; ++i)
    for (Index j = 0; j < nodes; ++j) g(i, j) = std::exp(k * (grid.row(i) - grid.row(j)).squaredNorm());
  g.diagonal().array() += 1e-10;
  const Matrix w = g.ldlt().solve(disp);
  return {grid, w, spacing};
}

}  // namespace detail

/// Builds a registration pair from `base`: y is the base, x is the base
/// mapped through a random transform of the given kind, then both are
/// degraded per `spec` (missing region, noise, outliers, in that order).
inline SyntheticPair synth_pair(const DegradationSpec& spec, const PointSet& base, TransformKind kind) {
  spec.validate();
  const Index dim = base.dim();
  const Index count = base.count();
  const Matrix& b = base.matrix();
  const double rho = detail::rms_radius(b);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal;

  GroundTruth truth;
  truth.kind = kind;
  const double default_rot = kind == TransformKind::kNonRigid ? 0.0 : 50.0;
  const double angle = spec.rotation_deg.value_or(default_rot) * std::numbers::pi / 180.0;
  const Vector axis = detail::random_unit(dim, rng);
  const Matrix r = detail::rotation_matrix(dim, angle, axis);
  const Vector t = spec.translation * rho * detail::random_unit(dim, rng);

  switch (kind) {
    case TransformKind::kRigid:
      truth.transform = RigidTransform{r, spec.scale, t};
      break;
    case TransformKind::kAffine: {
      Matrix bm = spec.scale * r;
      for (Index i = 0; i < dim; ++i)
        for (Index j = 0; j < dim; ++j) bm(i, j) += spec.deform * normal(rng);
      truth.transform = AffineTransform{bm, t};
      break;
    }
    case TransformKind::kNonRigid: {
      NonRigidField field = detail::control_grid_field(b, spec.deform * rho, rng);
      NonRigidTransform nt{std::move(field), NormalizationParams::identity(dim), NormalizationParams::identity(dim)};
      truth.transform = std::move(nt);
      break;
    }
  }
  if (kind == TransformKind::kNonRigid && (angle != 0.0 || spec.scale != 1.0 || spec.translation != 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "non-rigid pairs do not take rotation, scale or translation");
  }
  const Matrix x_clean = apply_transform(truth.transform, b);

  std::vector<bool> keep_x(count, true), keep_y(count, true);
  if (spec.missing) {
    const MissingRegion& mr = *spec.missing;
    if (mr.axis >= dim) throw Error(ErrorCode::kInvalidArgument, "missing region axis out of range");
    const double lo = b.col(mr.axis).minCoeff();
    const double extent = b.col(mr.axis).maxCoeff() - lo;
    for (Index i = 0; i < count; ++i) {
      const double f = extent > 0.0 ? (b(i, mr.axis) - lo) / extent : 0.0;
      if (f >= mr.lo && f <= mr.hi) {
        if (targets_x(mr.set)) keep_x[i] = false;
        if (targets_y(mr.set)) keep_y[i] = false;
      }
    }
  }
  std::vector<Index> x_rows, y_rows;
  for (Index i = 0; i < count; ++i) {
    if (keep_x[i]) x_rows.push_back(i);
    if (keep_y[i]) y_rows.push_back(i);
  }
  if (x_rows.empty() || y_rows.empty()) throw Error(ErrorCode::kInvalidArgument, "missing region removes all points");

  auto noisy = [&](const Matrix& src, const std::vector<Index>& rows, bool add_noise) {
    Matrix out(static_cast<Index>(rows.size()), dim);
    for (size_t k = 0; k < rows.size(); ++k) {
      out.row(static_cast<Index>(k)) = src.row(rows[k]);
      if (add_noise && spec.noise > 0.0)
        for (Index d = 0; d < dim; ++d) out(static_cast<Index>(k), d) += spec.noise * rho * normal(rng);
    }
    return out;
  };
  Matrix x_pts = noisy(x_clean, x_rows, targets_x(spec.noise_on));
  Matrix y_pts = noisy(b, y_rows, targets_y(spec.noise_on));

  auto add_outliers = [&](Matrix& pts, double scale) {
    if (spec.outliers == 0) return;
    const Eigen::RowVectorXd mu = pts.colwise().mean();
    const Index old = pts.rows();
    pts.conservativeResize(old + spec.outliers, Eigen::NoChange);
    for (Index i = 0; i < spec.outliers; ++i)
      for (Index d = 0; d < dim; ++d) pts(old + i, d) = mu[d] + spec.outlier_std * scale * normal(rng);
  };
  const double x_scale = rho * (kind == TransformKind::kNonRigid ? 1.0 : spec.scale);
  if (targets_x(spec.outliers_on)) add_outliers(x_pts, x_scale);
  if (targets_y(spec.outliers_on)) add_outliers(y_pts, rho);

  std::vector<Index> base_to_x(count, -1);
  for (size_t k = 0; k < x_rows.size(); ++k) base_to_x[x_rows[k]] = static_cast<Index>(k);
  truth.y_to_x.assign(static_cast<size_t>(y_pts.rows()), -1);
  truth.x_to_y.assign(static_cast<size_t>(x_pts.rows()), -1);
  truth.y_target = Matrix(y_pts.rows(), dim);
  for (size_t k = 0; k < y_rows.size(); ++k) {
    const Index xi = base_to_x[y_rows[k]];
    truth.y_to_x[k] = xi;
    if (xi >= 0) truth.x_to_y[xi] = static_cast<Index>(k);
    truth.y_target.row(static_cast<Index>(k)) = x_clean.row(y_rows[k]);
  }
  // Model-side outliers have no counterpart; their target is their mapped position.
  if (y_pts.rows() > static_cast<Index>(y_rows.size())) {
    const Index first = static_cast<Index>(y_rows.size());
    truth.y_target.bottomRows(y_pts.rows() - first) =
        apply_transform(truth.transform, Matrix(y_pts.bottomRows(y_pts.rows() - first)));
  }
  return {PointSet(x_pts), PointSet(y_pts), std::move(truth)};
}

// -------------------------------------------------------------------- json

inline Json to_json(const DegradationSpec& s) {
  Json j = {{"deform", s.deform},
            {"noise", s.noise},
            {"noise_on", to_string(s.noise_on)},
            {"outliers", s.outliers},
            {"outlier_std", s.outlier_std},
            {"outliers_on", to_string(s.outliers_on)},
            {"scale", s.scale},
            {"translation", s.translation},
            {"seed", s.seed}};
  if (s.missing) j["missing"] = to_string(*s.missing);
  if (s.rotation_deg) j["rotation_deg"] = *s.rotation_deg;
  return j;
}

inline DegradationSpec degradation_from_json(const Json& j) {
  DegradationSpec s;
  s.deform = j.value("deform", s.deform);
  s.noise = j.value("noise", s.noise);
  s.noise_on = set_target_from_string(j.value("noise_on", std::string("both")));
  s.outliers = j.value("outliers", s.outliers);
  s.outlier_std = j.value("outlier_std", s.outlier_std);
  s.outliers_on = set_target_from_string(j.value("outliers_on", std::string("x")));
  s.scale = j.value("scale", s.scale);
  s.translation = j.value("translation", s.translation);
  s.seed = j.value("seed", s.seed);
  if (j.contains("missing") && !j.at("missing").is_null()) s.missing = parse_missing(j.at("missing").get<std::string>());
  if (j.contains("rotation_deg") && !j.at("rotation_deg").is_null()) s.rotation_deg = j.at("rotation_deg").get<double>();
  return s;
}

inline Json to_json(const GroundTruth& g) {
  return {{"kind", to_string(g.kind)},
          {"transform", to_json(g.transform)},
          {"y_target", matrix_to_json(g.y_target)},
          {"y_to_x", g.y_to_x},
          {"x_to_y", g.x_to_y}};
}

inline GroundTruth ground_truth_from_json(const Json& j) {
  GroundTruth g;
  g.kind = transform_kind_from_string(j.at("kind").get<std::string>());
  g.transform = transform_from_json(j.at("transform"));
  g.y_target = matrix_from_json(j.at("y_target"));
  g.y_to_x = j.at("y_to_x").get<std::vector<Index>>();
  g.x_to_y = j.at("x_to_y").get<std::vector<Index>>();
  return g;
}

}  // namespace cpd
