#pragma once

// Fast evaluation of Gaussian sums and low-rank kernel solves.
//
//   f(t_i) = sum_j w_j exp(-|s_j - t_i|^2 / 2 sigma2)
//
// Three evaluators share one entry point:
//   exact      O(N M) double loop
//   fgt        uniform box grid; each source box is summarized by Hermite
//              moments, translated into a Taylor series at each nearby target
//              box. Grid size and series order are chosen so a truncation
//              bound meets epsilon; sparse box pairs are summed directly.
//   truncated  grid binning; pairs farther apart than the cutoff radius are
//              dropped.
// fgt and truncated guarantee |f - f_exact| <= epsilon * |w|_1 per column.

#include <cpd/estep.hpp>
#include <cpd/kernel.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace cpd {

enum class GaussMode { kExact, kFgt, kTruncated };

inline const char* to_string(GaussMode mode) {
  switch (mode) {
    case GaussMode::kExact: return "exact";
    case GaussMode::kFgt: return "fgt";
    case GaussMode::kTruncated: return "truncated";
  }
  return "unknown";
}

struct GaussTransformPlan {
  GaussMode mode = GaussMode::kFgt;
  /// Absolute accuracy per unit of |weights|_1.
  double epsilon = 1e-6;
  /// Interaction cutoff between boxes, in units of sigma.
  double far_field_ratio = 8.0;
  /// Upper bound on occupied source boxes.
  int centers = 4096;
  /// Minimum series order per axis (number of retained terms).
  int order = 2;
  int max_order = 24;
  /// Truncated mode cutoff in units of sigma.
  double truncation_radius = 5.0;
  /// Below sigma < switch_fraction * data_scale the truncated mode takes over.
  double switch_fraction = 0.01;

  void validate() const {
    if (!(epsilon > 0.0) || !(epsilon < 1.0)) throw Error(ErrorCode::kInvalidArgument, "epsilon must be in (0, 1)");
    if (order < 1 || max_order < order) throw Error(ErrorCode::kInvalidArgument, "truncation order must be >= 1");
    if (centers < 1) throw Error(ErrorCode::kInvalidArgument, "box count must be >= 1");
    if (!(far_field_ratio > 0.0) || !(truncation_radius > 0.0)) {
      throw Error(ErrorCode::kInvalidArgument, "cutoff radii must be positive");
    }
  }

  /// Cutoff (in sigma units) beyond which a single unit-weight term is below epsilon.
  double epsilon_radius() const { return std::sqrt(2.0 * std::log(1.0 / epsilon)); }
};

struct GaussTransformResult {
  Matrix values;
  GaussMode used = GaussMode::kExact;
  int centers = 0;
  int order = 0;
  double cutoff = 0.0;  // in distance units, for approximate modes
  std::vector<std::string> warnings;
};

namespace detail {

inline void check_transform_args(const PointSet& sources, const PointSet& targets, const Matrix& weights,
                                 double sigma2) {
  require_same_dim(sources, targets);
  if (weights.rows() != sources.count()) {
    throw Error(ErrorCode::kDimensionMismatch, "weights need one row per source");
  }
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) throw Error(ErrorCode::kInvalidArgument, "sigma2 must be positive");
}

inline Matrix gauss_exact(const RowMajorMatrix& src, const RowMajorMatrix& tgt, const RowMajorMatrix& w,
                          double sigma2) {
  const Index n = src.rows(), m = tgt.rows(), dim = src.cols(), cols = w.cols();
  const double k = -0.5 / sigma2;
  RowMajorMatrix out = RowMajorMatrix::Zero(m, cols);
  for (Index i = 0; i < m; ++i) {
    const double* t = tgt.row(i).data();
    double* o = out.row(i).data();
    for (Index j = 0; j < n; ++j) {
      const double* s = src.row(j).data();
      double d2 = 0.0;
      for (Index d = 0; d < dim; ++d) {
        const double diff = t[d] - s[d];
        d2 += diff * diff;
      }
      const double e = std::exp(k * d2);
      const double* wj = w.row(j).data();
      for (Index c = 0; c < cols; ++c) o[c] += e * wj[c];
    }
  }
  return out;
}

// ---------------------------------------------------------------- truncated

inline Matrix gauss_truncated(const RowMajorMatrix& src, const RowMajorMatrix& tgt, const RowMajorMatrix& w,
                              double sigma2, double radius) {
  const Index n = src.rows(), m = tgt.rows(), dim = src.cols(), cols = w.cols();
  const double k = -0.5 / sigma2;
  const double r2 = radius * radius;
  const Eigen::RowVectorXd lo = src.colwise().minCoeff();
  const Eigen::RowVectorXd hi = src.colwise().maxCoeff();

  std::vector<std::int64_t> extent(static_cast<size_t>(dim));
  double cells = 1.0;
  for (Index d = 0; d < dim; ++d) {
    extent[d] = static_cast<std::int64_t>(std::floor((hi[d] - lo[d]) / radius)) + 1;
    cells *= static_cast<double>(extent[d]);
  }
  if (cells > 4e18) return gauss_exact(src, tgt, w, sigma2);

  auto cell_of = [&](const double* p, std::vector<std::int64_t>& c) {
    for (Index d = 0; d < dim; ++d) c[d] = static_cast<std::int64_t>(std::floor((p[d] - lo[d]) / radius));
  };
  auto key_of = [&](const std::vector<std::int64_t>& c) {
    std::uint64_t key = 0;
    for (Index d = dim; d-- > 0;) key = key * static_cast<std::uint64_t>(extent[d]) + static_cast<std::uint64_t>(c[d]);
    return key;
  };

  std::vector<std::int64_t> cell(static_cast<size_t>(dim));
  std::vector<std::pair<std::uint64_t, Index>> keyed(static_cast<size_t>(n));
  for (Index j = 0; j < n; ++j) {
    cell_of(src.row(j).data(), cell);
    keyed[j] = {key_of(cell), j};
  }
  std::sort(keyed.begin(), keyed.end());
  std::unordered_map<std::uint64_t, std::pair<size_t, size_t>> ranges;
  for (size_t a = 0; a < keyed.size();) {
    size_t b = a;
    while (b < keyed.size() && keyed[b].first == keyed[a].first) ++b;
    ranges.emplace(keyed[a].first, std::make_pair(a, b));
    a = b;
  }

  RowMajorMatrix out = RowMajorMatrix::Zero(m, cols);
  std::vector<std::int64_t> base(static_cast<size_t>(dim)), probe(static_cast<size_t>(dim)), offset(static_cast<size_t>(dim));
  for (Index i = 0; i < m; ++i) {
    const double* t = tgt.row(i).data();
    double* o = out.row(i).data();
    cell_of(t, base);
    std::fill(offset.begin(), offset.end(), -1);
    while (true) {
      bool inside = true;
      for (Index d = 0; d < dim; ++d) {
        probe[d] = base[d] + offset[d];
        if (probe[d] < 0 || probe[d] >= extent[d]) inside = false;
      }
      if (inside) {
        const auto it = ranges.find(key_of(probe));
        if (it != ranges.end()) {
          for (size_t a = it->second.first; a < it->second.second; ++a) {
            const Index j = keyed[a].second;
            const double* s = src.row(j).data();
            double d2 = 0.0;
            for (Index d = 0; d < dim; ++d) {
              const double diff = t[d] - s[d];
              d2 += diff * diff;
            }
            if (d2 > r2) continue;
            const double e = std::exp(k * d2);
            const double* wj = w.row(j).data();
            for (Index c = 0; c < cols; ++c) o[c] += e * wj[c];
          }
        }
      }
      Index d = 0;
      for (; d < dim; ++d) {
        if (++offset[d] <= 1) break;
        offset[d] = -1;
      }
      if (d == dim) break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------- fgt
//
// Hermite/Taylor scheme on a uniform box grid in scaled coordinates x / h,
// h^2 = 2 sigma2. Along one axis, with u = s - s_B and v = t - t_C measured
// from the source and target box centers,
//   exp(-(t - s)^2) = sum_{n, m} u^n / n! (-v)^m / m! h_{n+m}(t_C - s_B),
// where h_k(x) = (-1)^k d^k/dx^k exp(-x^2). Sources are collected into
// Hermite moments per box, translated into Taylor coefficients per target
// box, and both series are cut at order p per axis. Sparse box pairs are
// summed directly and pairs beyond the cutoff are dropped.

/// Cramer's inequality: |h_k(x)| <= K 2^{k/2} sqrt(k!) exp(-x^2 / 2).
inline constexpr double kCramer = 1.086435;

/// Worst-case error per unit weight of the order-p expansion when every
/// source and target lies within `half_side` (scaled, per axis) of its box
/// center. Along one axis the dropped terms with n + m = k sum to at most
/// K (sqrt2 b)^k / sqrt(k!) times the binomials C(k, n) with n >= p or
/// k - n >= p; the D axes combine as D (1 + e)^{D-1} e.
inline double hermite_error_bound(Index dim, int p, double half_side) {
  const double log_2rho = std::log(2.0 * std::sqrt(2.0) * half_side);
  const double log2 = std::log(2.0);
  double e1 = 0.0;
  for (int k = p;; ++k) {
    double inside = 0.0;  // share of the 2^k binomial mass kept by the expansion
    for (int n = k - p + 1; n <= p - 1; ++n) {
      inside += std::exp(std::lgamma(k + 1.0) - std::lgamma(n + 1.0) - std::lgamma(k - n + 1.0) - k * log2);
    }
    const double term = std::exp(k * log_2rho - 0.5 * std::lgamma(k + 1.0)) * std::max(0.0, 1.0 - inside);
    e1 += term;
    if (kCramer * e1 >= 1.0) return std::numeric_limits<double>::infinity();
    if (k >= 2 * p && k > std::exp(2.0 * log_2rho) && term < 1e-6 * e1) break;
  }
  e1 *= kCramer;
  return static_cast<double>(dim) * std::pow(1.0 + e1, static_cast<double>(dim - 1)) * e1;
}

inline Index int_pow(Index base, Index exp) {
  Index r = 1;
  for (Index i = 0; i < exp; ++i) r *= base;
  return r;
}

/// Occupied boxes of a uniform grid; points are stored in box order.
struct BoxGrid {
  double side = 0.0;
  std::vector<double> lo;
  std::vector<Index> count;  // boxes per axis
  std::vector<std::int64_t> key;
  std::vector<Index> begin;  // boxes() + 1 offsets into `index` / `points`
  std::vector<Index> index;  // original row of each sorted point
  RowMajorMatrix points;
  std::unordered_map<std::int64_t, Index> lookup;

  BoxGrid(const RowMajorMatrix& pts, std::vector<double> origin, double box_side, std::vector<Index> per_axis)
      : side(box_side), lo(std::move(origin)), count(std::move(per_axis)) {
    const Index n = pts.rows(), dim = pts.cols();
    std::vector<std::pair<std::int64_t, Index>> keyed(static_cast<size_t>(n));
    for (Index j = 0; j < n; ++j) {
      std::int64_t k = 0;
      for (Index d = 0; d < dim; ++d) {
        const Index i = std::clamp<Index>(static_cast<Index>(std::floor((pts(j, d) - lo[d]) / side)), 0, count[d] - 1);
        k = k * count[d] + i;
      }
      keyed[j] = {k, j};
    }
    std::sort(keyed.begin(), keyed.end());
    index.resize(static_cast<size_t>(n));
    points.resize(n, dim);
    for (Index j = 0; j < n; ++j) {
      index[j] = keyed[j].second;
      points.row(j) = pts.row(keyed[j].second);
      if (j == 0 || keyed[j].first != keyed[j - 1].first) {
        lookup.emplace(keyed[j].first, static_cast<Index>(key.size()));
        key.push_back(keyed[j].first);
        begin.push_back(j);
      }
    }
    begin.push_back(n);
  }

  Index boxes() const { return static_cast<Index>(key.size()); }
  Index size(Index b) const { return begin[b + 1] - begin[b]; }

  std::vector<Index> cell(Index b) const {
    std::vector<Index> c(count.size());
    std::int64_t k = key[b];
    for (size_t d = count.size(); d-- > 0;) {
      c[d] = static_cast<Index>(k % count[d]);
      k /= count[d];
    }
    return c;
  }

  void center(Index b, double* c) const {
    const std::vector<Index> ijk = cell(b);
    for (size_t d = 0; d < ijk.size(); ++d) c[d] = lo[d] + (static_cast<double>(ijk[d]) + 0.5) * side;
  }
};

/// Source boxes whose closest approach to each target box is within `cutoff`.
inline std::vector<std::vector<Index>> interaction_lists(const BoxGrid& sg, const BoxGrid& tg, double cutoff) {
  const Index dim = static_cast<Index>(sg.count.size());
  const Index reach = static_cast<Index>(std::ceil(cutoff / sg.side)) + 1;
  double stencil = 1.0;
  for (Index d = 0; d < dim; ++d) stencil *= static_cast<double>(std::min<Index>(2 * reach + 1, sg.count[d]));
  const double limit = cutoff * cutoff / (sg.side * sg.side);
  auto gap2 = [&](const std::vector<Index>& a, const std::vector<Index>& b) {
    double g = 0.0;
    for (Index d = 0; d < dim; ++d) {
      const double steps = std::max(0.0, std::abs(static_cast<double>(a[d] - b[d])) - 1.0);
      g += steps * steps;
    }
    return g;
  };

  std::vector<std::vector<Index>> source_cells(static_cast<size_t>(sg.boxes()));
  for (Index b = 0; b < sg.boxes(); ++b) source_cells[b] = sg.cell(b);
  std::vector<std::vector<Index>> lists(static_cast<size_t>(tg.boxes()));
  std::vector<Index> probe(static_cast<size_t>(dim)), offset(static_cast<size_t>(dim));
  for (Index c = 0; c < tg.boxes(); ++c) {
    const std::vector<Index> home = tg.cell(c);
    auto& list = lists[c];
    if (stencil >= static_cast<double>(sg.boxes())) {
      for (Index b = 0; b < sg.boxes(); ++b) {
        if (gap2(home, source_cells[b]) <= limit) list.push_back(b);
      }
      continue;
    }
    std::fill(offset.begin(), offset.end(), -reach);
    while (true) {
      bool inside = true;
      std::int64_t k = 0;
      for (Index d = 0; d < dim; ++d) {
        probe[d] = home[d] + offset[d];
        inside = inside && probe[d] >= 0 && probe[d] < sg.count[d];
        k = k * sg.count[d] + probe[d];
      }
      if (inside && gap2(home, probe) <= limit) {
        const auto it = sg.lookup.find(k);
        if (it != sg.lookup.end()) list.push_back(it->second);
      }
      Index d = dim - 1;
      while (d >= 0 && ++offset[d] > reach) offset[d--] = -reach;
      if (d < 0) break;
    }
  }
  return lists;
}

/// Estimated run time in nanoseconds, fitted to single-core timings of each
/// stage over D = 1..3, one and four columns, and a range of grid sizes.
struct FgtCostModel {
  Index dim, cols;
  double pair() const { return 0.8 * static_cast<double>(dim + cols + 6); }
  double box_pair() const { return 170.0; }
  double box() const { return 1.1e4; }
  double point() const { return 330.0; }
  double translate(int p) const {
    return 0.29 * (static_cast<double>(dim * int_pow(p, dim + 1) * cols) + 2.0 * p * p * static_cast<double>(dim));
  }
  double expand(int p, Index points) const {
    const double per_point = 0.075 * static_cast<double>(int_pow(p, dim) * cols) +
                             3.2 * static_cast<double>(int_pow(p, dim - 1) * dim);
    return static_cast<double>(points) * per_point + box();
  }
};

struct FgtLayout {
  double side = 0.0;
  int order = 0;
  double cost = std::numeric_limits<double>::infinity();
};

/// Whether box pair (b -> c) goes through the expansion.
inline bool translate_pair(const FgtCostModel& model, int p, Index sources, Index targets) {
  return model.translate(p) < static_cast<double>(sources) * static_cast<double>(targets) * model.pair();
}

inline double layout_cost(const FgtCostModel& model, int p, const BoxGrid& sg, const BoxGrid& tg,
                          const std::vector<std::vector<Index>>& lists) {
  std::vector<char> expanded(static_cast<size_t>(sg.boxes()), 0);
  double cost = static_cast<double>(sg.index.size() + tg.index.size()) * model.point();
  for (Index c = 0; c < tg.boxes(); ++c) {
    bool local = false;
    for (Index b : lists[c]) {
      if (translate_pair(model, p, sg.size(b), tg.size(c))) {
        cost += model.translate(p);
        expanded[b] = 1;
        local = true;
      } else {
        cost += static_cast<double>(sg.size(b)) * static_cast<double>(tg.size(c)) * model.pair() + model.box_pair();
      }
    }
    if (local) cost += model.expand(p, tg.size(c));
  }
  for (Index b = 0; b < sg.boxes(); ++b) {
    if (expanded[b]) cost += model.expand(p, sg.size(b));
  }
  return cost;
}

inline Matrix gauss_fgt(const RowMajorMatrix& src_in, const RowMajorMatrix& tgt_in, const RowMajorMatrix& w,
                        double sigma2, const GaussTransformPlan& plan, GaussTransformResult& info) {
  const Index n = src_in.rows(), m = tgt_in.rows(), dim = src_in.cols(), cols = w.cols();
  const double h = std::sqrt(2.0 * sigma2);
  const RowMajorMatrix src = src_in / h, tgt = tgt_in / h;
  double ratio = plan.far_field_ratio;
  if (ratio < plan.epsilon_radius()) {
    ratio = plan.epsilon_radius();
    info.warnings.emplace_back("far-field ratio raised to meet target accuracy");
  }
  const double cutoff = ratio * std::sqrt(sigma2) / h;

  std::vector<double> lo(static_cast<size_t>(dim)), hi(static_cast<size_t>(dim));
  double extent = 0.0;
  for (Index d = 0; d < dim; ++d) {
    lo[d] = std::min(src.col(d).minCoeff(), tgt.col(d).minCoeff());
    hi[d] = std::max(src.col(d).maxCoeff(), tgt.col(d).maxCoeff());
    extent = std::max(extent, hi[d] - lo[d]);
  }
  extent = std::max(extent, 1e-12);
  auto counts_for = [&](double side) {
    std::vector<Index> c(static_cast<size_t>(dim));
    for (Index d = 0; d < dim; ++d) c[d] = std::max<Index>(1, static_cast<Index>(std::ceil((hi[d] - lo[d]) / side)));
    return c;
  };

  // Planning: coarse to fine grids; the order per grid is the smallest that
  // meets epsilon. Stops once the cost has risen twice past the best.
  const FgtCostModel model{dim, cols};
  const double direct_cost = static_cast<double>(n) * static_cast<double>(m) * model.pair();
  FgtLayout best;
  int rises = 0;
  for (Index per_axis = 1; per_axis <= 4096; per_axis = per_axis < 4 ? per_axis + 1 : per_axis * 3 / 2) {
    const double side = extent / static_cast<double>(per_axis) * (1.0 + 1e-9);
    int p = -1;
    for (int q = plan.order; q <= plan.max_order; ++q) {
      if (hermite_error_bound(dim, q, 0.5 * side) <= plan.epsilon) {
        p = q;
        break;
      }
    }
    if (p < 0) continue;
    const BoxGrid sg(src, lo, side, counts_for(side));
    if (sg.boxes() > plan.centers || 2 * sg.boxes() > n) break;
    const BoxGrid tg(tgt, lo, side, counts_for(side));
    const double cost = layout_cost(model, p, sg, tg, interaction_lists(sg, tg, cutoff));
    if (cost < best.cost) {
      best = {side, p, cost};
      rises = 0;
    } else if (++rises >= 2) {
      break;
    }
  }
  if (best.order <= 0 || best.cost >= 0.8 * direct_cost) {
    info.used = GaussMode::kExact;
    info.warnings.emplace_back("expansion not cheaper than direct evaluation; exact sums used");
    return gauss_exact(src_in, tgt_in, w, sigma2);
  }

  const int p = best.order;
  const BoxGrid sg(src, lo, best.side, counts_for(best.side));
  const BoxGrid tg(tgt, lo, best.side, counts_for(best.side));
  const auto lists = interaction_lists(sg, tg, cutoff);
  info.used = GaussMode::kFgt;
  info.centers = static_cast<int>(sg.boxes());
  info.order = p;
  info.cutoff = cutoff * h;

  const Index head_terms = int_pow(p, dim - 1);
  const Index block = int_pow(p, dim) * cols;
  std::vector<double> inv_fact(static_cast<size_t>(p), 1.0);
  for (int k = 1; k < p; ++k) inv_fact[k] = inv_fact[k - 1] / k;
  RowMajorMatrix weights(n, cols);
  for (Index j = 0; j < n; ++j) weights.row(j) = w.row(sg.index[j]);

  std::vector<std::vector<char>> translated(static_cast<size_t>(tg.boxes()));
  std::vector<char> expanded(static_cast<size_t>(sg.boxes()), 0);
  for (Index c = 0; c < tg.boxes(); ++c) {
    for (Index b : lists[c]) {
      const bool t = translate_pair(model, p, sg.size(b), tg.size(c));
      translated[c].push_back(t);
      if (t) expanded[b] = 1;
    }
  }

  // Hermite moments A[a_1..a_D][col] = sum_j w_j prod_d u_d^{a_d} / a_d!.
  std::vector<double> center(static_cast<size_t>(dim));
  std::vector<RowMajorMatrix> moments(static_cast<size_t>(sg.boxes()));
  for (Index b = 0; b < sg.boxes(); ++b) {
    if (!expanded[b]) continue;
    sg.center(b, center.data());
    const Index nb = sg.size(b);
    RowMajorMatrix head(nb, head_terms), tail(nb, p * cols);
    for (Index q = 0; q < nb; ++q) {
      const Index j = sg.begin[b] + q;
      const double* s = sg.points.row(j).data();
      double* hq = head.row(q).data();
      hq[0] = 1.0;
      for (Index d = 0, filled = 1; d + 1 < dim; ++d, filled *= p) {
        const double u = s[d] - center[d];
        for (Index k = filled; k-- > 0;) {
          double pw = hq[k];
          for (int a = 0; a < p; ++a, pw *= u) hq[k * p + a] = pw * inv_fact[a];
        }
      }
      const double u = s[dim - 1] - center[dim - 1];
      const double* wj = weights.row(j).data();
      double* tq = tail.row(q).data();
      double pw = 1.0;
      for (int a = 0; a < p; ++a, pw *= u) {
        for (Index col = 0; col < cols; ++col) tq[a * cols + col] = pw * inv_fact[a] * wj[col];
      }
    }
    moments[b].noalias() = head.transpose() * tail;
  }

  RowMajorMatrix sorted_out = RowMajorMatrix::Zero(m, cols);
  std::vector<double> herm(static_cast<size_t>(2 * p - 1));
  std::vector<double> stage_in(static_cast<size_t>(block)), stage_out(static_cast<size_t>(block));
  std::vector<double> taylor(static_cast<size_t>(block));
  std::vector<double> tcenter(static_cast<size_t>(dim)), scenter(static_cast<size_t>(dim));
  std::vector<Matrix> hankel(static_cast<size_t>(dim), Matrix(p, p));
  std::vector<Matrix> powers(static_cast<size_t>(dim));
  Matrix partial, trailing;
  for (Index c = 0; c < tg.boxes(); ++c) {
    tg.center(c, tcenter.data());
    const Index t0 = tg.begin[c], t1 = tg.begin[c + 1];
    bool local = false;
    std::fill(taylor.begin(), taylor.end(), 0.0);
    for (size_t q = 0; q < lists[c].size(); ++q) {
      const Index b = lists[c][q];
      if (!translated[c][q]) {
        for (Index i = t0; i < t1; ++i) {
          const double* t = tg.points.row(i).data();
          double* o = sorted_out.row(i).data();
          for (Index j = sg.begin[b]; j < sg.begin[b + 1]; ++j) {
            const double* s = sg.points.row(j).data();
            double d2 = 0.0;
            for (Index d = 0; d < dim; ++d) d2 += (t[d] - s[d]) * (t[d] - s[d]);
            const double e = std::exp(-d2);
            const double* wj = weights.row(j).data();
            for (Index col = 0; col < cols; ++col) o[col] += e * wj[col];
          }
        }
        continue;
      }
      // Hermite -> Taylor, one axis at a time. Each product reads the
      // leading axis of a row-major block and writes column-major, which
      // leaves the next axis leading: [a_1..a_D][col] ends as [col][b_1..b_D].
      local = true;
      sg.center(b, scenter.data());
      for (Index d = 0; d < dim; ++d) {
        const double x = tcenter[d] - scenter[d];
        herm[0] = std::exp(-x * x);
        if (p > 1) herm[1] = 2.0 * x * herm[0];
        for (int k = 1; k + 1 < 2 * p - 1; ++k) herm[k + 1] = 2.0 * x * herm[k] - 2.0 * k * herm[k - 1];
        for (int beta = 0; beta < p; ++beta) {
          for (int alpha = 0; alpha < p; ++alpha) hankel[d](beta, alpha) = herm[alpha + beta];
        }
      }
      std::copy(moments[b].data(), moments[b].data() + block, stage_in.begin());
      for (Index d = 0; d < dim; ++d) {
        const Eigen::Map<const RowMajorMatrix> in(stage_in.data(), p, block / p);
        Eigen::Map<Matrix> out(stage_out.data(), p, block / p);
        out.noalias() = hankel[d] * in;
        stage_in.swap(stage_out);
      }
      for (Index k = 0; k < block; ++k) taylor[k] += stage_in[k];
    }
    if (!local) continue;

    // Evaluate sum_b L[col][b] prod_d (-v_d)^{b_d} / b_d! at each target:
    // one product over the trailing axes, then the leading axis per target.
    const Index mc = t1 - t0;
    for (Index d = 0; d < dim; ++d) {
      powers[d].resize(p, mc);
      for (Index i = 0; i < mc; ++i) {
        const double v = tcenter[d] - tg.points(t0 + i, d);
        double pw = 1.0;
        for (int a = 0; a < p; ++a, pw *= v) powers[d](a, i) = pw * inv_fact[a];
      }
    }
    trailing.resize(head_terms, mc);
    for (Index i = 0; i < mc; ++i) {
      double* vi = trailing.col(i).data();
      vi[0] = 1.0;
      for (Index d = 1, filled = 1; d < dim; ++d, filled *= p) {
        for (Index k = filled; k-- > 0;) {
          const double base = vi[k];
          for (int a = 0; a < p; ++a) vi[k * p + a] = base * powers[d](a, i);
        }
      }
    }
    const Eigen::Map<const RowMajorMatrix> coeffs(taylor.data(), cols * p, head_terms);
    partial.noalias() = coeffs * trailing;
    for (Index i = 0; i < mc; ++i) {
      const Eigen::Map<const Matrix> lead(partial.col(i).data(), p, cols);
      sorted_out.row(t0 + i).noalias() += (lead.transpose() * powers[0].col(i)).transpose();
    }
  }

  RowMajorMatrix out(m, cols);
  for (Index i = 0; i < m; ++i) out.row(tg.index[i]) = sorted_out.row(i);
  return out;
}

}  // namespace detail

/// Gaussian sums at every target: result(i, :) = sum_j exp(-|s_j - t_i|^2 / 2 sigma2) weights(j, :).
inline GaussTransformResult gauss_transform_detailed(const PointSet& sources, const PointSet& targets,
                                                     const Matrix& weights, double sigma2,
                                                     const GaussTransformPlan& plan) {
  detail::check_transform_args(sources, targets, weights, sigma2);
  plan.validate();
  const detail::RowMajorMatrix src = sources.matrix();
  const detail::RowMajorMatrix tgt = targets.matrix();
  const detail::RowMajorMatrix w = weights;
  GaussTransformResult result;
  result.used = plan.mode;
  switch (plan.mode) {
    case GaussMode::kExact:
      result.values = detail::gauss_exact(src, tgt, w, sigma2);
      break;
    case GaussMode::kTruncated: {
      const double radius = std::max(plan.truncation_radius, plan.epsilon_radius()) * std::sqrt(sigma2);
      result.cutoff = radius;
      result.values = detail::gauss_truncated(src, tgt, w, sigma2, radius);
      break;
    }
    case GaussMode::kFgt:
      if (sources.dim() > 3) {
        result.used = GaussMode::kExact;
        result.warnings.emplace_back("expansion mode limited to D <= 3; exact sums used");
        result.values = detail::gauss_exact(src, tgt, w, sigma2);
      } else {
        result.values = detail::gauss_fgt(src, tgt, w, sigma2, plan, result);
      }
      break;
  }
  return result;
}

inline Matrix gauss_transform(const PointSet& sources, const PointSet& targets, const Matrix& weights, double sigma2,
                              const GaussTransformPlan& plan) {
  return gauss_transform_detailed(sources, targets, weights, sigma2, plan).values;
}

/// Expansion vs. truncated evaluation: narrow Gaussians (relative to the
/// data extent) are handled by the truncated grid.
inline GaussMode truncation_switch(double sigma2, double data_scale, const GaussTransformPlan& plan) {
  if (std::sqrt(sigma2) < plan.switch_fraction * data_scale) return GaussMode::kTruncated;
  return GaussMode::kFgt;
}

/// E-step products through Gaussian sums: with K the M x N affinity matrix,
/// a = 1 ./ (K^T 1 + c), P^T 1 = 1 - c a, P 1 = K a, P X = K (a .* X).
///
/// Data points whose denominator is too small to be trusted under the
/// plan's error envelope (far from every centroid with little outlier mass)
/// are evaluated directly, column by column.
inline PosteriorStats posterior_products_fast(const PointSet& x, const PointSet& t_y, const MixtureParams& params,
                                              const GaussTransformPlan& plan) {
  require_same_dim(x, t_y);
  const Index n_count = x.count(), m_count = t_y.count(), dim = x.dim();
  const double c = outlier_constant(params, m_count, n_count, dim);
  const detail::ColumnNormalizer norm(params, m_count, n_count, dim);

  PosteriorStats stats;
  const GaussTransformResult first =
      gauss_transform_detailed(t_y, x, Matrix::Ones(m_count, 1), params.sigma2, plan);
  if (first.used == GaussMode::kExact) {
    PosteriorStats exact = compute_posteriors(x, t_y, params);
    exact.warnings.insert(exact.warnings.begin(), first.warnings.begin(), first.warnings.end());
    return exact;
  }
  for (const auto& msg : first.warnings) stats.warnings.push_back(msg);
  const Vector kt1 = first.values.col(0);

  const double envelope = plan.epsilon * static_cast<double>(m_count);
  const double trusted = std::max(1e3 * envelope, 1e-250);

  Vector a(n_count);
  std::vector<Index> direct;
  for (Index n = 0; n < n_count; ++n) {
    const double den = kt1[n] + c;
    if (den >= trusted) {
      a[n] = 1.0 / den;
    } else {
      a[n] = 0.0;
      direct.push_back(n);
    }
  }
  stats.pt1 = (Vector::Ones(n_count) - c * a);

  Matrix weights(n_count, dim + 1);
  weights.col(0) = a;
  weights.rightCols(dim) = a.asDiagonal() * x.matrix();
  const GaussTransformResult second = gauss_transform_detailed(x, t_y, weights, params.sigma2, plan);
  for (const auto& msg : second.warnings) stats.warnings.push_back(msg);
  stats.p1 = second.values.col(0);
  stats.px = second.values.rightCols(dim);

  double nll = 0.0;
  for (Index n = 0; n < n_count; ++n) {
    if (a[n] > 0.0) nll -= norm.log_density_offset + std::log(kt1[n] + c);
  }
  if (!direct.empty()) {
    const detail::RowMajorMatrix xr = x.matrix();
    detail::ColumnScratch scratch;
    for (Index n : direct) {
      stats.pt1[n] = 0.0;
      nll += detail::accumulate_column(norm, t_y.matrix(), xr.row(n).data(), dim, n, scratch, stats);
    }
  }
  stats.np = stats.pt1.sum();
  stats.neg_log_likelihood = nll;
  return stats;
}

// --------------------------------------------------------------- low rank

/// Leading eigenpairs of a symmetric PSD kernel: G ~ Q diag(lambda) Q^T.
struct LowRankKernel {
  Matrix q;
  Vector lambda;

  Index rank() const noexcept { return lambda.size(); }
  Matrix reconstruct() const { return q * lambda.asDiagonal() * q.transpose(); }
  /// (Q Lambda Q^T) * v
  Matrix apply(const Matrix& v) const { return q * (lambda.asDiagonal() * (q.transpose() * v)); }
};

struct EigenOptions {
  double tol = 1e-9;
  Index block = 16;
  std::uint64_t seed = 0x5eedULL;
};

namespace detail {

inline Matrix orthonormalize(const Matrix& v) {
  Eigen::HouseholderQR<Matrix> qr(v);
  return qr.householderQ() * Matrix::Identity(v.rows(), v.cols());
}

}  // namespace detail

/// k largest eigenpairs of a symmetric positive semidefinite operator given
/// by `apply(V) = G V`. Block power (subspace) iteration on k plus guard
/// vectors with a Rayleigh-Ritz extraction every step; the leading pairs that
/// meet |G q - lambda q| <= tol * lambda_1 are soft-locked (kept in the block,
/// excluded from the convergence count once they pass). When the block would
/// span at least half of the space the full space is resolved exactly.
template <typename ApplyFn>
LowRankKernel topk_eigs_operator(ApplyFn&& apply, Index m, Index k, const EigenOptions& options = {}) {
  if (k < 1 || k > m) throw Error(ErrorCode::kInvalidArgument, "eigenpair count must satisfy 1 <= k <= M");
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal;

  const Index guard = std::max<Index>(options.block, k / 4);
  Index b = std::min(m, k + guard);
  if (2 * b >= m) b = m;
  Matrix v(m, b);
  for (Index j = 0; j < b; ++j)
    for (Index i = 0; i < m; ++i) v(i, j) = normal(rng);

  const Index max_iters = 10 * m;
  Vector theta;
  Matrix ritz;
  for (Index iter = 0;; ++iter) {
    v = detail::orthonormalize(v);
    const Matrix z = apply(v);
    Matrix h = v.transpose() * z;
    h = 0.5 * (h + h.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(h);
    theta = eig.eigenvalues().reverse();
    const Matrix s = eig.eigenvectors().rowwise().reverse();
    ritz = v * s;
    const Matrix gritz = z * s;
    if (b == m) break;

    Index converged = 0;
    const double scale = std::max(theta[0], 0.0);
    while (converged < k &&
           (gritz.col(converged) - theta[converged] * ritz.col(converged)).norm() <= options.tol * scale) {
      ++converged;
    }
    if (converged == k) break;
    if (iter + 1 >= max_iters) {
      throw Error(ErrorCode::kNotConverged, "eigenpair iteration stalled after " + std::to_string(converged) +
                                                " of " + std::to_string(k) + " pairs converged");
    }
    v = gritz;
  }

  // Numerically zero eigenvalues carry no direction worth keeping.
  const double floor = 64.0 * std::numeric_limits<double>::epsilon() * std::max(theta[0], 0.0);
  for (Index j = 0; j < k; ++j) {
    if (!(theta[j] > floor)) {
      throw Error(ErrorCode::kNumerical, "kernel has only " + std::to_string(j) + " positive eigenvalues; requested " +
                                             std::to_string(k));
    }
  }
  return LowRankKernel{ritz.leftCols(k), theta.head(k)};
}

inline LowRankKernel topk_eigs(const KernelMatrix& g, Index k, double tol = 1e-9) {
  EigenOptions options;
  options.tol = tol;
  return topk_eigs_operator([&](const Matrix& v) -> Matrix { return g.g * v; }, g.size(), k, options);
}

/// Solves (Q Lambda Q^T + ls d(P1)^-1) W = rhs through the Woodbury identity
/// with an inner K x K system. Only d(P1) rhs is ever formed, so rows with
/// p1 = 0 follow the scaled convention (their coefficients vanish).
inline Matrix woodbury_solve_scaled(const LowRankKernel& lr, const Vector& p1, double lam_sigma2,
                                    const Matrix& scaled_rhs) {
  if (!(lam_sigma2 > 0.0)) throw Error(ErrorCode::kInvalidArgument, "lambda * sigma2 must be positive");
  if (p1.size() != lr.q.rows() || scaled_rhs.rows() != lr.q.rows()) {
    throw Error(ErrorCode::kDimensionMismatch, "low-rank kernel, p1 and rhs sizes disagree");
  }
  if ((p1.array() < 0.0).any()) throw Error(ErrorCode::kInvalidArgument, "p1 entries must be non-negative");
  const double inv = 1.0 / lam_sigma2;
  const Matrix dq = p1.asDiagonal() * lr.q;
  Matrix inner = lr.q.transpose() * dq * inv;
  inner.diagonal() += lr.lambda.cwiseInverse();
  Eigen::LDLT<Matrix> ldlt(inner);
  const double rcond = ldlt.rcond();
  if (ldlt.info() != Eigen::Success || !(rcond > 1e-15)) {
    throw Error(ErrorCode::kNumerical, "Woodbury inner system singular (rcond " + std::to_string(rcond) + ")");
  }
  const Matrix correction = dq * ldlt.solve(lr.q.transpose() * scaled_rhs);
  return inv * scaled_rhs - (inv * inv) * correction;
}

/// (Q Lambda Q^T + ls d(P1)^-1)^-1 rhs for an unscaled right-hand side.
inline Matrix woodbury_solve(const LowRankKernel& lr, const Vector& p1, double lam_sigma2, const Matrix& rhs) {
  if (rhs.rows() != p1.size()) throw Error(ErrorCode::kDimensionMismatch, "rhs and p1 sizes disagree");
  return woodbury_solve_scaled(lr, p1, lam_sigma2, p1.asDiagonal() * rhs);
}

}  // namespace cpd
