#pragma once

// Seeded degradation sweeps: every (level, method) cell runs the same
// `trials` synthetic pairs and aggregates the metrics.

#include <cpd/icp.hpp>
#include <cpd/io.hpp>
#include <cpd/metrics.hpp>
#include <cpd/nonrigid.hpp>
#include <cpd/rigid.hpp>
#include <cpd/synth.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <string>
#include <vector>

namespace cpd {

struct BenchmarkGrid {
  /// "fish", "bunny" or a point file.
  std::string base = "fish";
  Index base_count = 0;
  std::uint64_t base_seed = 7;
  TransformKind kind = TransformKind::kRigid;
  /// Swept field: noise, outliers, outlier_ratio (outliers = ratio * base
  /// count), deform or rotation_deg.
  std::string axis = "noise";
  std::vector<double> levels;
  DegradationSpec spec;
  RegistrationConfig config;
  /// Metric of the plot series; empty picks rotation_error for rigid pairs
  /// and correspondence_mse_norm otherwise.
  std::string metric;

  std::string series_metric() const {
    if (!metric.empty()) return metric;
    return kind == TransformKind::kRigid ? "rotation_error" : "correspondence_mse_norm";
  }
};

struct MetricSummary {
  double mean = 0.0;
  double std_dev = 0.0;
  Index count = 0;
};

struct BenchmarkCell {
  double level = 0.0;
  std::string method;
  int trials = 0;
  int failures = 0;
  std::vector<std::string> errors;
  std::map<std::string, std::vector<double>> samples;
  std::map<std::string, MetricSummary> summary;
};

struct BenchmarkResult {
  BenchmarkGrid grid;
  std::vector<std::string> methods;
  std::vector<BenchmarkCell> cells;

  const BenchmarkCell& cell(double level, const std::string& method) const {
    for (const auto& c : cells)
      if (c.level == level && c.method == method) return c;
    throw Error(ErrorCode::kInvalidArgument, "no benchmark cell for " + method);
  }
};

inline DegradationSpec spec_at_level(const BenchmarkGrid& grid, double level, Index base_count) {
  DegradationSpec s = grid.spec;
  if (grid.axis == "noise") {
    s.noise = level;
  } else if (grid.axis == "outliers") {
    s.outliers = static_cast<Index>(std::llround(level));
  } else if (grid.axis == "outlier_ratio") {
    s.outliers = static_cast<Index>(std::llround(level * static_cast<double>(base_count)));
  } else if (grid.axis == "deform") {
    s.deform = level;
  } else if (grid.axis == "rotation_deg") {
    s.rotation_deg = level;
  } else {
    throw Error(ErrorCode::kInvalidArgument, "unknown benchmark axis '" + grid.axis + "'");
  }
  return s;
}

inline RegistrationReport run_method(const std::string& method, const PointSet& x, const PointSet& y,
                                     const RegistrationConfig& config) {
  if (method == "rigid") return register_rigid(x, y, config);
  if (method == "affine") return register_affine(x, y, config);
  if (method == "nonrigid") return register_nonrigid(x, y, config);
  if (method == "icp") return icp_baseline(x, y, config);
  throw Error(ErrorCode::kInvalidArgument, "unknown method '" + method + "'");
}

/// Largest relative increase of the negative log-likelihood between
/// consecutive iterations (0 when it never increases).
inline double max_nll_increase(const RegistrationReport& report) {
  double worst = 0.0;
  for (size_t k = 1; k < report.diagnostics.size(); ++k) {
    const double prev = report.diagnostics[k - 1].neg_log_likelihood;
    const double cur = report.diagnostics[k].neg_log_likelihood;
    worst = std::max(worst, (cur - prev) / std::max(1.0, std::abs(prev)));
  }
  return worst;
}

inline MetricSummary summarize(const std::vector<double>& v) {
  MetricSummary s;
  s.count = static_cast<Index>(v.size());
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std_dev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return s;
}

inline PointSet load_base(const BenchmarkGrid& grid) {
  if (grid.base == "fish" || grid.base == "bunny") return builtin_shape(grid.base, grid.base_count, grid.base_seed);
  return load_pointset(grid.base);
}

/// Trial t of every cell uses seed grid.spec.seed + t, so methods are
/// compared on identical pairs. Failed runs are recorded per cell.
inline BenchmarkResult run_benchmark(const BenchmarkGrid& grid, const std::vector<std::string>& methods, int trials) {
  if (trials < 1) throw Error(ErrorCode::kInvalidArgument, "trials must be >= 1");
  if (grid.levels.empty()) throw Error(ErrorCode::kInvalidArgument, "benchmark grid has no levels");
  if (methods.empty()) throw Error(ErrorCode::kInvalidArgument, "no methods given");
  grid.config.validate();
  const PointSet base = load_base(grid);
  BenchmarkResult result{grid, methods, {}};
  for (double level : grid.levels) {
    std::vector<BenchmarkCell> row(methods.size());
    for (size_t k = 0; k < methods.size(); ++k) {
      row[k].level = level;
      row[k].method = methods[k];
      row[k].trials = trials;
    }
    for (int t = 0; t < trials; ++t) {
      DegradationSpec spec = spec_at_level(grid, level, base.count());
      spec.seed = grid.spec.seed + static_cast<std::uint64_t>(t);
      std::optional<SyntheticPair> pair;
      try {
        pair = synth_pair(spec, base, grid.kind);
      } catch (const Error& e) {
        for (auto& c : row) {
          ++c.failures;
          c.errors.emplace_back(e.what());
        }
        continue;
      }
      for (size_t k = 0; k < methods.size(); ++k) {
        BenchmarkCell& c = row[k];
        try {
          RegistrationConfig cfg = grid.config;
          cfg.seed = spec.seed;
          const RegistrationReport rep = run_method(methods[k], pair->x, pair->y, cfg);
          for (const auto& [key, v] : evaluate(rep, pair->truth)) c.samples[key].push_back(v);
          c.samples["iterations"].push_back(rep.iterations);
          c.samples["seconds"].push_back(rep.seconds);
          c.samples["converged"].push_back(rep.converged ? 1.0 : 0.0);
          if (methods[k] == "rigid" || methods[k] == "affine") {
            c.samples["nll_max_rel_increase"].push_back(max_nll_increase(rep));
          }
        } catch (const Error& e) {
          ++c.failures;
          c.errors.emplace_back(e.what());
        }
      }
    }
    for (auto& c : row) {
      for (const auto& [key, v] : c.samples) c.summary[key] = summarize(v);
      result.cells.push_back(std::move(c));
    }
  }
  return result;
}

// ------------------------------------------------------------------ output

inline BenchmarkGrid grid_from_json(const Json& j) {
  BenchmarkGrid g;
  g.base = j.value("base", g.base);
  g.base_count = j.value("base_count", g.base_count);
  g.base_seed = j.value("base_seed", g.base_seed);
  g.kind = transform_kind_from_string(j.value("kind", std::string("rigid")));
  g.axis = j.value("axis", g.axis);
  g.levels = j.at("levels").get<std::vector<double>>();
  if (j.contains("spec")) g.spec = degradation_from_json(j.at("spec"));
  if (j.contains("config")) g.config = config_from_json(j.at("config"));
  g.metric = j.value("metric", g.metric);
  return g;
}

inline Json to_json(const BenchmarkGrid& g) {
  return {{"base", g.base},
          {"base_count", g.base_count},
          {"base_seed", g.base_seed},
          {"kind", to_string(g.kind)},
          {"axis", g.axis},
          {"levels", g.levels},
          {"spec", to_json(g.spec)},
          {"config", to_json(g.config)},
          {"metric", g.series_metric()}};
}

inline Json to_json(const BenchmarkResult& r) {
  Json cells = Json::array();
  for (const auto& c : r.cells) {
    Json metrics = Json::object();
    for (const auto& [key, s] : c.summary) metrics[key] = {{"mean", s.mean}, {"std", s.std_dev}, {"n", s.count}};
    cells.push_back({{"level", c.level},
                     {"method", c.method},
                     {"trials", c.trials},
                     {"failures", c.failures},
                     {"errors", c.errors},
                     {"metrics", metrics}});
  }
  return {{"grid", to_json(r.grid)}, {"methods", r.methods}, {"cells", cells}};
}

/// Writes into `dir`:
///   table.tsv    axis level method metric n mean std failures (one row per
///                cell and metric)
///   series.tsv   method level mean std of the series metric, one block
///                per method (plot data: metric vs degradation level)
///   summary.json the same content as structured JSON
inline void write_benchmark(const BenchmarkResult& r, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path root(dir);
  {
    std::ofstream out(root / "table.tsv");
    if (!out) throw Error(ErrorCode::kIo, "cannot write table.tsv in '" + dir + "'");
    out << std::setprecision(10);
    out << "axis\tlevel\tmethod\tmetric\tn\tmean\tstd\tfailures\n";
    for (const auto& c : r.cells)
      for (const auto& [key, s] : c.summary)
        out << r.grid.axis << '\t' << c.level << '\t' << c.method << '\t' << key << '\t' << s.count << '\t' << s.mean
            << '\t' << s.std_dev << '\t' << c.failures << '\n';
  }
  {
    std::ofstream out(root / "series.tsv");
    if (!out) throw Error(ErrorCode::kIo, "cannot write series.tsv in '" + dir + "'");
    const std::string metric = r.grid.series_metric();
    out << std::setprecision(10);
    out << "# metric " << metric << " vs " << r.grid.axis << "\n";
    out << "method\tlevel\tmean\tstd\n";
    for (const auto& m : r.methods) {
      for (const auto& c : r.cells) {
        if (c.method != m) continue;
        const auto it = c.summary.find(metric);
        if (it == c.summary.end()) continue;
        out << m << '\t' << c.level << '\t' << it->second.mean << '\t' << it->second.std_dev << '\n';
      }
    }
  }
  write_text_file((root / "summary.json").string(), to_json(r).dump(2) + "\n");
}

}  // namespace cpd
