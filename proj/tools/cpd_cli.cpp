// Command-line front end: register, synth, bench, eval.

#include <cpd/cpd.hpp>

#include <CLI11.hpp>

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void write_json(const cpd::Json& j, const std::string& path) {
  const std::string text = j.dump(2) + "\n";
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    cpd::write_text_file(path, text);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic point set registration"};
  app.require_subcommand(1);

  // register
  auto* reg = app.add_subcommand("register", "register model Y onto data X");
  std::string method = "rigid", fast = "exact", out_report = "-", x_path, y_path;
  cpd::RegistrationConfig config;
  bool fix_scale = false;
  reg->add_option("--method", method, "rigid | affine | nonrigid | icp")->capture_default_str();
  reg->add_option("--w", config.w, "outlier weight in [0, 1)")->capture_default_str();
  reg->add_option("--lambda", config.lambda, "non-rigid regularization weight")->capture_default_str();
  reg->add_option("--beta", config.beta, "non-rigid kernel width")->capture_default_str();
  reg->add_option("--tol", config.tol, "relative sigma2 change to stop")->capture_default_str();
  reg->add_option("--max-iters", config.max_iters, "EM iteration cap")->capture_default_str();
  reg->add_option("--fast", fast, "exact | fgt | auto")->capture_default_str();
  reg->add_option("--lowrank", config.lowrank, "kernel rank (0 = automatic)")->capture_default_str();
  reg->add_flag("--fix-scale", fix_scale, "rigid: keep s = 1");
  reg->add_option("--seed", config.seed, "seed for randomized internals")->capture_default_str();
  reg->add_option("--out", out_report, "report path ('-' for stdout)")->capture_default_str();
  reg->add_option("X", x_path, "data point file")->required();
  reg->add_option("Y", y_path, "model point file")->required();

  // synth
  auto* syn = app.add_subcommand("synth", "generate a degraded pair with ground truth");
  std::string kind = "rigid", missing, base_path = "fish", prefix = "pair";
  double rotation = -1.0;
  cpd::DegradationSpec spec;
  syn->add_option("--kind", kind, "rigid | affine | nonrigid")->capture_default_str();
  syn->add_option("--deform", spec.deform, "deformation level")->capture_default_str();
  syn->add_option("--noise", spec.noise, "noise std")->capture_default_str();
  syn->add_option("--outliers", spec.outliers, "outlier count")->capture_default_str();
  syn->add_option("--missing", missing, "<set>:<axis>:<lo>:<hi>, set = x | y | both");
  syn->add_option("--rotation", rotation, "rotation in degrees (default by kind)");
  syn->add_option("--scale", spec.scale, "scale of X relative to Y")->capture_default_str();
  syn->add_option("--seed", spec.seed, "generator seed")->capture_default_str();
  syn->add_option("--base", base_path, "point file, or fish / bunny")->capture_default_str();
  syn->add_option("--out-prefix", prefix, "writes P_x.txt, P_y.txt, P_truth.json")->capture_default_str();

  // bench
  auto* ben = app.add_subcommand("bench", "run a degradation sweep");
  std::string grid_path, methods = "rigid,icp", out_dir = "bench_out";
  int trials = 25;
  ben->add_option("--grid", grid_path, "grid JSON file")->required();
  ben->add_option("--methods", methods, "comma-separated: rigid, affine, nonrigid, icp")->capture_default_str();
  ben->add_option("--trials", trials, "trials per cell")->capture_default_str();
  ben->add_option("--out", out_dir, "output directory")->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "recompute metrics of a report against ground truth");
  std::string report_path, truth_path;
  ev->add_option("--report", report_path, "report JSON")->required();
  ev->add_option("--truth", truth_path, "ground-truth JSON")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*reg) {
      config.fast = cpd::acceleration_from_string(fast);
      config.estimate_scale = !fix_scale;
      const cpd::PointSet x = cpd::load_pointset(x_path);
      const cpd::PointSet y = cpd::load_pointset(y_path);
      const cpd::RegistrationReport rep = cpd::run_method(method, x, y, config);
      write_json(cpd::to_json(rep), out_report);
      std::cerr << method << ": " << rep.iterations << " iterations, sigma2 " << rep.sigma2
                << (rep.converged ? "" : " (not converged)") << '\n';
      for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
    } else if (*syn) {
      if (!missing.empty()) spec.missing = cpd::parse_missing(missing);
      if (rotation >= 0.0) spec.rotation_deg = rotation;
      const cpd::PointSet base = (base_path == "fish" || base_path == "bunny") ? cpd::builtin_shape(base_path)
                                                                              : cpd::load_pointset(base_path);
      const cpd::SyntheticPair pair = cpd::synth_pair(spec, base, cpd::transform_kind_from_string(kind));
      cpd::save_pointset(pair.x, prefix + "_x.txt");
      cpd::save_pointset(pair.y, prefix + "_y.txt");
      cpd::Json truth = cpd::to_json(pair.truth);
      truth["spec"] = cpd::to_json(spec);
      write_json(truth, prefix + "_truth.json");
      std::cerr << "x: " << pair.x.count() << " points, y: " << pair.y.count() << " points\n";
    } else if (*ben) {
      const cpd::BenchmarkGrid grid = cpd::grid_from_json(cpd::Json::parse(cpd::read_text_file(grid_path)));
      const cpd::BenchmarkResult res = cpd::run_benchmark(grid, split_list(methods), trials);
      cpd::write_benchmark(res, out_dir);
      const std::string metric = grid.series_metric();
      for (const auto& c : res.cells) {
        const auto it = c.summary.find(metric);
        std::cout << c.method << " level " << c.level << ": " << metric << " "
                  << (it == c.summary.end() ? std::string("n/a") : std::to_string(it->second.mean))
                  << " (failures " << c.failures << ")\n";
      }
    } else if (*ev) {
      cpd::RegistrationReport rep = cpd::report_from_json(cpd::Json::parse(cpd::read_text_file(report_path)));
      const cpd::GroundTruth truth = cpd::ground_truth_from_json(cpd::Json::parse(cpd::read_text_file(truth_path)));
      rep.metrics = cpd::evaluate(rep, truth);
      cpd::Json j = rep.metrics;
      std::cout << j.dump(2) << '\n';
    }
  } catch (const cpd::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const cpd::Json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
