#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nmqsd/experiment.hpp"

namespace fs = std::filesystem;
using namespace nmqsd;

namespace {

enum Exit { kOk = 0, kConfig = 2, kNumerical = 3, kValidation = 4 };

struct Common {
  std::string config;
  std::string out;
  long long seed = -1;
  std::string engines;
  int workers = 0;
};

ExperimentConfig load(const Common& c, const std::string& preset = "") {
  ExperimentConfig cfg;
  if (!c.config.empty()) {
    cfg = ExperimentConfig::from_file(c.config);
  } else {
    nlohmann::json j = nlohmann::json::object();
    if (!preset.empty()) j["preset"] = preset;
    cfg = ExperimentConfig::from_json(j);
  }
  if (c.seed >= 0) cfg.master_seed = static_cast<std::uint64_t>(c.seed);
  if (!c.engines.empty()) {
    cfg.engines.clear();
    std::stringstream ss(c.engines);
    std::string name;
    while (std::getline(ss, name, ','))
      if (!name.empty()) cfg.engines.push_back(engine_from_string(name));
  }
  if (c.workers > 0) cfg.workers = c.workers;
  cfg.validate();
  return cfg;
}

void write_diagnostic(const std::string& dir, const std::string& what) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream(fs::path(dir) / "error.txt") << what << "\n";
}

void print_compare(const std::string& label, const CompareReport& r) {
  std::printf("%s max_trace_distance=%.6e tol=%.3g %s\n", label.c_str(), r.max_distance, r.tolerance,
              r.pass ? "PASS" : "FAIL");
}

std::vector<std::string> csv_files(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(fs::relative(e.path(), dir).string());
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Non-Markovian qubit dynamics from an exact hierarchy master equation and QSD trajectories"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON experiment config");
    sub->add_option("--out", common.out, "output directory");
    sub->add_option("--seed", common.seed, "QSD master seed");
    sub->add_option("--engines", common.engines, "comma-separated engines (master,qsd,pseudomode,finite_bath,lindblad)");
    sub->add_option("--workers", common.workers, "worker budget (default from NMQSD_WORKERS)");
  };

  std::string preset;
  auto* run = app.add_subcommand("run", "run the configured engines and write CSVs plus a manifest");
  add_common(run);
  run->add_option("--preset", preset, "figure preset (see `presets`)");

  std::vector<std::string> cmp_paths;
  double cmp_tol = -1.0;
  auto* cmp = app.add_subcommand("compare", "trace distance between two runs (CSV files or run directories), "
                                            "or between the engines of a config");
  add_common(cmp);
  cmp->add_option("paths", cmp_paths, "two CSV files or two run directories")->expected(0, 2);
  cmp->add_option("--tol", cmp_tol, "pass tolerance (default: config or 1e-3)");

  std::string axis;
  std::vector<double> values;
  auto* sweep = app.add_subcommand("sweep", "convergence table along one axis");
  add_common(sweep);
  sweep->add_option("--axis", axis, "dt, n_traj, gamma or K_modes")->required();
  sweep->add_option("--values", values, "values along the axis")->required()->delimiter(',');

  auto* validate = app.add_subcommand("validate", "hierarchy invariants, Novikov residual and state logs");
  add_common(validate);

  auto* list = app.add_subcommand("presets", "list the figure presets");

  CLI11_PARSE(app, argc, argv);

  try {
    if (list->parsed()) {
      for (const auto& p : presets()) {
        std::printf("%-6s N=%d state=%-9s gamma=", p.name.c_str(), p.n_qubits, p.state.c_str());
        for (size_t k = 0; k < p.gammas.size(); ++k) std::printf("%s%g", k ? "," : "", p.gammas[k]);
        std::printf("  %s\n", p.description.c_str());
      }
      return kOk;
    }

    if (run->parsed()) {
      if (!preset.empty() && !common.config.empty()) throw ConfigError("use either --preset or --config");
      const ExperimentConfig cfg = load(common, preset);
      const std::string dir = common.out.empty() ? "nmqsd_out" : common.out;
      try {
        const RunResult res = run_experiment(cfg);
        write_run(cfg, res, dir);
        for (const auto& r : res.runs)
          std::printf("%s gamma=%g points=%zu min_eig=%.3e trace_defect=%.3e (%.1f s)\n", to_string(r.engine).c_str(),
                      r.gamma, r.series.t.size(), r.series.log.min_eigenvalue, r.series.log.max_trace_defect,
                      r.seconds);
        std::printf("wrote %s (config %s)\n", dir.c_str(), cfg.hash().c_str());
      } catch (const NumericalError& e) {
        write_diagnostic(dir, std::string("numerical failure: ") + e.what() + "\nconfig hash: " + cfg.hash());
        throw;
      }
      return kOk;
    }

    if (cmp->parsed()) {
      if (cmp_paths.size() == 2) {
        const double tol = cmp_tol > 0 ? cmp_tol : 1e-3;
        const bool dirs = fs::is_directory(cmp_paths[0]) && fs::is_directory(cmp_paths[1]);
        bool pass = true;
        if (dirs) {
          int matched = 0;
          for (const auto& f : csv_files(cmp_paths[0])) {
            if (!fs::exists(fs::path(cmp_paths[1]) / f)) continue;
            const auto r = compare_series(read_series_csv((fs::path(cmp_paths[0]) / f).string()),
                                          read_series_csv((fs::path(cmp_paths[1]) / f).string()), tol);
            print_compare(f, r);
            pass = pass && r.pass;
            ++matched;
          }
          if (matched == 0) throw ConfigError("compare: no common CSV files");
        } else {
          const auto r = compare_series(read_series_csv(cmp_paths[0]), read_series_csv(cmp_paths[1]), tol);
          for (size_t i = 0; i < r.t.size(); ++i) std::printf("%.6f %.6e\n", r.t[i], r.distance[i]);
          print_compare(cmp_paths[0] + " vs " + cmp_paths[1], r);
          pass = r.pass;
        }
        return pass ? kOk : kValidation;
      }
      if (common.config.empty()) throw ConfigError("compare: give two paths or --config");
      const ExperimentConfig cfg = load(common);
      if (cfg.engines.size() < 2) throw ConfigError("compare: the config needs at least two engines");
      const double tol = cmp_tol > 0 ? cmp_tol : cfg.compare_tolerance;
      const RunResult res = run_experiment(cfg);
      if (!common.out.empty()) write_run(cfg, res, common.out);
      bool pass = true;
      for (double g : cfg.gammas) {
        const EngineRun* ref = res.find(cfg.engines.front(), g);
        for (size_t k = 1; k < cfg.engines.size(); ++k) {
          const EngineRun* other = res.find(cfg.engines[k], g);
          const auto r = compare_series(ref->series, other->series, tol);
          char label[128];
          std::snprintf(label, sizeof label, "gamma=%g %s vs %s", g, to_string(ref->engine).c_str(),
                        to_string(other->engine).c_str());
          print_compare(label, r);
          pass = pass && r.pass;
        }
      }
      return pass ? kOk : kValidation;
    }

    if (sweep->parsed()) {
      const ExperimentConfig cfg = load(common);
      const SweepResult s = run_sweep(cfg, axis, values);
      std::ostringstream table;
      table << axis << "," << "metric,order\n";
      for (const auto& r : s.rows) {
        char line[128];
        std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g\n", r.value, r.metric, r.order);
        table << line;
      }
      std::printf("# metric: %s\n%s# fitted log-log slope: %.4f\n", s.metric.c_str(), table.str().c_str(),
                  s.fitted_slope);
      if (!common.out.empty()) {
        fs::create_directories(common.out);
        std::ofstream(fs::path(common.out) / ("sweep_" + axis + ".csv")) << table.str();
      }
      return kOk;
    }

    if (validate->parsed()) {
      const ExperimentConfig cfg = load(common);
      const ValidationReport rep = validate_experiment(cfg);
      std::fputs(rep.text().c_str(), stdout);
      if (!common.out.empty()) {
        fs::create_directories(common.out);
        std::ofstream(fs::path(common.out) / "validation.txt") << rep.text();
      }
      return rep.pass() ? kOk : kValidation;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kConfig;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kNumerical;
  }
  return kOk;
}
