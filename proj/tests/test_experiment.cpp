#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "nmqsd/analysis.hpp"
#include "nmqsd/experiment.hpp"

using namespace nmqsd;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("nmqsd_test_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig small(const std::string& engines_json) {
  return ExperimentConfig::from_json(json::parse(R"({
    "system": {"n_qubits": 2, "j_xy": 0.1},
    "kernel": {"gamma": 0.4},
    "initial_state": "bell_phi0",
    "grid": {"dt": 0.01, "t_max": 1.0, "output_stride": 5},
    "qsd": {"n_traj": 120, "dt": 0.05},
    "output": {"rho_entries": true},
    "engines": )" + engines_json + "}"));
}

}  // namespace

TEST_SUITE("experiment") {

TEST_CASE("named states are normalized") {
  for (const auto& name : named_state_list())
    for (int n = 2; n <= 3; ++n) CHECK(named_state(name, n).norm() == doctest::Approx(1.0));
  CHECK_THROWS_AS(named_state("bell_phi0", 1), ConfigError);
  CHECK_THROWS_AS(named_state("nope", 2), ConfigError);
}

TEST_CASE("figure presets") {
  CHECK(presets().size() == 8);
  const auto& p = find_preset("fig1b");
  CHECK(p.gammas == std::vector<double>{0.4, 1.5});
  // GHZ has no pair entanglement at t = 0
  const Vec ghz = named_state(p.state, 3);
  const auto c = pairwise_concurrence_series({0.0}, {ghz * ghz.adjoint()}, {{1, 2}});
  CHECK(c[0].values[0] == doctest::Approx(0.0));
  // fig2a starts with c12 = 1, c13 = c23 = 0
  const Vec b = named_state(find_preset("fig2a").state, 3);
  const auto cs = pairwise_concurrence_series({0.0}, {b * b.adjoint()}, {{1, 2}, {1, 3}, {2, 3}});
  CHECK(cs[0].values[0] == doctest::Approx(1.0));
  CHECK(cs[1].values[0] == doctest::Approx(0.0));
  CHECK(cs[2].values[0] == doctest::Approx(0.0));
  CHECK_THROWS_AS(find_preset("fig3"), ConfigError);
}

TEST_CASE("unknown keys and bad values are rejected with their path") {
  auto message = [](const std::string& text) -> std::string {
    try {
      ExperimentConfig::from_json(json::parse(text));
    } catch (const ConfigError& e) {
      return e.what();
    }
    return "";
  };
  CHECK(message(R"({"grid": {"dtt": 0.1}})").find("grid.dtt") != std::string::npos);
  CHECK(message(R"({"colour": 1})").find("colour") != std::string::npos);
  CHECK(message(R"({"grid": {"dt": "fast"}})").find("grid.dt") != std::string::npos);
  CHECK(message(R"({"engines": []})").find("engines") != std::string::npos);
  CHECK(message(R"({"engines": ["warp"]})").find("warp") != std::string::npos);
  CHECK(message(R"({"system": {"n_qubits": 2, "omega": [1, 2, 3]}})").find("system.omega") != std::string::npos);
  CHECK(message(R"({"hierarchy": {"grading_perturbation": 1e-6}})").find("dense") != std::string::npos);
  CHECK(message(R"({"preset": "fig1a"})").empty());
}

TEST_CASE("custom amplitudes are normalized") {
  const auto cfg = ExperimentConfig::from_json(json::parse(
      R"({"system": {"n_qubits": 2}, "initial_state": {"amplitudes": {"10": 1, "01": [0, 1]}}})"));
  CHECK(cfg.psi0.norm() == doctest::Approx(1.0));
  CHECK(std::abs(cfg.psi0(1) - cplx(0, 1) / std::sqrt(2.0)) < 1e-15);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json::parse(
                      R"({"system": {"n_qubits": 2}, "initial_state": {"amplitudes": {"102": 1}}})")),
                  ConfigError);
}

TEST_CASE("config survives a JSON round trip with the same hash") {
  const auto a = ExperimentConfig::from_json(json::parse(R"({"preset": "fig2c", "qsd": {"master_seed": 77}})"));
  const auto b = ExperimentConfig::from_json(a.to_json());
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 16);
  auto c = a;
  c.master_seed = 78;
  CHECK(c.hash() != a.hash());
}

TEST_CASE("CSV header is stable") {
  const auto h = csv_header(3, false, false);
  std::string joined;
  for (const auto& x : h) joined += (joined.empty() ? "" : ",") + x;
  CHECK(joined ==
        "t,p_000,p_001,p_010,p_011,p_100,p_101,p_110,p_111,c12,c13,c23,trace,min_eigenvalue");
  const auto q = csv_header(1, true, true);
  joined.clear();
  for (const auto& x : q) joined += (joined.empty() ? "" : ",") + x;
  CHECK(joined ==
        "t,rho_0_0_re,rho_0_0_im,rho_0_1_re,rho_0_1_im,rho_1_0_re,rho_1_0_im,rho_1_1_re,rho_1_1_im,"
        "p_0,p_1,trace,min_eigenvalue,trace_se");
}

TEST_CASE("run writes CSVs and a manifest; reruns are bitwise identical") {
  const auto cfg = small(R"(["master", "pseudomode", "qsd"])");
  const fs::path d1 = scratch("run1"), d2 = scratch("run2");
  write_run(cfg, run_experiment(cfg), d1.string());
  write_run(cfg, run_experiment(cfg), d2.string());
  for (const char* f : {"gamma_0.4/master.csv", "gamma_0.4/pseudomode.csv", "gamma_0.4/qsd.csv", "manifest.json"}) {
    REQUIRE(fs::exists(d1 / f));
    CHECK(slurp(d1 / f) == slurp(d2 / f));
  }
  const json m = json::parse(slurp(d1 / "manifest.json"));
  CHECK(m["config_hash"] == cfg.hash());
  CHECK(m["files"].size() == 3);
  CHECK(m["seeds"]["master_seed"] == 1);
  // the manifest alone reproduces the run
  const auto again = ExperimentConfig::from_json(m["config"]);
  CHECK(again.hash() == cfg.hash());

  const StateSeries back = read_series_csv((d1 / "gamma_0.4/master.csv").string());
  const RunResult rerun = run_experiment(cfg);
  const auto direct = rerun.find(Engine::master, 0.4);
  REQUIRE(back.rho.size() == direct->series.rho.size());
  for (size_t i = 0; i < back.rho.size(); ++i) CHECK(back.rho[i] == direct->series.rho[i]);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("compare: self is zero, kappa = 0 engines agree to integrator accuracy") {
  const auto cfg = small(R"(["master", "pseudomode"])");
  const auto res = run_experiment(cfg);
  const auto self = compare_series(res.runs[0].series, res.runs[0].series, 0.0);
  CHECK(self.max_distance == 0.0);
  CHECK(self.pass);

  // kappa = 0: pseudomode is exact to RK4 accuracy, the Heun master carries its dt^2 error.
  auto k0 = cfg;
  k0.spec.kappa = {0.0, 0.0};
  const auto r0 = run_experiment(k0);
  const auto cmp = compare_series(r0.find(Engine::master, 0.4)->series, r0.find(Engine::pseudomode, 0.4)->series, 1e-4);
  INFO("kappa = 0 distance " << cmp.max_distance);
  CHECK(cmp.pass);
  auto k1 = k0;
  k1.dt /= 2.0;
  k1.output_stride *= 2;
  const auto r1 = run_experiment(k1);
  const auto cmp1 = compare_series(r1.find(Engine::master, 0.4)->series, r1.find(Engine::pseudomode, 0.4)->series, 1e-4);
  CHECK(cmp.max_distance / cmp1.max_distance == doctest::Approx(4.0).epsilon(0.05));

  StateSeries shifted = res.runs[0].series;
  for (auto& t : shifted.t) t += 0.5e-3;
  CHECK_THROWS_AS(compare_series(res.runs[0].series, shifted, 1e-3), ConfigError);
}

TEST_CASE("sweep over dt reports second-order convergence") {
  auto cfg = ExperimentConfig::from_json(json::parse(R"({
    "system": {"n_qubits": 1}, "kernel": {"gamma": 0.4}, "initial_state": "excited",
    "grid": {"dt": 0.02, "t_max": 5.0, "output_stride": 5}})"));
  const SweepResult s = run_sweep(cfg, "dt", {0.02, 0.01, 0.005});
  CHECK(s.rows.size() == 3);
  CHECK(std::isnan(s.rows[0].order));
  CHECK(s.rows[2].order == doctest::Approx(2.0).epsilon(0.1));
  CHECK(s.fitted_slope == doctest::Approx(2.0).epsilon(0.1));
  CHECK_THROWS_AS(run_sweep(cfg, "temperature", {1, 2}), ConfigError);
  CHECK_THROWS_AS(run_sweep(cfg, "dt", {0.01}), ConfigError);
}

TEST_CASE("validate: N = 1 passes with an empty forbidden set; corrupted hierarchy fails") {
  auto cfg = ExperimentConfig::from_json(json::parse(R"({
    "system": {"n_qubits": 1}, "kernel": {"gamma": 0.4}, "initial_state": "excited",
    "grid": {"dt": 0.01, "t_max": 2.0}, "validate": {"novikov_traj": 1000}})"));
  const auto ok = validate_experiment(cfg);
  CHECK(ok.pass());
  CHECK(ok.text().find("not applicable") != std::string::npos);

  auto bad = ExperimentConfig::from_json(json::parse(R"({
    "system": {"n_qubits": 2}, "kernel": {"gamma": 0.4}, "initial_state": "bell_phi0",
    "grid": {"dt": 0.01, "t_max": 1.0}, "validate": {"novikov_traj": 200},
    "hierarchy": {"storage": "dense", "grading_perturbation": 1e-6}})"));
  const auto rep = validate_experiment(bad);
  CHECK_FALSE(rep.pass());
}

TEST_CASE("worker budget from the environment") {
  setenv("NMQSD_WORKERS", "3", 1);
  CHECK(default_workers() == 3);
  setenv("NMQSD_WORKERS", "zero", 1);
  CHECK(default_workers() == 1);
  unsetenv("NMQSD_WORKERS");
  CHECK(default_workers() == 1);
}

}
