#pragma once

// Config-driven runs of the engines, cross-engine comparison, convergence
// sweeps and invariant validation. Configs are JSON documents; unknown keys
// are rejected with the offending path.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmqsd/hierarchy.hpp"
#include "nmqsd/master.hpp"

namespace nmqsd {

enum class Engine { master, qsd, pseudomode, finite_bath, lindblad };

std::string to_string(Engine e);
Engine engine_from_string(const std::string& s);

/// Named pure states: ground, excited (all qubits up), ghz, w, wbar,
/// bell_phi0 ((|11>+|00>)|0..>/sqrt2), bell_psi0 ((|10>+|01>)|0..>/sqrt2).
Vec named_state(const std::string& name, int n_qubits);
std::vector<std::string> named_state_list();

struct Preset {
  std::string name;
  std::string description;
  int n_qubits = 3;
  std::string state;
  std::vector<double> gammas;
};

/// fig1a..fig1d (both gammas each) and fig2a..fig2d.
const std::vector<Preset>& presets();
const Preset& find_preset(const std::string& name);

struct ExperimentConfig {
  std::string preset;
  QubitSystemSpec spec = QubitSystemSpec::uniform(3);
  std::vector<double> gammas{0.4};
  std::string state_name = "ghz";
  Vec psi0;  // resolved, normalized

  double dt = 0.005;
  double t_max = 10.0;
  int output_stride = 10;
  std::vector<Engine> engines{Engine::master, Engine::pseudomode};

  // QSD
  long n_traj = 1000;
  std::uint64_t master_seed = 1;
  double qsd_dt = 0.05;
  int qsd_refine = 5;
  int qsd_chunk = 50;
  double norm_cap = 0.0;
  bool exclude_flagged = false;

  int fock_cutoff = 5;

  // finite bath
  int bath_modes = 120;
  int excitation_cap = 3;
  double window_half_width = 0.0;  // 0: default rule

  ObarClosure closure = ObarClosure::automatic;
  Storage storage = Storage::graded;
  double grading_perturbation = 0.0;

  bool rho_entries = false;
  double compare_tolerance = 1e-3;
  long novikov_traj = 2000;
  int workers = 1;

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig from_file(const std::string& path);
  nlohmann::json to_json() const;
  /// FNV-1a of the canonical JSON dump, hex.
  std::string hash() const;
  void validate() const;
  TimeGrid grid() const { return TimeGrid::from_t_max(dt, t_max); }
};

/// Default worker budget from NMQSD_WORKERS (1 when unset or invalid).
int default_workers();

struct EngineRun {
  Engine engine = Engine::master;
  double gamma = 0.0;
  StateSeries series;
  std::vector<double> trace_std_error;  // QSD only
  long n_traj = 0;
  long flagged = 0;
  double seconds = 0.0;
};

struct RunResult {
  std::vector<EngineRun> runs;
  const EngineRun* find(Engine e, double gamma) const;
};

RunResult run_experiment(const ExperimentConfig& cfg);

/// CSV columns: t, [rho_<r><c>_re, rho_<r><c>_im ...], p_<bits> ..., c12, c13, c23 (pairs
/// present for the system size), trace, min_eigenvalue, [trace_se for QSD].
std::vector<std::string> csv_header(int n_qubits, bool rho_entries, bool qsd);
void write_series_csv(const std::string& path, const EngineRun& run, int n_qubits, bool rho_entries);
/// Reads a CSV written with rho entries back into a series.
StateSeries read_series_csv(const std::string& path);

/// Per-engine CSVs under dir/gamma_<g>/ and dir/manifest.json.
void write_run(const ExperimentConfig& cfg, const RunResult& res, const std::string& dir);

struct CompareReport {
  std::vector<double> t;
  std::vector<double> distance;
  double max_distance = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// Trace distance on the common output times (matched to 1e-9).
CompareReport compare_series(const StateSeries& a, const StateSeries& b, double tolerance);

struct SweepRow {
  double value = 0.0;
  double metric = 0.0;
  double order = 0.0;  // local observed order (dt) or slope to the previous row; NaN for the first row
};

struct SweepResult {
  std::string axis;
  std::string metric;
  std::vector<SweepRow> rows;
  double fitted_slope = 0.0;  // least-squares slope of log(metric) vs log(value)
};

/// axis: dt (error vs reference), n_traj (QSD vs master), gamma (master vs
/// Lindblad), K_modes (finite bath vs pseudomode). Uses the first gamma.
SweepResult run_sweep(const ExperimentConfig& cfg, const std::string& axis, const std::vector<double>& values);

struct ValidationItem {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string note;
};

struct ValidationReport {
  std::vector<ValidationItem> items;
  bool pass() const;
  std::string text() const;
};

/// Forbidden products, grading defects and boundaries along the hierarchy run,
/// Novikov residual, and the invariant logs of a master run.
ValidationReport validate_experiment(const ExperimentConfig& cfg);

}  // namespace nmqsd
