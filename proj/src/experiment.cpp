#include "nmqsd/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "nmqsd/analysis.hpp"
#include "nmqsd/novikov.hpp"
#include "nmqsd/oracle.hpp"
#include "nmqsd/qsd.hpp"

namespace nmqsd {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

const std::map<std::string, Engine>& engine_names() {
  static const std::map<std::string, Engine> m{{"master", Engine::master},
                                               {"qsd", Engine::qsd},
                                               {"pseudomode", Engine::pseudomode},
                                               {"finite_bath", Engine::finite_bath},
                                               {"lindblad", Engine::lindblad}};
  return m;
}

std::string bits(int index, int n) {
  std::string s(static_cast<size_t>(n), '0');
  for (int q = 0; q < n; ++q)
    if (index & (1 << (n - 1 - q))) s[static_cast<size_t>(q)] = '1';
  return s;
}

int parse_bits(const std::string& s, int n, const std::string& where) {
  if (static_cast<int>(s.size()) != n || s.find_first_not_of("01") != std::string::npos)
    throw ConfigError("config: " + where + ": basis label '" + s + "' must be " + std::to_string(n) + " binary digits");
  int idx = 0;
  for (char c : s) idx = 2 * idx + (c == '1');
  return idx;
}

void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config: " + (path.empty() ? std::string("document") : path) + " must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ConfigError("config: unknown key '" + (path.empty() ? k : path + "." + k) + "'");
}

template <class T>
T get(const json& j, const char* key, const std::string& path, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: '" + (path.empty() ? std::string(key) : path + "." + key) + "' has the wrong type");
  }
}

std::vector<double> number_or_list(const json& j, const std::string& where) {
  if (j.is_number()) return {j.get<double>()};
  if (j.is_array()) {
    std::vector<double> v;
    for (const auto& x : j) {
      if (!x.is_number()) throw ConfigError("config: " + where + " must hold numbers");
      v.push_back(x.get<double>());
    }
    return v;
  }
  throw ConfigError("config: " + where + " must be a number or a list of numbers");
}

std::vector<double> per_qubit(const json& j, int n, const std::string& where) {
  auto v = number_or_list(j, where);
  if (v.size() == 1) return std::vector<double>(static_cast<size_t>(n), v[0]);
  if (static_cast<int>(v.size()) != n) throw ConfigError("config: " + where + " needs 1 or " + std::to_string(n) + " values");
  return v;
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string gamma_dir(double g) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "gamma_%g", g);
  return buf;
}

double min_eig(const Mat& rho) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (rho + rho.adjoint()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

std::vector<std::pair<int, int>> all_pairs(int n) {
  std::vector<std::pair<int, int>> p;
  for (int a = 1; a <= n; ++a)
    for (int b = a + 1; b <= n; ++b) p.emplace_back(a, b);
  return p;
}

/// Runs fn(0..n-1) on up to `workers` threads; rethrows the first failure in index order.
void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, n));
  std::vector<std::exception_ptr> errors(static_cast<size_t>(n));
  std::atomic<int> next{0};
  auto work = [&] {
    for (int k = next++; k < n; k = next++) {
      try {
        fn(k);
      } catch (...) {
        errors[static_cast<size_t>(k)] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

HierarchyOptions hierarchy_options(const ExperimentConfig& cfg) {
  HierarchyOptions ho;
  ho.closure = cfg.closure;
  ho.storage = cfg.storage;
  ho.grading_perturbation = cfg.grading_perturbation;
  return ho;
}

StateSeries subsample(const EnsembleResult& e, int stride, std::vector<double>* trace_se) {
  StateSeries s;
  for (size_t i = 0; i < e.t.size(); i += static_cast<size_t>(stride)) {
    s.t.push_back(e.t[i]);
    s.rho.push_back(e.rho[i]);
    log_state(s.log, e.rho[i]);
    if (trace_se) trace_se->push_back(e.trace_std_error[i]);
  }
  return s;
}

EngineRun run_engine(const ExperimentConfig& cfg, Engine engine, double gamma) {
  const auto start = std::chrono::steady_clock::now();
  const BathKernel kernel = BathKernel::ornstein_uhlenbeck(gamma);
  const Mat rho0 = cfg.psi0 * cfg.psi0.adjoint();
  const TimeGrid grid = cfg.grid();
  EngineRun run;
  run.engine = engine;
  run.gamma = gamma;
  switch (engine) {
    case Engine::master: {
      MasterOptions mo;
      mo.hierarchy = hierarchy_options(cfg);
      mo.output_stride = cfg.output_stride;
      run.series = propagate_master(cfg.spec, kernel, rho0, grid, mo);
      break;
    }
    case Engine::pseudomode: {
      PseudomodeConfig pc = PseudomodeConfig::for_ou(gamma, cfg.fock_cutoff);
      run.series = pseudomode_evolve(cfg.spec, gamma, rho0, grid, pc, cfg.output_stride);
      break;
    }
    case Engine::lindblad:
      run.series = lindblad_propagate(cfg.spec, rho0, grid, cfg.output_stride);
      break;
    case Engine::finite_bath: {
      const double out_dt = cfg.dt * cfg.output_stride;
      const TimeGrid out_grid = TimeGrid::from_t_max(out_dt, grid.t_max());
      const double hw = cfg.window_half_width > 0.0 ? cfg.window_half_width
                                                    : default_mode_window(gamma, cfg.bath_modes, grid.t_max());
      const BathModeSet modes = discretize_bath_modes(kernel, cfg.bath_modes, hw, grid.t_max(), out_dt);
      FiniteBathOptions fo;
      fo.excitation_cap = cfg.excitation_cap;
      run.series = finite_bath_evolve(cfg.spec, modes, {cfg.psi0}, out_grid, fo).front();
      break;
    }
    case Engine::qsd: {
      QsdOptions qo;
      qo.n_traj = cfg.n_traj;
      qo.master_seed = cfg.master_seed;
      qo.chunk = cfg.qsd_chunk;
      qo.workers = cfg.workers;
      qo.norm_cap = cfg.norm_cap;
      qo.exclude_flagged = cfg.exclude_flagged;
      const TimeGrid qgrid = TimeGrid::from_t_max(cfg.qsd_dt, grid.t_max());
      const EnsembleResult e = run_ensemble(cfg.spec, kernel, cfg.psi0, qgrid, qo, cfg.qsd_refine);
      const double out_dt = cfg.dt * cfg.output_stride;
      const int stride = std::max(1, static_cast<int>(std::lround(out_dt / cfg.qsd_dt)));
      run.series = subsample(e, stride, &run.trace_std_error);
      run.n_traj = e.n_traj;
      run.flagged = e.flagged;
      break;
    }
  }
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (size_t k = 0; k < std::min(a.size(), b.size()); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(x.size());
  for (size_t k = 0; k < x.size(); ++k) {
    const double lx = std::log(x[k]), ly = std::log(y[k]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double den = n * sxx - sx * sx;
  return den != 0.0 ? (n * sxy - sx * sy) / den : NAN;
}

}  // namespace

// ---------------------------------------------------------------- names and presets

std::string to_string(Engine e) {
  for (const auto& [k, v] : engine_names())
    if (v == e) return k;
  return "?";
}

Engine engine_from_string(const std::string& s) {
  const auto it = engine_names().find(s);
  if (it == engine_names().end()) throw ConfigError("unknown engine '" + s + "'");
  return it->second;
}

std::vector<std::string> named_state_list() {
  return {"ground", "excited", "ghz", "w", "wbar", "bell_phi0", "bell_psi0"};
}

Vec named_state(const std::string& name, int n) {
  if (n < 1) throw ConfigError("state: n_qubits must be positive");
  const int dim = 1 << n;
  const int all = dim - 1;
  Vec v = Vec::Zero(dim);
  if (name == "ground") {
    v(0) = 1.0;
  } else if (name == "excited") {
    v(all) = 1.0;
  } else if (name == "ghz") {
    v(0) = v(all) = 1.0;
  } else if (name == "w" || name == "wbar") {
    for (int q = 0; q < n; ++q) v(name == "w" ? 1 << q : all ^ (1 << q)) = 1.0;
  } else if (name == "bell_phi0" || name == "bell_psi0") {
    if (n < 2) throw ConfigError("state: " + name + " needs at least 2 qubits");
    const int q1 = 1 << (n - 1), q2 = 1 << (n - 2);
    if (name == "bell_phi0") {
      v(0) = v(q1 | q2) = 1.0;
    } else {
      v(q1) = v(q2) = 1.0;
    }
  } else {
    throw ConfigError("state: unknown preset state '" + name + "'");
  }
  return v / v.norm();
}

const std::vector<Preset>& presets() {
  static const std::vector<Preset> p{
      {"fig1a", "c12 from |111>, gamma 0.4 and 1.5", 3, "excited", {0.4, 1.5}},
      {"fig1b", "c12 from (|111>+|000>)/sqrt2, gamma 0.4 and 1.5", 3, "ghz", {0.4, 1.5}},
      {"fig1c", "c12 from W = (|100>+|010>+|001>)/sqrt3, gamma 0.4 and 1.5", 3, "w", {0.4, 1.5}},
      {"fig1d", "c12 from (|110>+|101>+|011>)/sqrt3, gamma 0.4 and 1.5", 3, "wbar", {0.4, 1.5}},
      {"fig2a", "pair concurrences from (|11>+|00>)|0>/sqrt2, gamma 0.4", 3, "bell_phi0", {0.4}},
      {"fig2b", "pair concurrences from (|11>+|00>)|0>/sqrt2, gamma 1.5", 3, "bell_phi0", {1.5}},
      {"fig2c", "pair concurrences from (|10>+|01>)|0>/sqrt2, gamma 0.4", 3, "bell_psi0", {0.4}},
      {"fig2d", "pair concurrences from (|10>+|01>)|0>/sqrt2, gamma 1.5", 3, "bell_psi0", {1.5}},
  };
  return p;
}

const Preset& find_preset(const std::string& name) {
  for (const auto& p : presets())
    if (p.name == name) return p;
  throw ConfigError("unknown preset '" + name + "'");
}

int default_workers() {
  if (const char* env = std::getenv("NMQSD_WORKERS")) {
    char* end = nullptr;
    const long w = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && w >= 1 && w <= 1024) return static_cast<int>(w);
  }
  return 1;
}

// ---------------------------------------------------------------- config

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  check_keys(j, "", {"preset", "system", "kernel", "initial_state", "grid", "engines", "qsd", "pseudomode",
                     "finite_bath", "hierarchy", "output", "tolerances", "validate", "workers"});
  ExperimentConfig c;
  c.workers = default_workers();
  int n = 3;
  if (j.contains("preset")) {
    const Preset& p = find_preset(get<std::string>(j, "preset", "", ""));
    c.preset = p.name;
    n = p.n_qubits;
    c.state_name = p.state;
    c.gammas = p.gammas;
  }

  json sys = j.value("system", json::object());
  check_keys(sys, "system", {"n_qubits", "omega", "kappa", "j_xy"});
  n = get<int>(sys, "n_qubits", "system", n);
  if (n < 1 || n > 6) throw ConfigError("config: system.n_qubits must be in 1..6");
  c.spec = QubitSystemSpec::uniform(n);
  if (sys.contains("omega")) c.spec.omega = per_qubit(sys["omega"], n, "system.omega");
  if (sys.contains("kappa")) c.spec.kappa = per_qubit(sys["kappa"], n, "system.kappa");
  c.spec.j_xy = get<double>(sys, "j_xy", "system", 0.0);

  json ker = j.value("kernel", json::object());
  check_keys(ker, "kernel", {"type", "gamma"});
  if (get<std::string>(ker, "type", "kernel", "ou") != "ou") throw ConfigError("config: kernel.type must be 'ou'");
  if (ker.contains("gamma")) c.gammas = number_or_list(ker["gamma"], "kernel.gamma");

  if (j.contains("initial_state")) {
    const json& s = j["initial_state"];
    if (s.is_string()) {
      c.state_name = s.get<std::string>();
    } else {
      check_keys(s, "initial_state", {"amplitudes"});
      if (!s.contains("amplitudes") || !s["amplitudes"].is_object())
        throw ConfigError("config: initial_state.amplitudes must map basis labels to amplitudes");
      c.state_name = "custom";
      c.psi0 = Vec::Zero(1 << n);
      for (const auto& [label, a] : s["amplitudes"].items()) {
        const int idx = parse_bits(label, n, "initial_state.amplitudes");
        if (a.is_number()) {
          c.psi0(idx) = a.get<double>();
        } else if (a.is_array() && a.size() == 2 && a[0].is_number() && a[1].is_number()) {
          c.psi0(idx) = cplx(a[0].get<double>(), a[1].get<double>());
        } else {
          throw ConfigError("config: initial_state.amplitudes." + label + " must be a number or [re, im]");
        }
      }
      if (c.psi0.norm() == 0.0) throw ConfigError("config: initial_state has zero norm");
      c.psi0 /= c.psi0.norm();
    }
  }
  if (c.state_name != "custom") c.psi0 = named_state(c.state_name, n);

  json grid = j.value("grid", json::object());
  check_keys(grid, "grid", {"dt", "t_max", "output_stride"});
  c.dt = get<double>(grid, "dt", "grid", c.dt);
  c.t_max = get<double>(grid, "t_max", "grid", c.t_max);
  c.output_stride = get<int>(grid, "output_stride", "grid", c.output_stride);

  if (j.contains("engines")) {
    if (!j["engines"].is_array()) throw ConfigError("config: engines must be a list");
    c.engines.clear();
    for (const auto& e : j["engines"]) {
      if (!e.is_string()) throw ConfigError("config: engines must be a list of names");
      c.engines.push_back(engine_from_string(e.get<std::string>()));
    }
  }

  json q = j.value("qsd", json::object());
  check_keys(q, "qsd", {"n_traj", "master_seed", "dt", "refine", "chunk", "norm_cap", "exclude_flagged"});
  c.n_traj = get<long>(q, "n_traj", "qsd", c.n_traj);
  c.master_seed = get<std::uint64_t>(q, "master_seed", "qsd", c.master_seed);
  c.qsd_dt = get<double>(q, "dt", "qsd", c.qsd_dt);
  c.qsd_refine = get<int>(q, "refine", "qsd", c.qsd_refine);
  c.qsd_chunk = get<int>(q, "chunk", "qsd", c.qsd_chunk);
  c.norm_cap = get<double>(q, "norm_cap", "qsd", c.norm_cap);
  c.exclude_flagged = get<bool>(q, "exclude_flagged", "qsd", c.exclude_flagged);

  json pm = j.value("pseudomode", json::object());
  check_keys(pm, "pseudomode", {"fock_cutoff"});
  c.fock_cutoff = get<int>(pm, "fock_cutoff", "pseudomode", c.fock_cutoff);

  json fb = j.value("finite_bath", json::object());
  check_keys(fb, "finite_bath", {"modes", "excitation_cap", "half_width"});
  c.bath_modes = get<int>(fb, "modes", "finite_bath", c.bath_modes);
  c.excitation_cap = get<int>(fb, "excitation_cap", "finite_bath", c.excitation_cap);
  c.window_half_width = get<double>(fb, "half_width", "finite_bath", c.window_half_width);

  json h = j.value("hierarchy", json::object());
  check_keys(h, "hierarchy", {"closure", "storage", "grading_perturbation"});
  const std::string closure = get<std::string>(h, "closure", "hierarchy", "automatic");
  if (closure == "automatic") c.closure = ObarClosure::automatic;
  else if (closure == "quadrature") c.closure = ObarClosure::quadrature;
  else if (closure == "auxiliary") c.closure = ObarClosure::auxiliary;
  else throw ConfigError("config: hierarchy.closure must be automatic, quadrature or auxiliary");
  const std::string storage = get<std::string>(h, "storage", "hierarchy", "graded");
  if (storage == "graded") c.storage = Storage::graded;
  else if (storage == "dense") c.storage = Storage::dense;
  else throw ConfigError("config: hierarchy.storage must be graded or dense");
  c.grading_perturbation = get<double>(h, "grading_perturbation", "hierarchy", 0.0);

  json out = j.value("output", json::object());
  check_keys(out, "output", {"rho_entries"});
  c.rho_entries = get<bool>(out, "rho_entries", "output", c.rho_entries);

  json tol = j.value("tolerances", json::object());
  check_keys(tol, "tolerances", {"compare"});
  c.compare_tolerance = get<double>(tol, "compare", "tolerances", c.compare_tolerance);

  json val = j.value("validate", json::object());
  check_keys(val, "validate", {"novikov_traj"});
  c.novikov_traj = get<long>(val, "novikov_traj", "validate", c.novikov_traj);

  c.workers = get<int>(j, "workers", "", c.workers);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::validate() const {
  spec.validate();
  if (gammas.empty()) throw ConfigError("config: kernel.gamma is empty");
  for (double g : gammas)
    if (!(g > 0.0)) throw ConfigError("config: kernel.gamma must be positive");
  if (!(dt > 0.0) || !(t_max > 0.0)) throw ConfigError("config: grid.dt and grid.t_max must be positive");
  if (output_stride < 1) throw ConfigError("config: grid.output_stride must be >= 1");
  if (engines.empty()) throw ConfigError("config: engines is empty");
  if (psi0.size() != spec.dim()) throw ConfigError("config: initial state does not match n_qubits");
  if (n_traj < 2) throw ConfigError("config: qsd.n_traj must be >= 2");
  if (!(qsd_dt > 0.0) || qsd_refine < 1 || qsd_chunk < 1) throw ConfigError("config: qsd.dt, refine and chunk must be positive");
  if (fock_cutoff < spec.n_qubits + 1) throw ConfigError("config: pseudomode.fock_cutoff must be >= n_qubits + 1");
  if (bath_modes < 1 || excitation_cap < 1) throw ConfigError("config: finite_bath.modes and excitation_cap must be positive");
  if (grading_perturbation != 0.0 && storage != Storage::dense)
    throw ConfigError("config: hierarchy.grading_perturbation requires storage = dense");
  if (workers < 1) throw ConfigError("config: workers must be >= 1");
  if (novikov_traj < 2) throw ConfigError("config: validate.novikov_traj must be >= 2");
}

json ExperimentConfig::to_json() const {
  json j;
  if (!preset.empty()) j["preset"] = preset;
  j["system"] = {{"n_qubits", spec.n_qubits}, {"omega", spec.omega}, {"kappa", spec.kappa}, {"j_xy", spec.j_xy}};
  j["kernel"] = {{"type", "ou"}, {"gamma", gammas}};
  if (state_name == "custom") {
    json amps = json::object();
    for (int k = 0; k < psi0.size(); ++k)
      if (psi0(k) != cplx{}) amps[bits(k, spec.n_qubits)] = {psi0(k).real(), psi0(k).imag()};
    j["initial_state"] = {{"amplitudes", amps}};
  } else {
    j["initial_state"] = state_name;
  }
  j["grid"] = {{"dt", dt}, {"t_max", t_max}, {"output_stride", output_stride}};
  json eng = json::array();
  for (Engine e : engines) eng.push_back(nmqsd::to_string(e));
  j["engines"] = eng;
  j["qsd"] = {{"n_traj", n_traj},     {"master_seed", master_seed}, {"dt", qsd_dt},
              {"refine", qsd_refine}, {"chunk", qsd_chunk},         {"norm_cap", norm_cap},
              {"exclude_flagged", exclude_flagged}};
  j["pseudomode"] = {{"fock_cutoff", fock_cutoff}};
  j["finite_bath"] = {{"modes", bath_modes}, {"excitation_cap", excitation_cap}, {"half_width", window_half_width}};
  j["hierarchy"] = {{"closure", nmqsd::to_string(closure)},
                    {"storage", nmqsd::to_string(storage)},
                    {"grading_perturbation", grading_perturbation}};
  j["output"] = {{"rho_entries", rho_entries}};
  j["tolerances"] = {{"compare", compare_tolerance}};
  j["validate"] = {{"novikov_traj", novikov_traj}};
  return j;
}

std::string ExperimentConfig::hash() const {
  const std::string s = to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------- run

const EngineRun* RunResult::find(Engine e, double gamma) const {
  for (const auto& r : runs)
    if (r.engine == e && r.gamma == gamma) return &r;
  return nullptr;
}

RunResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<double, Engine>> tasks;
  for (double g : cfg.gammas)
    for (Engine e : cfg.engines) tasks.emplace_back(g, e);
  RunResult res;
  res.runs.resize(tasks.size());
  parallel_for(static_cast<int>(tasks.size()), cfg.workers, [&](int k) {
    const auto [g, e] = tasks[static_cast<size_t>(k)];
    res.runs[static_cast<size_t>(k)] = run_engine(cfg, e, g);
  });
  return res;
}

std::vector<std::string> csv_header(int n_qubits, bool rho_entries, bool qsd) {
  const int dim = 1 << n_qubits;
  std::vector<std::string> h{"t"};
  if (rho_entries)
    for (int r = 0; r < dim; ++r)
      for (int c = 0; c < dim; ++c) {
        const std::string base = "rho_" + bits(r, n_qubits) + "_" + bits(c, n_qubits);
        h.push_back(base + "_re");
        h.push_back(base + "_im");
      }
  for (int k = 0; k < dim; ++k) h.push_back("p_" + bits(k, n_qubits));
  for (const auto& [a, b] : all_pairs(n_qubits)) h.push_back("c" + std::to_string(a) + std::to_string(b));
  h.push_back("trace");
  h.push_back("min_eigenvalue");
  if (qsd) h.push_back("trace_se");
  return h;
}

void write_series_csv(const std::string& path, const EngineRun& run, int n_qubits, bool rho_entries) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  const bool qsd = run.engine == Engine::qsd;
  const auto header = csv_header(n_qubits, rho_entries, qsd);
  for (size_t k = 0; k < header.size(); ++k) out << (k ? "," : "") << header[k];
  out << "\n";
  const auto pairs = all_pairs(n_qubits);
  const auto conc = pairwise_concurrence_series(run.series.t, run.series.rho, pairs);
  const int dim = 1 << n_qubits;
  for (size_t i = 0; i < run.series.t.size(); ++i) {
    const Mat& rho = run.series.rho[i];
    out << fmt(run.series.t[i]);
    if (rho_entries)
      for (int r = 0; r < dim; ++r)
        for (int c = 0; c < dim; ++c) out << "," << fmt(rho(r, c).real()) << "," << fmt(rho(r, c).imag());
    for (int k = 0; k < dim; ++k) out << "," << fmt(rho(k, k).real());
    for (const auto& cs : conc) out << "," << fmt(cs.values[i]);
    out << "," << fmt(rho.trace().real()) << "," << fmt(min_eig(rho));
    if (qsd) out << "," << fmt(i < run.trace_std_error.size() ? run.trace_std_error[i] : NAN);
    out << "\n";
  }
}

StateSeries read_series_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path + ": empty file");
  const auto header = split_csv(line);
  int dim = 0;
  for (const auto& h : header)
    if (h.rfind("p_", 0) == 0) ++dim;
  if (dim == 0 || (dim & (dim - 1)) != 0) throw ConfigError(path + ": no population columns");
  const int n = static_cast<int>(std::lround(std::log2(dim)));
  std::map<std::string, size_t> col;
  for (size_t k = 0; k < header.size(); ++k) col[header[k]] = k;
  const std::string first = "rho_" + bits(0, n) + "_" + bits(0, n) + "_re";
  if (!col.count(first)) throw ConfigError(path + ": written without rho entries (set output.rho_entries)");
  StateSeries s;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) throw ConfigError(path + ": ragged row");
    s.t.push_back(std::stod(cells[0]));
    Mat rho(dim, dim);
    for (int r = 0; r < dim; ++r)
      for (int c = 0; c < dim; ++c) {
        const std::string base = "rho_" + bits(r, n) + "_" + bits(c, n);
        rho(r, c) = cplx(std::stod(cells[col.at(base + "_re")]), std::stod(cells[col.at(base + "_im")]));
      }
    log_state(s.log, rho);
    s.rho.push_back(std::move(rho));
  }
  return s;
}

void write_run(const ExperimentConfig& cfg, const RunResult& res, const std::string& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["version"] = kVersion;
  manifest["config"] = cfg.to_json();
  manifest["config_hash"] = cfg.hash();
  manifest["defaults"] = {{"omega", 1.0}, {"kappa", 1.0}, {"j_xy", 0.0}};
  manifest["seeds"] = {{"master_seed", cfg.master_seed},
                       {"scheme", "trajectory j uses splitmix64(master_seed + j * 0x9e3779b97f4a7c15)"}};
  json files = json::array();
  std::ostringstream log;
  for (const auto& r : res.runs) {
    const std::string sub = gamma_dir(r.gamma);
    fs::create_directories(fs::path(dir) / sub);
    const std::string rel = sub + "/" + nmqsd::to_string(r.engine) + ".csv";
    write_series_csv((fs::path(dir) / rel).string(), r, cfg.spec.n_qubits, cfg.rho_entries);
    json f = {{"path", rel},
              {"engine", nmqsd::to_string(r.engine)},
              {"gamma", r.gamma},
              {"max_trace_defect", r.series.log.max_trace_defect},
              {"max_hermiticity_defect", r.series.log.max_hermiticity_defect},
              {"min_eigenvalue", r.series.log.min_eigenvalue}};
    if (r.engine == Engine::qsd) {
      f["n_traj"] = r.n_traj;
      f["flagged"] = r.flagged;
    }
    files.push_back(f);
    log << rel << " " << r.seconds << " s\n";
  }
  manifest["files"] = files;
  std::ofstream(fs::path(dir) / "manifest.json") << manifest.dump(2) << "\n";
  // Timings vary between runs, so they stay out of the manifest.
  std::ofstream(fs::path(dir) / "run_log.txt") << log.str();
}

// ---------------------------------------------------------------- compare

CompareReport compare_series(const StateSeries& a, const StateSeries& b, double tolerance) {
  CompareReport rep;
  rep.tolerance = tolerance;
  size_t j = 0;
  for (size_t i = 0; i < a.t.size(); ++i) {
    while (j < b.t.size() && b.t[j] < a.t[i] - 1e-9) ++j;
    if (j == b.t.size()) break;
    if (std::abs(b.t[j] - a.t[i]) > 1e-9) continue;
    if (a.rho[i].rows() != b.rho[j].rows()) throw ConfigError("compare: state dimensions differ");
    const double d = trace_distance(a.rho[i], b.rho[j]);
    rep.t.push_back(a.t[i]);
    rep.distance.push_back(d);
    rep.max_distance = std::max(rep.max_distance, d);
  }
  if (rep.t.empty()) throw ConfigError("compare: the series share no output times");
  rep.pass = rep.max_distance <= tolerance;
  return rep;
}

// ---------------------------------------------------------------- sweep

SweepResult run_sweep(const ExperimentConfig& cfg, const std::string& axis, const std::vector<double>& values) {
  if (values.size() < 2) throw ConfigError("sweep: need at least two values");
  cfg.validate();
  const double gamma = cfg.gammas.front();
  SweepResult res;
  res.axis = axis;
  std::vector<double> metric(values.size());

  auto with_engine = [&](ExperimentConfig c, Engine e, double g) { return run_engine(c, e, g); };

  if (axis == "dt") {
    res.metric = cfg.spec.n_qubits == 1 ? "max |rho11 - benchmark|" : "max trace distance to pseudomode";
    const double out_dt = cfg.dt * cfg.output_stride;
    parallel_for(static_cast<int>(values.size()), cfg.workers, [&](int k) {
      ExperimentConfig c = cfg;
      c.dt = values[static_cast<size_t>(k)];
      c.output_stride = std::max(1, static_cast<int>(std::lround(out_dt / c.dt)));
      const EngineRun m = with_engine(c, Engine::master, gamma);
      if (c.spec.n_qubits == 1) {
        std::vector<double> p, ref = single_qubit_benchmark(gamma, c.spec.omega[0], m.series.t, c.spec.kappa[0],
                                                            std::norm(c.psi0(1)));
        for (const auto& r : m.series.rho) p.push_back(r(1, 1).real());
        metric[static_cast<size_t>(k)] = max_abs_diff(p, ref);
      } else {
        const EngineRun p = with_engine(c, Engine::pseudomode, gamma);
        metric[static_cast<size_t>(k)] = compare_series(m.series, p.series, 1.0).max_distance;
      }
    });
  } else if (axis == "n_traj") {
    res.metric = "max trace distance to master";
    const EngineRun m = with_engine(cfg, Engine::master, gamma);
    parallel_for(static_cast<int>(values.size()), cfg.workers, [&](int k) {
      ExperimentConfig c = cfg;
      c.n_traj = std::lround(values[static_cast<size_t>(k)]);
      const EngineRun q = with_engine(c, Engine::qsd, gamma);
      metric[static_cast<size_t>(k)] = compare_series(q.series, m.series, 1.0).max_distance;
    });
  } else if (axis == "gamma") {
    res.metric = "max trace distance master vs lindblad";
    const EngineRun l = with_engine(cfg, Engine::lindblad, gamma);
    parallel_for(static_cast<int>(values.size()), cfg.workers, [&](int k) {
      const EngineRun m = with_engine(cfg, Engine::master, values[static_cast<size_t>(k)]);
      metric[static_cast<size_t>(k)] = compare_series(m.series, l.series, 1.0).max_distance;
    });
  } else if (axis == "K_modes") {
    res.metric = "max trace distance finite bath vs pseudomode";
    const EngineRun p = with_engine(cfg, Engine::pseudomode, gamma);
    parallel_for(static_cast<int>(values.size()), cfg.workers, [&](int k) {
      ExperimentConfig c = cfg;
      c.bath_modes = static_cast<int>(std::lround(values[static_cast<size_t>(k)]));
      const EngineRun f = with_engine(c, Engine::finite_bath, gamma);
      metric[static_cast<size_t>(k)] = compare_series(f.series, p.series, 1.0).max_distance;
    });
  } else {
    throw ConfigError("sweep: axis must be dt, n_traj, gamma or K_modes");
  }

  for (size_t k = 0; k < values.size(); ++k) {
    SweepRow row{values[k], metric[k], NAN};
    if (k > 0) {
      // log-log slope to the previous row; for dt this is the observed order
      row.order = std::log(metric[k - 1] / metric[k]) / std::log(values[k - 1] / values[k]);
    }
    res.rows.push_back(row);
  }
  res.fitted_slope = loglog_slope(values, metric);
  return res;
}

// ---------------------------------------------------------------- validate

bool ValidationReport::pass() const {
  return std::all_of(items.begin(), items.end(), [](const ValidationItem& i) { return i.pass; });
}

std::string ValidationReport::text() const {
  std::ostringstream os;
  for (const auto& i : items) {
    os << (i.pass ? "PASS " : "FAIL ") << i.name << " value=" << i.value << " tol=" << i.tolerance;
    if (!i.note.empty()) os << " (" << i.note << ")";
    os << "\n";
  }
  os << (pass() ? "all checks passed" : "validation failed") << "\n";
  return os.str();
}

ValidationReport validate_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ValidationReport rep;
  for (double gamma : cfg.gammas) {
    const std::string tag = " gamma=" + gamma_dir(gamma).substr(6);
    const BathKernel kernel = BathKernel::ornstein_uhlenbeck(gamma);
    const TimeGrid grid = cfg.grid();
    double forbidden = 0.0, grading = 0.0, boundary = 0.0;
    bool applicable = false;
    const int every = std::max(1, (grid.n_nodes - 1) / 10);
    MasterOptions mo;
    mo.hierarchy = hierarchy_options(cfg);
    mo.output_stride = cfg.output_stride;
    mo.on_step = [&](const OHierarchy& h) {
      grading = std::max(grading, h.grading_defects().max());
      boundary = std::max(boundary, h.boundary_residual());
      if (h.index() % every == 0 || h.index() == 1) {
        const ForbiddenReport f = h.check_forbidden();
        applicable = applicable || f.applicable;
        forbidden = std::max(forbidden, f.max_residual());
      }
    };
    const StateSeries s = propagate_master(cfg.spec, kernel, cfg.psi0 * cfg.psi0.adjoint(), grid, mo);
    rep.items.push_back({"forbidden residual" + tag, forbidden, 1e-10, forbidden <= 1e-10,
                         applicable ? "" : "not applicable (depth < 1)"});
    rep.items.push_back({"grading defect" + tag, grading, 1e-12, grading <= 1e-12, ""});
    rep.items.push_back({"boundary residual" + tag, boundary, 1e-12, boundary <= 1e-12, ""});
    rep.items.push_back({"trace defect" + tag, s.log.max_trace_defect, 1e-8, s.log.max_trace_defect <= 1e-8, ""});
    rep.items.push_back({"hermiticity defect" + tag, s.log.max_hermiticity_defect, 1e-10,
                         s.log.max_hermiticity_defect <= 1e-10, "before symmetrization"});
    rep.items.push_back({"min eigenvalue" + tag, s.log.min_eigenvalue, -1e-6, s.log.min_eigenvalue >= -1e-6, ""});
    const NovikovReport nr = run_novikov_check(cfg.spec, kernel, cfg.psi0,
                                               TimeGrid::from_t_max(0.05, std::min(cfg.t_max, 2.0)),
                                               cfg.novikov_traj, cfg.master_seed);
    rep.items.push_back({"novikov residual / standard error" + tag, nr.max_ratio, 5.0, nr.consistent(5.0),
                         "max residual " + fmt(nr.max_residual) + ", " + std::to_string(nr.n_traj) + " trajectories"});
  }
  return rep;
}

}  // namespace nmqsd
