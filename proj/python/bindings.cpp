#include <pybind11/complex.h>
#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "nmqsd/analysis.hpp"
#include "nmqsd/experiment.hpp"
#include "nmqsd/master.hpp"
#include "nmqsd/novikov.hpp"
#include "nmqsd/oracle.hpp"
#include "nmqsd/qsd.hpp"

namespace py = pybind11;
using namespace nmqsd;

namespace {

// (t, rho[n_t, d, d]) as numpy-friendly values.
py::tuple to_py(const StateSeries& s) {
  const auto d = s.rho.empty() ? 0 : s.rho.front().rows();
  py::array_t<cplx> rho({static_cast<py::ssize_t>(s.rho.size()), static_cast<py::ssize_t>(d), static_cast<py::ssize_t>(d)});
  auto r = rho.mutable_unchecked<3>();
  for (size_t i = 0; i < s.rho.size(); ++i)
    for (Eigen::Index a = 0; a < d; ++a)
      for (Eigen::Index b = 0; b < d; ++b) r(static_cast<py::ssize_t>(i), a, b) = s.rho[i](a, b);
  return py::make_tuple(py::array_t<double>(static_cast<py::ssize_t>(s.t.size()), s.t.data()), rho);
}

QubitSystemSpec make_spec(int n, py::object omega, py::object kappa, double j_xy) {
  QubitSystemSpec s = QubitSystemSpec::uniform(n);
  auto per = [n](py::object o) {
    if (py::isinstance<py::float_>(o) || py::isinstance<py::int_>(o)) return std::vector<double>(static_cast<size_t>(n), o.cast<double>());
    return o.cast<std::vector<double>>();
  };
  s.omega = per(omega);
  s.kappa = per(kappa);
  s.j_xy = j_xy;
  s.validate();
  return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Non-Markovian qubit dynamics from an exact hierarchy master equation and QSD trajectories";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_RuntimeError);

  m.def("named_state", &named_state, py::arg("name"), py::arg("n_qubits"));
  m.def("preset_names", [] {
    std::vector<std::string> out;
    for (const auto& p : presets()) out.push_back(p.name);
    return out;
  });

  m.def(
      "propagate_master",
      [](const Mat& rho0, double gamma, double dt, double t_max, py::object omega, py::object kappa, double j_xy,
         int output_stride) {
        const int n = static_cast<int>(std::lround(std::log2(rho0.rows())));
        MasterOptions mo;
        mo.output_stride = output_stride;
        StateSeries s;
        {
          const QubitSystemSpec spec = make_spec(n, omega, kappa, j_xy);
          py::gil_scoped_release release;
          s = propagate_master(spec, BathKernel::ornstein_uhlenbeck(gamma), rho0, TimeGrid::from_t_max(dt, t_max), mo);
        }
        return to_py(s);
      },
      py::arg("rho0"), py::arg("gamma"), py::arg("dt"), py::arg("t_max"), py::arg("omega") = 1.0,
      py::arg("kappa") = 1.0, py::arg("j_xy") = 0.0, py::arg("output_stride") = 1);

  m.def(
      "pseudomode_evolve",
      [](const Mat& rho0, double gamma, double dt, double t_max, py::object omega, py::object kappa, double j_xy,
         int fock_cutoff, int output_stride) {
        const int n = static_cast<int>(std::lround(std::log2(rho0.rows())));
        const QubitSystemSpec spec = make_spec(n, omega, kappa, j_xy);
        return to_py(pseudomode_evolve(spec, gamma, rho0, TimeGrid::from_t_max(dt, t_max),
                                       PseudomodeConfig::for_ou(gamma, fock_cutoff), output_stride));
      },
      py::arg("rho0"), py::arg("gamma"), py::arg("dt"), py::arg("t_max"), py::arg("omega") = 1.0,
      py::arg("kappa") = 1.0, py::arg("j_xy") = 0.0, py::arg("fock_cutoff") = 5, py::arg("output_stride") = 1);

  m.def(
      "lindblad_propagate",
      [](const Mat& rho0, double dt, double t_max, py::object omega, py::object kappa, double j_xy, int output_stride) {
        const int n = static_cast<int>(std::lround(std::log2(rho0.rows())));
        return to_py(lindblad_propagate(make_spec(n, omega, kappa, j_xy), rho0, TimeGrid::from_t_max(dt, t_max),
                                        output_stride));
      },
      py::arg("rho0"), py::arg("dt"), py::arg("t_max"), py::arg("omega") = 1.0, py::arg("kappa") = 1.0,
      py::arg("j_xy") = 0.0, py::arg("output_stride") = 1);

  m.def(
      "qsd_ensemble",
      [](const Vec& psi0, double gamma, double dt, double t_max, long n_traj, std::uint64_t seed, int refine,
         py::object omega, py::object kappa, double j_xy, int workers) {
        const int n = static_cast<int>(std::lround(std::log2(psi0.size())));
        const QubitSystemSpec spec = make_spec(n, omega, kappa, j_xy);
        QsdOptions o;
        o.n_traj = n_traj;
        o.master_seed = seed;
        o.workers = workers;
        EnsembleResult e;
        {
          py::gil_scoped_release release;
          e = run_ensemble(spec, BathKernel::ornstein_uhlenbeck(gamma), psi0, TimeGrid::from_t_max(dt, t_max), o,
                           refine);
        }
        StateSeries s;
        s.t = e.t;
        s.rho = e.rho;
        py::tuple tr = to_py(s);
        return py::make_tuple(tr[0], tr[1],
                              py::array_t<double>(static_cast<py::ssize_t>(e.trace_std_error.size()),
                                                  e.trace_std_error.data()));
      },
      py::arg("psi0"), py::arg("gamma"), py::arg("dt"), py::arg("t_max"), py::arg("n_traj"), py::arg("seed") = 1,
      py::arg("refine") = 5, py::arg("omega") = 1.0, py::arg("kappa") = 1.0, py::arg("j_xy") = 0.0,
      py::arg("workers") = 1);

  m.def(
      "novikov_ratio",
      [](const Vec& psi0, double gamma, double dt, double t_max, long n_traj, std::uint64_t seed) {
        const int n = static_cast<int>(std::lround(std::log2(psi0.size())));
        const NovikovReport r = run_novikov_check(QubitSystemSpec::uniform(n), BathKernel::ornstein_uhlenbeck(gamma),
                                                  psi0, TimeGrid::from_t_max(dt, t_max), n_traj, seed);
        return r.max_ratio;
      },
      py::arg("psi0"), py::arg("gamma"), py::arg("dt"), py::arg("t_max"), py::arg("n_traj"), py::arg("seed") = 1);

  m.def("single_qubit_benchmark", &single_qubit_benchmark, py::arg("gamma"), py::arg("omega"), py::arg("t"),
        py::arg("kappa") = 1.0, py::arg("rho11_0") = 1.0);
  m.def("concurrence", [](const Mat& rho) { return concurrence(rho); }, py::arg("rho2"));
  m.def("trace_distance", &trace_distance, py::arg("a"), py::arg("b"));
  m.def("partial_trace", &partial_trace, py::arg("rho"), py::arg("n_qubits"), py::arg("keep"));

  m.def(
      "run_config",
      [](const std::string& config_json, const std::string& out_dir) {
        const ExperimentConfig cfg = ExperimentConfig::from_json(nlohmann::json::parse(config_json));
        RunResult res;
        {
          py::gil_scoped_release release;
          res = run_experiment(cfg);
        }
        if (!out_dir.empty()) write_run(cfg, res, out_dir);
        py::dict out;
        for (const auto& r : res.runs) {
          const std::string key = to_string(r.engine) + "@" + std::to_string(r.gamma);
          out[py::str(key)] = to_py(r.series);
        }
        return py::make_tuple(cfg.hash(), out);
      },
      py::arg("config_json"), py::arg("out_dir") = "");

  m.def(
      "validate_config",
      [](const std::string& config_json) {
        const ValidationReport rep = validate_experiment(ExperimentConfig::from_json(nlohmann::json::parse(config_json)));
        return py::make_tuple(rep.pass(), rep.text());
      },
      py::arg("config_json"));
}
