#include <doctest.h>

#include "nmqsd/analysis.hpp"
#include "nmqsd/master.hpp"
#include "nmqsd/oracle.hpp"
#include "reference.hpp"

using namespace nmqsd;

namespace {

double n1_error(double dt, double gamma, double t_max) {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(1);
  const TimeGrid g = TimeGrid::from_t_max(dt, t_max);
  Mat rho0 = Mat::Zero(2, 2);
  rho0(1, 1) = 1.0;
  const StateSeries s = propagate_master(spec, BathKernel::ornstein_uhlenbeck(gamma), rho0, g);
  const auto ref = single_qubit_benchmark(gamma, 1.0, s.t);
  double e = 0.0;
  for (size_t i = 0; i < s.t.size(); ++i) e = std::max(e, std::abs(s.rho[i](1, 1).real() - ref[i]));
  return e;
}

Mat pure(const Vec& v) { return v * v.adjoint(); }

}  // namespace

TEST_SUITE("master") {

TEST_CASE("N = 1 master engine follows the closed-form population") {
  CHECK(n1_error(0.002, 0.4, 10.0) < 5e-6);
  CHECK(n1_error(0.002, 1.5, 10.0) < 5e-6);
}

TEST_CASE("dt halving reduces the N = 1 error about fourfold") {
  const double e1 = n1_error(0.02, 0.4, 5.0), e2 = n1_error(0.01, 0.4, 5.0), e3 = n1_error(0.005, 0.4, 5.0);
  INFO(e1 << " " << e2 << " " << e3);
  CHECK(e1 / e2 == doctest::Approx(4.0).epsilon(0.15));
  CHECK(e2 / e3 == doctest::Approx(4.0).epsilon(0.15));
}

TEST_CASE("factorized R equals the brute-force quadrature") {
  for (int n : {1, 2, 3})
    for (auto c : {ObarClosure::quadrature, ObarClosure::auxiliary}) {
      const QubitSystemSpec spec = QubitSystemSpec::uniform(n, 1.0, 1.0, 0.2);
      HierarchyOptions o;
      o.closure = c;
      OHierarchy h(spec, BathKernel::ornstein_uhlenbeck(0.4), TimeGrid{0.1, 16}, o);
      h.run_to(15);
      Vec psi = Vec::Zero(spec.dim());
      psi(0) = 1.0;
      psi(spec.dim() - 1) = cplx(0.6, 0.8);
      psi /= psi.norm();
      const RAssembly a = assemble_R(h, pure(psi)), b = assemble_R_bruteforce(h, pure(psi));
      for (int k = 0; k < 4; ++k) CHECK((a.terms[static_cast<size_t>(k)] - b.terms[static_cast<size_t>(k)]).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((a.R - b.R).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("R kernel is linear in rho") {
  OHierarchy h(QubitSystemSpec::uniform(3, 1.0, 1.0, 0.2), BathKernel::ornstein_uhlenbeck(1.5), TimeGrid{0.05, 21});
  h.run_to(20);
  const RKernel rk = RKernel::build(h);
  const Mat a = pure(basis_state("101")), b = pure((basis_state("000") + basis_state("111")) / std::sqrt(2.0));
  CHECK((rk.apply(0.3 * a + 0.7 * b) - (0.3 * rk.apply(a) + 0.7 * rk.apply(b))).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("master rhs preserves trace and hermiticity") {
  OHierarchy h(QubitSystemSpec::uniform(2, 1.0, 1.0, 0.3), BathKernel::ornstein_uhlenbeck(0.4), TimeGrid{0.05, 11});
  h.run_to(10);
  const Mat rho = pure((basis_state("10") + cplx(0, 1) * basis_state("01")) / std::sqrt(2.0));
  const Mat d = master_rhs(rho, RKernel::build(h).apply(rho), h.H().dense(), h.L().dense());
  CHECK(std::abs(d.trace()) < 1e-14);
  CHECK((d - d.adjoint()).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("kappa = 0 reduces to unitary evolution") {
  QubitSystemSpec spec = QubitSystemSpec::uniform(2, 1.0, 0.0, 0.5);
  spec.kappa = {0.0, 0.0};
  const Mat rho0 = pure((basis_state("10") + basis_state("00")) / std::sqrt(2.0));
  const StateSeries s = propagate_master(spec, BathKernel::ornstein_uhlenbeck(0.4), rho0, TimeGrid::from_t_max(0.005, 3.0));
  const Mat h = ref::hamiltonian(2, {1.0, 1.0}, 0.5);
  const Mat u = (cplx(0, -3.0) * h).exp();
  CHECK((s.rho.back() - u * rho0 * u.adjoint()).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("Lindblad engine matches the exact superoperator exponential") {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(2, 1.0, 1.0, 0.3);
  const Mat rho0 = pure((basis_state("11") + basis_state("00")) / std::sqrt(2.0));
  const StateSeries s = lindblad_propagate(spec, rho0, TimeGrid::from_t_max(0.01, 2.0));
  const Mat exact = ref::evolve_lindblad_exact(ref::hamiltonian(2, {1, 1}, 0.3), ref::lindblad_op(2, {1, 1}), 0.5, rho0, 2.0);
  CHECK((s.rho.back() - exact).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("N = 2 master engine agrees with the pseudomode oracle") {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(2, 1.0, 1.0, 0.2);
  const TimeGrid g = TimeGrid::from_t_max(0.005, 3.0);
  const std::vector<Mat> rho0{pure(basis_state("11")), pure((basis_state("10") + basis_state("01")) / std::sqrt(2.0))};
  for (double gamma : {0.4, 1.5}) {
    const auto m = propagate_master(spec, BathKernel::ornstein_uhlenbeck(gamma), rho0, g);
    const auto p = pseudomode_evolve(spec, rho0, g, PseudomodeConfig::for_ou(gamma));
    for (size_t s = 0; s < rho0.size(); ++s) {
      double d = 0.0;
      for (size_t i = 0; i < m[s].t.size(); ++i) d = std::max(d, trace_distance(m[s].rho[i], p[s].rho[i]));
      CHECK(d < 2e-4);
      CHECK(m[s].log.max_trace_defect < 1e-12);
      CHECK(m[s].log.min_eigenvalue > -1e-8);
    }
  }
}

TEST_CASE("step hook sees every hierarchy step") {
  int calls = 0;
  MasterOptions mo;
  mo.on_step = [&](const OHierarchy& h) { CHECK(h.index() == ++calls); };
  propagate_master(QubitSystemSpec::uniform(1), BathKernel::ornstein_uhlenbeck(0.4), pure(basis_state("1")),
                   TimeGrid{0.1, 11}, mo);
  CHECK(calls == 10);
}

TEST_CASE("output stride selects every k-th node") {
  MasterOptions mo;
  mo.output_stride = 4;
  const StateSeries s = propagate_master(QubitSystemSpec::uniform(1), BathKernel::ornstein_uhlenbeck(0.4),
                                         pure(basis_state("1")), TimeGrid{0.05, 21}, mo);
  REQUIRE(s.t.size() == 6);
  CHECK(s.t[5] == doctest::Approx(1.0));
}

}
