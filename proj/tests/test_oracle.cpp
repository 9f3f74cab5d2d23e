#include <doctest.h>

#include "nmqsd/analysis.hpp"
#include "nmqsd/oracle.hpp"
#include "reference.hpp"

using namespace nmqsd;

namespace {

Mat pure(const Vec& v) { return v * v.adjoint(); }

}  // namespace

TEST_SUITE("oracle") {

TEST_CASE("restricted basis dimension for N = 3, K = 120, cap 3") {
  // system states with m excitations times multisets of at most cap - m modes
  double count = 0.0;
  for (int m = 0; m <= 3; ++m) count += ref::binomial(3, m) * ref::binomial(120 + 3 - m, 3 - m);
  CHECK(count == 325128.0);
  CHECK(finite_bath_dimension(3, 120, 3) == 325128u);
  std::uint64_t sectors = 0;
  for (int s = 0; s <= 3; ++s) sectors += ExcitationBasis(3, 120, s).size();
  CHECK(sectors == 325128u);
}

TEST_CASE("excitation basis lookup is consistent") {
  const ExcitationBasis b(2, 5, 2);
  for (size_t i = 0; i < b.size(); ++i) {
    CHECK(b.find(b.system_state(i), b.bath_key(i)) == static_cast<long>(i));
    CHECK(excitation_count(b.system_state(i)) + static_cast<int>(b.modes_of(i).size()) == 2);
  }
  CHECK(b.find(3, ExcitationBasis::pack({0}, 5)) == -1);
}

TEST_CASE("free pseudomode correlation decays as exp(-gamma tau)") {
  for (double gamma : {0.4, 1.5}) {
    const TimeGrid g = TimeGrid::from_t_max(0.01, 3.0);
    const auto c = pseudomode_free_correlation(PseudomodeConfig::for_ou(gamma), g);
    for (int i = 0; i < g.n_nodes; i += 25) CHECK(std::abs(c[static_cast<size_t>(i)] - std::exp(-gamma * g.t(i))) < 1e-9);
    const PseudomodeConfig pc = PseudomodeConfig::for_ou(gamma);
    CHECK(std::abs(pc.induced_kernel(0.7) - BathKernel::ornstein_uhlenbeck(gamma).lag(0.7)) < 1e-15);
  }
}

TEST_CASE("pseudomode N = 1 follows the closed form") {
  for (double gamma : {0.4, 1.5}) {
    const StateSeries s = pseudomode_evolve(QubitSystemSpec::uniform(1), gamma, pure(basis_state("1")),
                                            TimeGrid::from_t_max(0.005, 10.0), PseudomodeConfig::for_ou(gamma, 2));
    const auto ref = single_qubit_benchmark(gamma, 1.0, s.t);
    double e = 0.0;
    for (size_t i = 0; i < s.t.size(); ++i) e = std::max(e, std::abs(s.rho[i](1, 1).real() - ref[i]));
    CHECK(e < 1e-8);
  }
}

TEST_CASE("Fock cutoff above the excitation number is exact") {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(2, 1.0, 1.0, 0.2);
  const double d = pseudomode_cutoff_difference(spec, pure(basis_state("11")), TimeGrid::from_t_max(0.01, 2.0),
                                                PseudomodeConfig::for_ou(0.4, 3));
  CHECK(d < 1e-12);
  CHECK_THROWS_AS(PseudomodeConfig::for_ou(0.4, 1).validate(BathKernel::ornstein_uhlenbeck(0.4), 2), ConfigError);
}

TEST_CASE("Lanczos propagator matches the dense exponential") {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(2, 1.0, 1.0, 0.3);
  const BathModeSet modes = discretize_bath_modes(BathKernel::ornstein_uhlenbeck(1.5), 8, 6.0, 1.0, 0.1, 1.0);
  const ExcitationBasis b(2, 8, 2);
  const SectorHamiltonian h = build_sector_hamiltonian(spec, modes, b);
  Mat dense = Mat::Zero(static_cast<int>(h.size()), static_cast<int>(h.size()));
  for (size_t r = 0; r < h.size(); ++r)
    for (long k = h.row_ptr[r]; k < h.row_ptr[r + 1]; ++k) dense(static_cast<int>(r), h.col[static_cast<size_t>(k)]) = h.val[static_cast<size_t>(k)];
  CHECK((dense - dense.adjoint()).cwiseAbs().maxCoeff() == 0.0);
  std::vector<cplx> psi(h.size(), 0.0);
  psi[0] = 1.0;
  Vec v = Eigen::Map<Vec>(psi.data(), static_cast<int>(psi.size()));
  krylov_expm_apply(h, psi, 1.3, 30, 1e-12);
  const Vec expect = (cplx(0, -1.3) * dense).exp() * v;
  CHECK((Eigen::Map<Vec>(psi.data(), static_cast<int>(psi.size())) - expect).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("finite bath N = 1 approaches the closed form") {
  const double gamma = 1.5, t_max = 5.0;
  const BathKernel k = BathKernel::ornstein_uhlenbeck(gamma);
  const BathModeSet modes = discretize_bath_modes(k, 200, default_mode_window(gamma, 200, t_max), t_max, 0.05);
  FiniteBathDiagnostics diag;
  const auto s = finite_bath_evolve(QubitSystemSpec::uniform(1), modes, {basis_state("1")},
                                    TimeGrid::from_t_max(0.05, t_max), {}, &diag);
  const auto ref = single_qubit_benchmark(gamma, 1.0, s[0].t);
  double e = 0.0;
  for (size_t i = 0; i < ref.size(); ++i) e = std::max(e, std::abs(s[0].rho[i](1, 1).real() - ref[i]));
  CHECK(e < 5e-3);
  CHECK(diag.max_norm_defect < 1e-10);
  CHECK(diag.max_excitation_drift < 1e-10);
}

}
