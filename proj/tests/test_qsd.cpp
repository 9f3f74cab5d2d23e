#include <doctest.h>

#include "nmqsd/analysis.hpp"
#include "nmqsd/master.hpp"
#include "nmqsd/novikov.hpp"
#include "nmqsd/qsd.hpp"

using namespace nmqsd;

namespace {

double max_ratio(const EnsembleResult& a, const EnsembleResult& b) {
  double r = 0.0;
  for (size_t i = 1; i < a.t.size(); ++i)
    for (Eigen::Index x = 0; x < a.rho[i].size(); ++x) {
      const double se = a.std_error[i](x).real();
      if (se > 1e-12) r = std::max(r, std::abs(a.rho[i](x) - b.rho[i](x)) / se);
    }
  return r;
}

}  // namespace

TEST_SUITE("qsd") {

TEST_CASE("accumulator statistics and merging") {
  EnsembleAccumulator a(1, 2), b(1, 2), all(1, 2);
  const std::vector<Vec> psis{Vec::Unit(2, 0), Vec::Unit(2, 1), (Vec::Unit(2, 0) + Vec::Unit(2, 1)) / std::sqrt(2.0)};
  for (size_t j = 0; j < psis.size(); ++j) {
    (j < 2 ? a : b).add(0, psis[j]);
    (j < 2 ? a : b).finish_trajectory();
    all.add(0, psis[j]);
    all.finish_trajectory();
  }
  a.merge(b);
  CHECK(a.count() == 3);
  CHECK((a.mean(0) - all.mean(0)).cwiseAbs().maxCoeff() < 1e-16);
  // populations 1, 0, 1/2: mean 1/2, sample sd 1/2, se = 1/(2 sqrt 3)
  CHECK(a.standard_error(0)(0, 0).real() == doctest::Approx(0.5 / std::sqrt(3.0)));
  CHECK(a.trace_standard_error(0) == doctest::Approx(0.0));
}

TEST_CASE("ensemble is independent of the worker count") {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(2, 1.0, 1.0, 0.2);
  const BathKernel k = BathKernel::ornstein_uhlenbeck(0.4);
  const Vec psi = (basis_state("11") + basis_state("00")) / std::sqrt(2.0);
  QsdOptions o;
  o.n_traj = 230;
  o.master_seed = 9;
  const auto a = run_ensemble(spec, k, psi, TimeGrid::from_t_max(0.05, 2.0), o);
  o.workers = 3;
  const auto b = run_ensemble(spec, k, psi, TimeGrid::from_t_max(0.05, 2.0), o);
  REQUIRE(a.rho.size() == b.rho.size());
  for (size_t i = 0; i < a.rho.size(); ++i) CHECK(a.rho[i] == b.rho[i]);
  o.master_seed = 10;
  const auto c = run_ensemble(spec, k, psi, TimeGrid::from_t_max(0.05, 2.0), o);
  CHECK(a.rho.back() != c.rho.back());
}

TEST_CASE("zero-noise trajectory of one qubit carries the exact amplitude") {
  // For one qubit at zero temperature rho_11(t) = |G(t)|^2 with G the noise-free amplitude.
  const QubitSystemSpec spec = QubitSystemSpec::uniform(1);
  for (double gamma : {0.4, 1.5}) {
    const BathKernel k = BathKernel::ornstein_uhlenbeck(gamma);
    const ObarHistory hist = ObarHistory::compute(spec, k, TimeGrid::from_t_max(0.002, 5.0), 5);
    NoisePath zero{hist.grid(), std::vector<cplx>(static_cast<size_t>(hist.grid().n_nodes), 0.0), 0};
    const auto psi = qsd_trajectory(spec, hist, zero, basis_state("1"));
    std::vector<double> t;
    for (int i = 0; i < hist.grid().n_nodes; ++i) t.push_back(hist.grid().t(i));
    const auto ref = single_qubit_benchmark(gamma, 1.0, t);
    double e = 0.0;
    for (size_t i = 0; i < t.size(); ++i) e = std::max(e, std::abs(std::norm(psi[i](1)) - ref[i]));
    CHECK(e < 1e-4);
  }
}

TEST_CASE("N = 1 ensemble mean agrees with the master engine") {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(1);
  const BathKernel k = BathKernel::ornstein_uhlenbeck(0.4);
  const Vec psi = (basis_state("1") + basis_state("0")) / std::sqrt(2.0);
  QsdOptions o;
  o.n_traj = 4000;
  const auto e = run_ensemble(spec, k, psi, TimeGrid::from_t_max(0.05, 5.0), o);
  MasterOptions mo;
  mo.output_stride = 10;
  const auto m = propagate_master(spec, k, psi * psi.adjoint(), TimeGrid::from_t_max(0.005, 5.0), mo);
  double d = 0.0;
  for (size_t i = 0; i < e.t.size(); ++i) d = std::max(d, trace_distance(e.rho[i], m.rho[i]));
  CHECK(d < 0.05);
  double z = 0.0;
  for (size_t i = 1; i < e.t.size(); ++i) z = std::max(z, std::abs(e.rho[i].trace().real() - 1.0) / e.trace_std_error[i]);
  CHECK(z < 5.0);
}

TEST_CASE("noise-square term matters only with a |111> component") {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(3);
  const BathKernel k = BathKernel::ornstein_uhlenbeck(0.4);
  const ObarHistory hist = ObarHistory::compute(spec, k, TimeGrid::from_t_max(0.01, 4.0), 5);
  QsdOptions with, without;
  with.n_traj = without.n_traj = 2000;
  without.include_obar2 = false;

  const Vec ghz = (basis_state("000") + basis_state("111")) / std::sqrt(2.0);
  CHECK(max_ratio(run_ensemble(spec, k, ghz, hist, with), run_ensemble(spec, k, ghz, hist, without)) > 5.0);

  const Vec w = (basis_state("100") + basis_state("010") + basis_state("001")) / std::sqrt(3.0);
  with.n_traj = without.n_traj = 200;
  const auto a = run_ensemble(spec, k, w, hist, with), b = run_ensemble(spec, k, w, hist, without);
  for (size_t i = 0; i < a.rho.size(); ++i) CHECK(a.rho[i] == b.rho[i]);
}

TEST_CASE("norm cap flags trajectories and exclusion is reported") {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(1);
  QsdOptions o;
  o.n_traj = 300;
  o.norm_cap = 1.2;
  const auto a = run_ensemble(spec, BathKernel::ornstein_uhlenbeck(0.4), basis_state("1"), TimeGrid::from_t_max(0.05, 4.0), o);
  CHECK(a.flagged > 0);
  CHECK(a.excluded == 0);
  CHECK(a.n_traj == 300);
  o.exclude_flagged = true;
  const auto b = run_ensemble(spec, BathKernel::ornstein_uhlenbeck(0.4), basis_state("1"), TimeGrid::from_t_max(0.05, 4.0), o);
  CHECK(b.excluded == a.flagged);
  CHECK(b.accumulator.count() == 300 - b.excluded);
}

TEST_CASE("Novikov residual is consistent with zero") {
  const auto r = run_novikov_check(QubitSystemSpec::uniform(2, 1.0, 1.0, 0.2), BathKernel::ornstein_uhlenbeck(0.4),
                                   (basis_state("11") + basis_state("01")) / std::sqrt(2.0),
                                   TimeGrid::from_t_max(0.05, 1.5), 3000, 4);
  CHECK(r.n_traj == 3000);
  CHECK(r.consistent(5.0));
}

TEST_CASE("Novikov check rejects decorrelated noise (negative control)") {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(1);
  const BathKernel k = BathKernel::ornstein_uhlenbeck(0.4);
  const TimeGrid g = TimeGrid::from_t_max(0.05, 2.0);
  HierarchyOptions ho;
  ho.closure = ObarClosure::quadrature;
  OHierarchy h(spec, k, g, ho);
  ObarHistory hist(h, 1);
  while (h.index() + 1 < g.n_nodes) {
    h.step();
    hist.record(h);
  }
  const NoiseSampler sampler(k, g);
  std::vector<NoisePath> driving, other;
  std::vector<Vec> finals;
  for (long j = 0; j < 3000; ++j) {
    driving.push_back(sampler.sample(trajectory_seed(1, static_cast<std::uint64_t>(j))));
    other.push_back(sampler.sample(trajectory_seed(2, static_cast<std::uint64_t>(j))));
    finals.push_back(qsd_trajectory(spec, hist, driving.back(), basis_state("1")).back());
  }
  const std::vector<int> s{0, 20, 40};
  CHECK(verify_novikov(h, driving, finals, s).consistent(5.0));
  CHECK_FALSE(verify_novikov(h, other, finals, s).consistent(5.0));
}

}
