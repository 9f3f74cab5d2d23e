#include <doctest.h>

#include <random>

#include "nmqsd/analysis.hpp"
#include "nmqsd/operators.hpp"
#include "reference.hpp"

using namespace nmqsd;

TEST_SUITE("analysis") {

TEST_CASE("concurrence of reference states") {
  const Vec bell = (basis_state("11") + basis_state("00")) / std::sqrt(2.0);
  CHECK(concurrence(bell * bell.adjoint()) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(concurrence(basis_state("10") * basis_state("10").adjoint()) == doctest::Approx(0.0));
  // Werner state p|psi-><psi-| + (1 - p) I / 4 has C = (3p - 1) / 2
  const Vec singlet = (basis_state("10") - basis_state("01")) / std::sqrt(2.0);
  const Mat werner = 0.8 * singlet * singlet.adjoint() + 0.05 * Mat::Identity(4, 4);
  CHECK(concurrence(werner) == doctest::Approx(0.7).epsilon(1e-12));
  // any pair of W has C = 2/3
  const Vec w = (basis_state("100") + basis_state("010") + basis_state("001")) / std::sqrt(3.0);
  CHECK(concurrence(partial_trace(w * w.adjoint(), 3, {1, 3})) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("concurrence agrees with the spin-flip eigenvalue form on random states") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 50; ++trial) {
    Mat a(4, 4);
    for (Eigen::Index k = 0; k < a.size(); ++k) a(k) = cplx(nd(rng), nd(rng));
    Mat rho = a * a.adjoint();
    rho /= rho.trace();
    CHECK(concurrence(rho) == doctest::Approx(ref::concurrence(rho)).epsilon(1e-8));
  }
}

TEST_CASE("trace distance") {
  const Vec a = basis_state("0"), b = (basis_state("0") + basis_state("1")) / std::sqrt(2.0);
  CHECK(trace_distance(a * a.adjoint(), b * b.adjoint()) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(trace_distance(a * a.adjoint(), basis_state("1") * basis_state("1").adjoint()) == doctest::Approx(1.0));
  CHECK(trace_distance(a * a.adjoint(), a * a.adjoint()) == 0.0);
}

TEST_CASE("pairwise concurrence series of the Bell preset") {
  const Vec psi = (basis_state("110") + basis_state("000")) / std::sqrt(2.0);
  const auto cs = pairwise_concurrence_series({0.0}, {psi * psi.adjoint()}, {{1, 2}, {1, 3}, {2, 3}});
  CHECK(cs[0].values[0] == doctest::Approx(1.0));
  CHECK(cs[1].values[0] == doctest::Approx(0.0));
  CHECK(cs[2].values[0] == doctest::Approx(0.0));
}

TEST_CASE("closed-form single-qubit population") {
  // frozen from a direct Volterra integration of c' = -int alpha(t-s) e^{i w (t-s)} c(s) ds
  CHECK(single_qubit_benchmark(0.4, 1.0, {2.0})[0] == doctest::Approx(0.6214311850).epsilon(1e-8));
  CHECK(single_qubit_benchmark(0.4, 0.0, {3.0})[0] == doctest::Approx(0.2066821630).epsilon(1e-8));
  CHECK(single_qubit_benchmark(0.4, 1.0, {0.0}, 1.0, 0.3)[0] == doctest::Approx(0.3));
}

TEST_CASE("extrema counting") {
  std::vector<double> v;
  for (int i = 0; i <= 1000; ++i) v.push_back(std::sin(0.01 * i * 3.0));  // 3 rad/unit over [0, 10]
  CHECK(count_local_extrema(v) == 10);
  std::vector<double> noisy = v;
  for (size_t i = 0; i < noisy.size(); ++i) noisy[i] += 1e-4 * ((i % 2) ? 1 : -1);
  CHECK(count_local_extrema(noisy, 1e-3) == 10);
  CHECK(count_local_extrema({0.0, 1.0, 1.0, 1.0, 0.0}) == 1);
  CHECK(count_local_extrema({1.0, 2.0, 3.0}) == 0);
}

}
