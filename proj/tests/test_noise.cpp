#include <doctest.h>

#include "nmqsd/noise.hpp"

using namespace nmqsd;

TEST_SUITE("noise") {

TEST_CASE("OU kernel values") {
  const BathKernel k = BathKernel::ornstein_uhlenbeck(2.0);
  CHECK(std::abs(k.lag(1.0) - std::exp(-2.0)) < 1e-15);
  CHECK(std::abs(k.lag(0.0) - 1.0) < 1e-15);
  CHECK(std::abs(k.eval(0.3, 1.3) - std::exp(-2.0)) < 1e-15);
  CHECK_THROWS_AS(BathKernel::ornstein_uhlenbeck(-1.0).validate(), ConfigError);
}

TEST_CASE("tabulated kernel interpolates and conjugates negative lags") {
  const BathKernel k = BathKernel::tabulated(0.5, {cplx(1, 0), cplx(0.5, 0.5), cplx(0, 0)});
  CHECK(std::abs(k.lag(0.25) - cplx(0.75, 0.25)) < 1e-15);
  CHECK(std::abs(k.lag(-0.5) - cplx(0.5, -0.5)) < 1e-15);
}

TEST_CASE("grid kernel transform equals the explicit trapezoid sum") {
  const TimeGrid g{0.1, 12};
  const GridKernel gk(BathKernel::ornstein_uhlenbeck(0.8), g);
  std::vector<cplx> x(12), y(12);
  for (int b = 0; b < 12; ++b) x[static_cast<size_t>(b)] = cplx(std::sin(b), std::cos(0.3 * b));
  const int i = 9;
  gk.transform(i, x.data(), y.data());
  for (int a = 0; a <= i; ++a) {
    cplx s = 0;
    for (int b = 0; b <= i; ++b) s += trapezoid_weight(g, i, b) * BathKernel::ornstein_uhlenbeck(0.8).eval(g.t(a), g.t(b)) * x[static_cast<size_t>(b)];
    CHECK(std::abs(y[static_cast<size_t>(a)] - s) < 1e-13);
  }
  CHECK(std::abs(gk.convolve_row(i, x.data()) - y[static_cast<size_t>(i)]) < 1e-13);
}

TEST_CASE("sampler factor reproduces the Gram matrix") {
  const TimeGrid g{0.05, 41};
  const BathKernel k = BathKernel::ornstein_uhlenbeck(0.4);
  const NoiseSampler s(k, g);
  const Mat gram = GridKernel(k, g).gram(41);
  CHECK(((s.factor() * s.factor().adjoint()) - gram).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("paths are deterministic in the seed and distinct across trajectories") {
  const TimeGrid g{0.1, 21};
  const NoiseSampler s(BathKernel::ornstein_uhlenbeck(0.4), g);
  const auto a = s.sample(trajectory_seed(7, 3)), b = s.sample(trajectory_seed(7, 3)), c = s.sample(trajectory_seed(7, 4));
  CHECK(a.values == b.values);
  CHECK(a.values != c.values);
  CHECK(trajectory_seed(1, 0) != trajectory_seed(2, 0));
}

TEST_CASE("sample statistics: M[z_t z*_s] = alpha(t, s), M[z_t z_s] = 0") {
  const TimeGrid g{0.25, 9};
  const BathKernel k = BathKernel::ornstein_uhlenbeck(1.5);
  const NoiseSampler s(k, g);
  const int n = 40000;
  Mat cov = Mat::Zero(9, 9), pcov = Mat::Zero(9, 9);
  std::vector<cplx> z(9);
  for (int j = 0; j < n; ++j) {
    s.sample_into(trajectory_seed(11, static_cast<std::uint64_t>(j)), z.data());
    for (int a = 0; a < 9; ++a)
      for (int b = 0; b < 9; ++b) {
        // stored values are z*, so z_a z*_b = conj(v_a) v_b
        cov(a, b) += std::conj(z[static_cast<size_t>(a)]) * z[static_cast<size_t>(b)];
        pcov(a, b) += z[static_cast<size_t>(a)] * z[static_cast<size_t>(b)];
      }
  }
  cov /= n;
  pcov /= n;
  const double se = 0.75 / std::sqrt(n);  // |alpha| <= 0.75
  for (int a = 0; a < 9; ++a)
    for (int b = 0; b < 9; ++b) {
      CHECK(std::abs(cov(a, b) - k.eval(g.t(a), g.t(b))) < 6 * se);
      CHECK(std::abs(pcov(a, b)) < 6 * se);
    }
}

TEST_CASE("standard complex normals have unit variance and no pseudo-variance") {
  std::vector<cplx> x(200000);
  standard_complex_normals(42, x.data(), x.size());
  cplx m = 0, p = 0;
  double v = 0;
  for (auto z : x) {
    m += z;
    v += std::norm(z);
    p += z * z;
  }
  const double n = static_cast<double>(x.size());
  CHECK(std::abs(m / n) < 0.015);
  CHECK(std::abs(v / n - 1.0) < 0.02);
  CHECK(std::abs(p / n) < 0.015);
}

TEST_CASE("bath discretization reconstructs the OU kernel") {
  const BathKernel k = BathKernel::ornstein_uhlenbeck(0.4);
  const double hw = default_mode_window(0.4, 120, 10.0);
  const BathModeSet m = discretize_bath_modes(k, 120, hw, 10.0, 0.05);
  CHECK(m.omega.size() == 120);
  CHECK(m.reconstruction_error / 0.2 < 0.05);
  // A window that is far too narrow must be rejected.
  CHECK_THROWS_AS(discretize_bath_modes(k, 120, 0.05, 10.0, 0.05), NumericalError);
}

}
