#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "nmqsd/hierarchy.hpp"

using namespace nmqsd;

namespace {

HierarchyOptions with(ObarClosure c, Storage s = Storage::graded, double perturb = 0.0) {
  HierarchyOptions o;
  o.closure = c;
  o.storage = s;
  o.grading_perturbation = perturb;
  return o;
}

}  // namespace

TEST_SUITE("hierarchy") {

TEST_CASE("depth follows the qubit count") {
  const BathKernel k = BathKernel::ornstein_uhlenbeck(0.4);
  const TimeGrid g{0.05, 5};
  CHECK(OHierarchy(QubitSystemSpec::uniform(1), k, g).depth() == 0);
  CHECK(OHierarchy(QubitSystemSpec::uniform(2), k, g).depth() == 1);
  CHECK(OHierarchy(QubitSystemSpec::uniform(3), k, g).depth() == 2);
}

TEST_CASE("boundary conditions hold along the run") {
  for (auto c : {ObarClosure::quadrature, ObarClosure::auxiliary}) {
    OHierarchy h(QubitSystemSpec::uniform(3, 1.0, 1.0, 0.3), BathKernel::ornstein_uhlenbeck(0.7), TimeGrid{0.02, 41},
                 with(c));
    CHECK(h.boundary_residual() < 1e-14);
    for (int i = 0; i < 40; ++i) {
      h.step();
      REQUIRE(h.boundary_residual() < 1e-12);
    }
    CHECK(h.O0(h.index()).dense().isApprox(build_lindblad_operator(h.spec()).dense()));
    CHECK(max_abs(h.O1(h.index(), 7)) == 0.0);
  }
}

TEST_CASE("quadrature and auxiliary closures agree to second order") {
  for (int n : {1, 2, 3}) {
    const QubitSystemSpec spec = QubitSystemSpec::uniform(n, 1.0, 1.0, n > 1 ? 0.3 : 0.0);
    const BathKernel k = BathKernel::ornstein_uhlenbeck(0.7);
    double diff[2];
    for (int r = 0; r < 2; ++r) {
      const double dt = r == 0 ? 0.04 : 0.02;
      const int steps = static_cast<int>(std::lround(1.0 / dt));
      OHierarchy hq(spec, k, TimeGrid{dt, steps + 1}, with(ObarClosure::quadrature));
      OHierarchy ha(spec, k, TimeGrid{dt, steps + 1}, with(ObarClosure::auxiliary));
      hq.run_to(steps);
      ha.run_to(steps);
      double d = max_abs(hq.Obar0() - ha.Obar0());
      for (int s = 0; s <= steps && n > 1; ++s) d = std::max(d, max_abs(hq.Obar1(s) - ha.Obar1(s)));
      diff[r] = d;
    }
    INFO("n = " << n << " diffs " << diff[0] << " " << diff[1]);
    CHECK(diff[1] < 1e-3);
    CHECK(diff[0] / diff[1] > 3.0);
  }
}

TEST_CASE("forbidden products vanish for N = 3 with both closures") {
  for (auto c : {ObarClosure::quadrature, ObarClosure::auxiliary}) {
    OHierarchy h(QubitSystemSpec::uniform(3, 1.0, 1.0, 0.2), BathKernel::ornstein_uhlenbeck(0.4), TimeGrid{0.05, 31},
                 with(c));
    double worst = 0.0;
    for (int i = 0; i < 30; ++i) {
      h.step();
      const ForbiddenReport r = h.check_forbidden();
      CHECK(r.applicable);
      worst = std::max(worst, r.max_residual());
      worst = std::max(worst, h.grading_defects().max());
    }
    CHECK(worst <= 1e-10);
  }
}

TEST_CASE("forbidden set is empty for N = 1") {
  OHierarchy h(QubitSystemSpec::uniform(1), BathKernel::ornstein_uhlenbeck(0.4), TimeGrid{0.05, 5});
  h.run_to(4);
  CHECK_FALSE(h.check_forbidden().applicable);
}

TEST_CASE("dense storage reproduces graded storage") {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(3, 1.0, 1.0, 0.2);
  const BathKernel k = BathKernel::ornstein_uhlenbeck(1.5);
  OHierarchy g(spec, k, TimeGrid{0.05, 21}, with(ObarClosure::auxiliary));
  OHierarchy d(spec, k, TimeGrid{0.05, 21}, with(ObarClosure::auxiliary, Storage::dense));
  g.run_to(20);
  d.run_to(20);
  CHECK(max_abs(g.Obar0().relayout(Layout::full(3)) - d.Obar0()) < 1e-13);
  CHECK(d.grading_defects().max() < 1e-13);
  CHECK(d.check_forbidden().max_residual() < 1e-10);
}

TEST_CASE("grading-violating perturbation is detected (negative control)") {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(2);
  OHierarchy h(spec, BathKernel::ornstein_uhlenbeck(0.4), TimeGrid{0.05, 11},
               with(ObarClosure::auxiliary, Storage::dense, 1e-6));
  h.run_to(10);
  CHECK(h.grading_defects().max() > 1e-8);
  CHECK_THROWS_AS(OHierarchy(spec, BathKernel::ornstein_uhlenbeck(0.4), TimeGrid{0.05, 11},
                             with(ObarClosure::auxiliary, Storage::graded, 1e-6)),
                  ConfigError);
}

TEST_CASE("large gamma drives Obar0 to L / 2") {
  OHierarchy h(QubitSystemSpec::uniform(1), BathKernel::ornstein_uhlenbeck(50.0), TimeGrid{0.001, 3001});
  h.run_to(3000);
  const Mat expect = 0.5 * build_lindblad_operator(h.spec()).dense();
  CHECK((h.Obar0().dense() - expect).cwiseAbs().maxCoeff() < 0.02);
}

TEST_CASE("Obar history records every stride-th node") {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(2);
  const BathKernel k = BathKernel::ornstein_uhlenbeck(0.4);
  const ObarHistory hist = ObarHistory::compute(spec, k, TimeGrid{0.01, 51}, 5);
  CHECK(hist.recorded() == 11);
  CHECK(hist.grid().dt == doctest::Approx(0.05));
  OHierarchy h(spec, k, TimeGrid{0.01, 51});
  h.run_to(25);
  const Operator b0 = h.Obar0();
  for (int c = 0; c < hist.k0(); ++c) CHECK(std::abs(hist.obar0(5)[static_cast<size_t>(c)] - b0.values()[static_cast<size_t>(c)]) < 1e-14);
  CHECK(hist.obar1(5).cols() == 6);
}

TEST_CASE("checkpoint round trip") {
  HierarchyOptions o = with(ObarClosure::quadrature);
  OHierarchy h(QubitSystemSpec::uniform(3), BathKernel::ornstein_uhlenbeck(0.4), TimeGrid{0.1, 11}, o);
  h.run_to(6);
  const std::string path = (std::filesystem::temp_directory_path() / "nmqsd_ckpt_test.bin").string();
  write_checkpoint(h, path);
  const Checkpoint ck = read_checkpoint(path);
  std::remove(path.c_str());
  CHECK(ck.n_qubits == 3);
  CHECK(ck.depth == 2);
  CHECK(ck.index == 6);
  CHECK(ck.dt == 0.1);
  CHECK(ck.closure == "quadrature");
  const auto& o0 = ck.field("o0");
  REQUIRE(o0.extents == std::vector<std::uint64_t>{static_cast<std::uint64_t>(h.k0()), 7});
  for (int k = 0; k < h.k0(); ++k)
    for (int s = 0; s < 7; ++s) CHECK(o0.values[static_cast<size_t>(k * 7 + s)] == h.o0(k)[s]);
  const auto& ob2 = ck.field("obar2");
  CHECK(ob2.values[5 * 7 + 3] == h.obar2(0, 5)[3]);
  CHECK_NOTHROW(ck.field("o2_packed"));
  CHECK_THROWS_AS(ck.field("nope"), ConfigError);
}

}
