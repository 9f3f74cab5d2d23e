#include <doctest.h>

#include <random>

#include "nmqsd/operators.hpp"
#include "reference.hpp"

using namespace nmqsd;

TEST_SUITE("operators") {

TEST_CASE("hamiltonian matches the Kronecker construction") {
  for (int n = 1; n <= 3; ++n) {
    QubitSystemSpec spec = QubitSystemSpec::uniform(n);
    spec.omega = std::vector<double>{0.7, 1.3, 2.1};
    spec.omega.resize(static_cast<size_t>(n));
    spec.j_xy = 0.37;
    const Mat h = build_system_hamiltonian(spec).dense();
    CHECK((h - ref::hamiltonian(n, spec.omega, spec.j_xy)).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("XY coupling element <10|H|01> = 2 J") {
  const double j = 0.25;
  const Mat h = build_system_hamiltonian(QubitSystemSpec::uniform(2, 1.0, 1.0, j)).dense();
  CHECK(std::abs(h(2, 1) - cplx(2.0 * j)) < 1e-15);
  CHECK(std::abs(h(0, 3)) == 0.0);
}

TEST_CASE("lowering operator: <000|L^3|111> = 6 for unit kappas") {
  const Operator l = build_lindblad_operator(QubitSystemSpec::uniform(3));
  const Mat l3 = l.dense() * l.dense() * l.dense();
  CHECK(std::abs(l3(0, 7) - 6.0) < 1e-14);
  CHECK((l.dense() - ref::lindblad_op(3, {1, 1, 1})).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(l.grading() == 1);
}

TEST_CASE("graded layouts hold exactly the sector-shifting entries") {
  const int n = 3;
  for (int d = -3; d <= 3; ++d) {
    const auto lay = Layout::graded(n, d);
    int count = 0;
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) {
        const bool in = excitation_count(c) - excitation_count(r) == d;
        CHECK((lay->slot(r, c) >= 0) == in);
        count += in;
      }
    CHECK(lay->size() == count);
  }
  CHECK(Layout::graded(3, 3)->size() == 1);
  CHECK(Layout::graded(3, 0)->size() == 20);  // 1 + 9 + 9 + 1
}

TEST_CASE("operator algebra agrees with dense arithmetic") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  auto random_op = [&](int g) {
    Operator op(Layout::graded(3, g));
    for (auto& v : op.values()) v = cplx(nd(rng), nd(rng));
    return op;
  };
  const Operator a = random_op(1), b = random_op(1), c = random_op(-1);
  CHECK(((a * b).dense() - a.dense() * b.dense()).cwiseAbs().maxCoeff() < 1e-13);
  CHECK((a * b).grading() == 2);
  CHECK(commutator(a, c).grading() == 0);
  CHECK((commutator(a, c).dense() - (a.dense() * c.dense() - c.dense() * a.dense())).cwiseAbs().maxCoeff() < 1e-13);
  CHECK((a.adjoint().dense() - a.dense().adjoint()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.adjoint().grading() == -1);
  CHECK(((a + b).dense() - (a.dense() + b.dense())).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("from_dense rejects entries outside the layout") {
  Mat m = Mat::Zero(4, 4);
  m(0, 1) = 1.0;  // grading +1
  CHECK_NOTHROW(Operator::from_dense(m, Layout::graded(2, 1)));
  CHECK_THROWS_AS(Operator::from_dense(m, Layout::graded(2, 0)), ConfigError);
}

TEST_CASE("linear map applies the same contraction as dense products") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  const auto l0 = Layout::graded(3, 1), l1 = Layout::graded(3, 2);
  Operator a(Layout::graded(3, 1));
  for (auto& v : a.values()) v = cplx(nd(rng), nd(rng));
  const BilinearTable t = BilinearTable::build(a.layout(), l0, l1);
  LinearMap m(l1->size(), l0->size());
  m.add_left_product(t, a.values(), cplx(0.5, -1.0));
  m.finalize();
  const size_t len = 7;
  std::vector<cplx> in(static_cast<size_t>(l0->size()) * len), out(static_cast<size_t>(l1->size()) * len, 0.0);
  for (auto& v : in) v = cplx(nd(rng), nd(rng));
  m.apply(in.data(), len, out.data(), len, len);
  for (size_t x = 0; x < len; ++x) {
    Operator xin(l0);
    for (int k = 0; k < l0->size(); ++k) xin.values()[static_cast<size_t>(k)] = in[static_cast<size_t>(k) * len + x];
    const Mat expect = cplx(0.5, -1.0) * a.dense() * xin.dense();
    Operator got(l1);
    for (int k = 0; k < l1->size(); ++k) got.values()[static_cast<size_t>(k)] = out[static_cast<size_t>(k) * len + x];
    CHECK((got.dense() - expect).cwiseAbs().maxCoeff() < 1e-13);
  }
}

TEST_CASE("partial trace of W gives marginal excitation 1/3") {
  const Vec w = (basis_state("100") + basis_state("010") + basis_state("001")) / std::sqrt(3.0);
  const Mat rho = w * w.adjoint();
  for (int q = 1; q <= 3; ++q) {
    const Mat r1 = partial_trace(rho, 3, {q});
    CHECK(std::abs(r1(1, 1).real() - 1.0 / 3.0) < 1e-15);
  }
  const Mat r12 = partial_trace(rho, 3, {1, 2});
  CHECK(std::abs(r12.trace() - 1.0) < 1e-15);
  CHECK(std::abs(r12(1, 2) - 1.0 / 3.0) < 1e-15);
}

TEST_CASE("excitation grading of L, L^dag and H") {
  const QubitSystemSpec spec = QubitSystemSpec::uniform(3, 1.0, 1.0, 0.4);
  CHECK(grading_defect(build_lindblad_operator(spec).dense(), 3, 1) == 0.0);
  CHECK(grading_defect(build_lindblad_operator(spec).dense().adjoint(), 3, -1) == 0.0);
  CHECK(grading_defect(build_system_hamiltonian(spec).dense(), 3, 0) == 0.0);
  CHECK(grading_defect(build_system_hamiltonian(spec).dense(), 3, 1) > 0.0);
}

TEST_CASE("system validation") {
  QubitSystemSpec s = QubitSystemSpec::uniform(2);
  s.kappa.pop_back();
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK_THROWS_AS(QubitSystemSpec::uniform(0).validate(), ConfigError);
}

TEST_CASE("density matrix diagnostics") {
  DensityMatrix d = DensityMatrix::pure(basis_state("10"));
  CHECK(d.trace_defect() < 1e-15);
  CHECK_NOTHROW(d.validate());
  d.m(0, 1) = 0.1;
  CHECK(d.hermiticity_defect() > 0.05);
  CHECK_THROWS_AS(d.validate(), ConfigError);
}

}
