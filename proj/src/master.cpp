#include "nmqsd/master.hpp"

#include <algorithm>

namespace nmqsd {

// ---------------------------------------------------------------- factorized R

void RKernel::add_term(Mat& out, const Mat& left, const Mat& rho, int row, int col) {
  // left * rho * |col><row|: only column `row` of the result is nonzero.
  out.col(row) += left * rho.col(col);
}

RKernel RKernel::build(const OHierarchy& h) {
  RKernel rk;
  rk.t_ = h.t();
  const int dim = h.spec().dim();
  rk.obar0_dag_ = h.Obar0().dense().adjoint();
  if (h.depth() < 1) return rk;
  if (!h.has_fields()) throw ConfigError("assemble_R: the hierarchy must store its O fields for N > 1");

  const GridKernel& gk = h.grid_kernel();
  const int i = h.index();
  const int n = i + 1;
  const int K0 = h.k0(), K1 = h.k1(), K2 = h.k2();
  const auto& lay0 = h.layout0();
  const auto& lay1 = h.layout1();
  Vec w(n);
  for (int c = 0; c < n; ++c) w(c) = gk.weight(i, c);

  // B(c) = int alpha(c, c') O0(c'), C(b) = int alpha(b, a) Obar1(a)
  Mat B(n, K0), C(n, K1);
  for (int k = 0; k < K0; ++k) gk.transform(i, h.o0(k), B.col(k).data());
  for (int l = 0; l < K1; ++l) gk.transform(i, h.obar1(l), C.col(l).data());
  rk.cost_ += static_cast<double>(K0 + K1) * n;

  // (ii): sum_c w_c O0(c) rho C(c)^dag = sum_l (sum_k Z_kl E_k) rho E_l^dag
  Mat O0w(n, K0);
  for (int k = 0; k < K0; ++k) O0w.col(k) = w.cwiseProduct(Eigen::Map<const Vec>(h.o0(k), n));
  const Mat Z = O0w.transpose() * C.conjugate();  // K0 x K1
  rk.cost_ += static_cast<double>(K0) * K1 * n;
  for (int l = 0; l < K1; ++l) {
    Mat x = Mat::Zero(dim, dim);
    for (int k = 0; k < K0; ++k) {
      const auto [r, c] = lay0->entry(k);
      x(r, c) += Z(k, l);
    }
    const auto [r, c] = lay1->entry(l);
    rk.term2_.push_back({r, c, std::move(x)});
  }
  if (h.depth() < 2) return rk;

  const auto& lay2 = h.layout2();
  const BilinearTable cb = BilinearTable::build(lay1, lay0, lay2);
  const BilinearTable oo = BilinearTable::build(lay0, lay0, lay1);
  Mat Cw = C, Bw = B;
  for (int l = 0; l < K1; ++l) Cw.col(l) = w.cwiseProduct(C.col(l));
  for (int k = 0; k < K0; ++k) Bw.col(k) = w.cwiseProduct(B.col(k));

  Mat O0m(n, K0);
  for (int k = 0; k < K0; ++k) O0m.col(k) = Eigen::Map<const Vec>(h.o0(k), n);
  Mat q(n, n), T(n, n), Tt(n, n), Ebar(n, n), Ew(n, n), qe(2, K1);
  for (int e = 0; e < K2; ++e) {
    // (iii): weighted q_e(b, c) = sum over C_l(b) B_k(c) products landing on e
    std::vector<std::pair<int, int>> pairs;
    for (const auto& [o, l, k] : cb.terms)
      if (o == e) pairs.emplace_back(l, k);
    Mat cl(n, static_cast<Eigen::Index>(pairs.size())), bk(n, static_cast<Eigen::Index>(pairs.size()));
    for (size_t p = 0; p < pairs.size(); ++p) {
      cl.col(static_cast<Eigen::Index>(p)) = Cw.col(pairs[p].first);
      bk.col(static_cast<Eigen::Index>(p)) = Bw.col(pairs[p].second);
    }
    q.noalias() = cl * bk.transpose();
    rk.cost_ += static_cast<double>(pairs.size()) * n * n;

    // (iv): Ebar = K Obar2 K^T, column transforms then row transforms
    for (int s2 = 0; s2 < n; ++s2) gk.transform(i, h.obar2(e, s2), T.col(s2).data());
    Tt = T.transpose();
    for (int c = 0; c < n; ++c) gk.transform(i, Tt.col(c).data(), Ebar.col(c).data());
    rk.cost_ += 2.0 * n * n;
    // weighted: Ew(c, d) = w_c w_d Ebar(c, d)
    Ew.noalias() = w.asDiagonal() * Ebar * w.asDiagonal();

    // a3_m = <q, O1_m>, a4_m = <Ew, O1_m> over (b, c), one pass over O1
    qe.setZero();
    Mat qc(n, 2);
    for (int c = 0; c < n; ++c) {
      qc.col(0) = q.col(c);
      qc.col(1) = Ew.col(c);
      Eigen::Map<const Mat, 0, Eigen::OuterStride<>> o1c(h.o1(c, 0), n, K1,
                                                       Eigen::OuterStride<>(static_cast<Eigen::Index>(h.capacity())));
      qe.noalias() += qc.adjoint() * o1c;
    }
    Mat g3 = Mat::Zero(dim, dim), g4 = Mat::Zero(dim, dim);
    for (int m = 0; m < K1; ++m) {
      const auto [r, cc] = lay1->entry(m);
      g3(r, cc) += qe(0, m);
      g4(r, cc) += qe(1, m);
    }
    rk.cost_ += 2.0 * K1 * n * n;
    // O0(c) O0(d) part of (iv)
    const Mat Y = Ew.conjugate() * O0m;
    rk.cost_ += static_cast<double>(K0) * n * n;
    for (const auto& [m, k, kk] : oo.terms) {
      const cplx v = O0m.col(k).transpose() * Y.col(kk);
      const auto [r, cc] = lay1->entry(m);
      g4(r, cc) += v;
    }
    const auto [r, c] = lay2->entry(e);
    rk.term3_.push_back({r, c, std::move(g3)});
    rk.term4_.push_back({r, c, std::move(g4)});
  }
  return rk;
}

Mat RKernel::apply(const Mat& rho) const {
  Mat R = rho * obar0_dag_;
  for (const auto* terms : {&term2_, &term3_, &term4_})
    for (const auto& f : *terms) add_term(R, f.left, rho, f.row, f.col);
  return R;
}

RAssembly RKernel::assemble(const Mat& rho) const {
  RAssembly a;
  const auto dim = rho.rows();
  a.terms[0] = rho * obar0_dag_;
  int idx = 1;
  for (const auto* terms : {&term2_, &term3_, &term4_}) {
    Mat& m = a.terms[static_cast<size_t>(idx++)];
    m = Mat::Zero(dim, dim);
    for (const auto& f : *terms) add_term(m, f.left, rho, f.row, f.col);
  }
  a.R = a.terms[0] + a.terms[1] + a.terms[2] + a.terms[3];
  a.quadrature_cost = cost_;
  return a;
}

RAssembly assemble_R(const OHierarchy& h, const Mat& rho) { return RKernel::build(h).assemble(rho); }

// ---------------------------------------------------------------- brute force

RAssembly assemble_R_bruteforce(const OHierarchy& h, const Mat& rho) {
  RAssembly a;
  const auto dim = rho.rows();
  for (auto& m : a.terms) m = Mat::Zero(dim, dim);
  a.terms[0] = rho * h.Obar0().dense().adjoint();
  if (h.depth() >= 1) {
    const GridKernel& gk = h.grid_kernel();
    const int i = h.index();
    const int n = i + 1;
    std::vector<Mat> o0(static_cast<size_t>(n)), o0d(static_cast<size_t>(n)), ob1d(static_cast<size_t>(n));
    for (int s = 0; s < n; ++s) {
      o0[static_cast<size_t>(s)] = h.O0(s).dense();
      o0d[static_cast<size_t>(s)] = o0[static_cast<size_t>(s)].adjoint();
      ob1d[static_cast<size_t>(s)] = h.Obar1(s).dense().adjoint();
    }
    auto w = [&](int s) { return gk.weight(i, s); };
    auto sz = [](int k) { return static_cast<size_t>(k); };

    // (ii) sum_{s1, s} w w alpha(s1, s) O0(s) rho Obar1(s1)^dag
    for (int s1 = 0; s1 < n; ++s1)
      for (int s = 0; s < n; ++s) a.terms[1] += w(s1) * w(s) * gk(s1, s) * o0[sz(s)] * rho * ob1d[sz(s1)];
    a.quadrature_cost += static_cast<double>(n) * n;

    // (iii) sum w^4 alpha(s1, s) conj(alpha(s2, s')) O1(s, s2) rho O0(s')^dag Obar1(s1)^dag
    std::vector<Mat> pq(sz(n * n));
    for (int sp = 0; sp < n; ++sp)
      for (int s1 = 0; s1 < n; ++s1) pq[sz(sp * n + s1)] = o0d[sz(sp)] * ob1d[sz(s1)];
    Mat acc(dim, dim);
    for (int s = 0; s < n; ++s)
      for (int s2 = 0; s2 < n; ++s2) {
        acc.setZero();
        for (int sp = 0; sp < n; ++sp)
          for (int s1 = 0; s1 < n; ++s1)
            acc += (w(s1) * w(sp) * gk(s1, s) * std::conj(gk(s2, sp))) * pq[sz(sp * n + s1)];
        a.terms[2] += w(s) * w(s2) * h.O1(s, s2).dense() * rho * acc;
      }
    a.quadrature_cost += static_cast<double>(n) * n * n * n;

    if (h.depth() >= 2) {
      // (iv) sum w^4 alpha(s1, s3) alpha(s2, s4) [O0(s3) O0(s4) + O1(s3, s4)] rho Obar2(s1, s2)^dag
      std::vector<Mat> ob2d(sz(n * n));
      for (int s1 = 0; s1 < n; ++s1)
        for (int s2 = 0; s2 < n; ++s2) ob2d[sz(s1 * n + s2)] = h.Obar2(s1, s2).dense().adjoint();
      for (int s3 = 0; s3 < n; ++s3)
        for (int s4 = 0; s4 < n; ++s4) {
          acc.setZero();
          for (int s1 = 0; s1 < n; ++s1)
            for (int s2 = 0; s2 < n; ++s2)
              acc += (w(s1) * w(s2) * gk(s1, s3) * gk(s2, s4)) * ob2d[sz(s1 * n + s2)];
          const Mat d = o0[sz(s3)] * o0[sz(s4)] + h.O1(s3, s4).dense();
          a.terms[3] += w(s3) * w(s4) * d * rho * acc;
        }
      a.quadrature_cost += static_cast<double>(n) * n * n * n;
    }
  }
  a.R = a.terms[0] + a.terms[1] + a.terms[2] + a.terms[3];
  return a;
}

// ---------------------------------------------------------------- propagation

Mat master_rhs(const Mat& rho, const Mat& R, const Mat& H, const Mat& L) {
  const Mat Rd = R.adjoint();
  const Mat Ld = L.adjoint();
  return -kI * (H * rho - rho * H) + (L * R - R * L) - (Ld * Rd - Rd * Ld);
}

void InvariantLog::merge(const InvariantLog& o) {
  max_trace_defect = std::max(max_trace_defect, o.max_trace_defect);
  max_hermiticity_defect = std::max(max_hermiticity_defect, o.max_hermiticity_defect);
  min_eigenvalue = std::min(min_eigenvalue, o.min_eigenvalue);
}

void log_state(InvariantLog& log, const Mat& rho) {
  log.max_trace_defect = std::max(log.max_trace_defect, std::abs(rho.trace() - 1.0));
  log.max_hermiticity_defect = std::max(log.max_hermiticity_defect, hermiticity_defect(rho));
  log.min_eigenvalue = std::min(log.min_eigenvalue, min_eigenvalue(0.5 * (rho + rho.adjoint())));
}

Mat step_master(const Mat& rho, const RKernel& r_now, const RKernel& r_next, const Mat& H, const Mat& L, double dt,
                double* asym) {
  const Mat f0 = master_rhs(rho, r_now.apply(rho), H, L);
  const Mat pred = rho + dt * f0;
  const Mat f1 = master_rhs(pred, r_next.apply(pred), H, L);
  Mat out = rho + 0.5 * dt * (f0 + f1);
  if (asym) *asym = hermiticity_defect(out);
  return 0.5 * (out + out.adjoint());
}

std::vector<StateSeries> propagate_master(const QubitSystemSpec& spec, const BathKernel& kernel,
                                          const std::vector<Mat>& rho0, const TimeGrid& grid,
                                          const MasterOptions& options) {
  if (options.output_stride < 1) throw ConfigError("master: output_stride must be >= 1");
  HierarchyOptions ho = options.hierarchy;
  ho.store_fields = spec.n_qubits > 1;
  OHierarchy h(spec, kernel, grid, ho);
  const Mat H = h.H().dense();
  const Mat L = h.L().dense();

  std::vector<StateSeries> out(rho0.size());
  std::vector<Mat> rho = rho0;
  for (size_t k = 0; k < rho.size(); ++k) {
    if (rho[k].rows() != spec.dim() || rho[k].cols() != spec.dim())
      throw ConfigError("master: initial state has the wrong dimension");
    out[k].t.push_back(0.0);
    out[k].rho.push_back(rho[k]);
    log_state(out[k].log, rho[k]);
  }
  RKernel r_now = RKernel::build(h);
  for (int i = 0; i + 1 < grid.n_nodes; ++i) {
    h.step();
    if (options.on_step) options.on_step(h);
    RKernel r_next = RKernel::build(h);
    for (size_t k = 0; k < rho.size(); ++k) {
      double asym = 0.0;
      rho[k] = step_master(rho[k], r_now, r_next, H, L, grid.dt, &asym);
      auto& lg = out[k].log;
      lg.max_hermiticity_defect = std::max(lg.max_hermiticity_defect, asym);
      const double tr = std::abs(rho[k].trace() - 1.0);
      if (!std::isfinite(tr) || tr > options.trace_abort)
        throw NumericalError("master: trace drift " + std::to_string(tr) + " at t = " + std::to_string(h.t()));
      lg.max_trace_defect = std::max(lg.max_trace_defect, tr);
      if ((i + 1) % options.output_stride == 0) {
        lg.min_eigenvalue = std::min(lg.min_eigenvalue, min_eigenvalue(rho[k]));
        out[k].t.push_back(h.t());
        out[k].rho.push_back(rho[k]);
      }
    }
    r_now = std::move(r_next);
  }
  return out;
}

StateSeries propagate_master(const QubitSystemSpec& spec, const BathKernel& kernel, const Mat& rho0,
                             const TimeGrid& grid, const MasterOptions& options) {
  return propagate_master(spec, kernel, std::vector<Mat>{rho0}, grid, options).front();
}

std::vector<StateSeries> lindblad_propagate(const QubitSystemSpec& spec, const std::vector<Mat>& rho0,
                                            const TimeGrid& grid, int output_stride, double rate) {
  if (output_stride < 1) throw ConfigError("lindblad: output_stride must be >= 1");
  const Mat H = build_system_hamiltonian(spec).dense();
  const Mat L = build_lindblad_operator(spec).dense();
  const Mat Ld = L.adjoint();
  const Mat LdL = Ld * L;
  auto f = [&](const Mat& r) -> Mat {
    return -kI * (H * r - r * H) + rate * (2.0 * L * r * Ld - LdL * r - r * LdL);
  };
  std::vector<StateSeries> out;
  for (const Mat& r0 : rho0) {
    if (r0.rows() != spec.dim()) throw ConfigError("lindblad: initial state has the wrong dimension");
    StateSeries s;
    Mat r = r0;
    s.t.push_back(0.0);
    s.rho.push_back(r);
    log_state(s.log, r);
    const double dt = grid.dt;
    for (int i = 0; i + 1 < grid.n_nodes; ++i) {
      const Mat k1 = f(r);
      const Mat k2 = f(r + 0.5 * dt * k1);
      const Mat k3 = f(r + 0.5 * dt * k2);
      const Mat k4 = f(r + dt * k3);
      r += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      s.log.max_hermiticity_defect = std::max(s.log.max_hermiticity_defect, hermiticity_defect(r));
      r = 0.5 * (r + r.adjoint());
      if ((i + 1) % output_stride == 0) {
        s.t.push_back(grid.t(i + 1));
        s.rho.push_back(r);
        log_state(s.log, r);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

StateSeries lindblad_propagate(const QubitSystemSpec& spec, const Mat& rho0, const TimeGrid& grid, int output_stride,
                               double rate) {
  return lindblad_propagate(spec, std::vector<Mat>{rho0}, grid, output_stride, rate).front();
}

}  // namespace nmqsd
