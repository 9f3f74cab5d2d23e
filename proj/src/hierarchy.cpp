#include "nmqsd/hierarchy.hpp"

#include <algorithm>
#include <random>
#include <thread>

namespace nmqsd {

std::string to_string(ObarClosure c) {
  switch (c) {
    case ObarClosure::automatic: return "automatic";
    case ObarClosure::quadrature: return "quadrature";
    case ObarClosure::auxiliary: return "auxiliary";
  }
  return "?";
}

std::string to_string(Storage s) { return s == Storage::graded ? "graded" : "dense"; }

double ForbiddenReport::max_residual() const {
  double m = 0.0;
  for (const auto& [k, v] : residuals) m = std::max(m, v);
  return m;
}

double GradingDefects::max() const { return std::max({o0, o1, o2, obar0, obar1, obar2}); }

// Coefficient maps that depend on the Obar fields at one time node.
struct OHierarchy::Maps {
  Operator A;                   // -iH - L^dag Obar0
  LinearMap ad0, ad1, ad2;      // X -> [A, X] (auxiliary closure: minus gamma X on the Obar maps below)
  LinearMap g1, g2;             // Obar ODE maps: -gamma X + [A, X] (+ -[L^dag X, Obar0] for lay2)
  LinearMap ob0_comm;           // X (lay0) -> [Obar0, X] (lay1)
  CVector ob0;        // Obar0 components
  CVector m;          // M(s1) = L^dag Obar1(s1), k0 x cap
  int n = 0;                    // number of valid s1 entries in m
};

namespace {

void zero(cplx* p, size_t n) { std::fill(p, p + n, cplx{}); }

void add_commutator_with(LinearMap& map, const BilinearTable& t_left, const BilinearTable& t_right,
                         std::span<const cplx> a, cplx coef) {
  // X -> coef * (a X - X a)
  map.add_left_product(t_left, a, coef);
  map.add_right_product(t_right, a, -coef);
}

}  // namespace

OHierarchy::OHierarchy(const QubitSystemSpec& spec, const BathKernel& kernel, const TimeGrid& grid,
                       HierarchyOptions options)
    : spec_(spec), grid_(grid), gk_(kernel, grid), options_(options) {
  spec_.validate();
  if (grid.n_nodes < 1) throw ConfigError("hierarchy: grid needs at least one node");
  depth_ = spec_.n_qubits - 1;
  if (depth_ > 2)
    throw ConfigError("hierarchy: depth " + std::to_string(depth_) +
                      " requested; the O expansion is implemented to depth 2 (N <= 3)");
  closure_ = options_.closure;
  if (closure_ == ObarClosure::automatic) closure_ = kernel.is_ou() ? ObarClosure::auxiliary : ObarClosure::quadrature;
  if (closure_ == ObarClosure::auxiliary && !kernel.is_ou())
    throw ConfigError("hierarchy: the auxiliary closure requires the OU kernel");
  if (closure_ == ObarClosure::quadrature) options_.store_fields = true;
  if (options_.grading_perturbation != 0.0 && options_.storage != Storage::dense)
    throw ConfigError("hierarchy: grading perturbation needs dense storage");
  if (options_.workers < 1) options_.workers = 1;
  cap_ = static_cast<size_t>(grid.n_nodes);
  init();
}

void OHierarchy::init() {
  const int n = spec_.n_qubits;
  if (options_.storage == Storage::graded) {
    lay0_ = Layout::graded(n, 1);
    lay1_ = Layout::graded(n, 2);
    lay2_ = Layout::graded(n, 3);
    layA_ = Layout::graded(n, 0);
    layLd_ = Layout::graded(n, -1);
  } else {
    lay0_ = lay1_ = lay2_ = layA_ = layLd_ = Layout::full(n);
  }
  colmap_ = {LinearMap(lay1_->size(), lay0_->size()), LinearMap(lay2_->size(), lay1_->size()),
             LinearMap(lay2_->size(), lay0_->size()), LinearMap(lay2_->size(), lay0_->size())};
  H_ = build_system_hamiltonian(spec_).relayout(layA_);
  L_ = build_lindblad_operator(spec_).relayout(lay0_);
  Ld_ = build_lindblad_operator(spec_).adjoint().relayout(layLd_);
  if (options_.grading_perturbation != 0.0) {
    Mat p = Mat::Zero(spec_.dim(), spec_.dim());
    p(spec_.dim() - 1, 0) = options_.grading_perturbation;
    perturbation_ = Operator::from_dense(p, lay0_);
  }

  const size_t c = cap_;
  double bytes = 16.0 * static_cast<double>(k0() * c + k1() * c + static_cast<size_t>(k2()) * c * c);
  if (options_.store_fields) {
    bytes += 16.0 * static_cast<double>(k0() * c + static_cast<size_t>(k1()) * c * c);
    if (has_o2_field()) bytes += 2.0 * 16.0 * static_cast<double>(k2()) * static_cast<double>(c * (c + 1) / 2 * c);
    if (closure_ == ObarClosure::quadrature) bytes *= 2.0;  // predictor copies
  }
  if (closure_ == ObarClosure::auxiliary) bytes += 16.0 * static_cast<double>(k1() * c + static_cast<size_t>(k2()) * c * c);
  if (bytes > options_.memory_budget_bytes)
    throw ConfigError("hierarchy: storage needs " + std::to_string(bytes / 1e9) + " GB, above the memory budget of " +
                      std::to_string(options_.memory_budget_bytes / 1e9) + " GB (reduce n_t or use graded storage)");

  t_A0_ = BilinearTable::build(layA_, lay0_, lay0_);
  t_0A_ = BilinearTable::build(lay0_, layA_, lay0_);
  t_A1_ = BilinearTable::build(layA_, lay1_, lay1_);
  t_1A_ = BilinearTable::build(lay1_, layA_, lay1_);
  t_A2_ = BilinearTable::build(layA_, lay2_, lay2_);
  t_2A_ = BilinearTable::build(lay2_, layA_, lay2_);
  t_00_1_ = BilinearTable::build(lay0_, lay0_, lay1_);
  t_01_2_ = BilinearTable::build(lay0_, lay1_, lay2_);
  t_10_2_ = BilinearTable::build(lay1_, lay0_, lay2_);
  t_Ld1_0_ = BilinearTable::build(layLd_, lay1_, lay0_);
  t_Ld2_1_ = BilinearTable::build(layLd_, lay2_, lay1_);
  t_Ld0_A_ = BilinearTable::build(layLd_, lay0_, layA_);

  ld_from1_ = LinearMap(lay0_->size(), lay1_->size());
  ld_from1_.add_left_product(t_Ld1_0_, Ld_.values(), 1.0);
  ld_from1_.finalize();
  ld_from2_ = LinearMap(lay1_->size(), lay2_->size());
  ld_from2_.add_left_product(t_Ld2_1_, Ld_.values(), 1.0);
  ld_from2_.finalize();
  l_comm01_ = LinearMap(lay1_->size(), lay0_->size());
  add_commutator_with(l_comm01_, t_00_1_, t_00_1_, L_.values(), 1.0);
  l_comm01_.finalize();
  l_comm12_ = LinearMap(lay2_->size(), lay1_->size());
  l_comm12_.add_left_product(t_01_2_, L_.values(), 1.0);
  l_comm12_.add_right_product(t_10_2_, L_.values(), -1.0);
  l_comm12_.finalize();

  ob0_.assign(static_cast<size_t>(k0()), cplx{});
  ob1_.assign(static_cast<size_t>(k1()) * c, cplx{});
  ob2_.assign(static_cast<size_t>(k2()) * c * c, cplx{});
  if (options_.store_fields) {
    o0_.assign(static_cast<size_t>(k0()) * c, cplx{});
    o1_.assign(static_cast<size_t>(k1()) * c * c, cplx{});
    if (has_o2_field()) o2_.assign(static_cast<size_t>(k2()) * (c * (c + 1) / 2) * c, cplx{});
    set_field_boundaries(0, o0_, o1_, o2_);
  }
  index_ = 0;
  // All convolutions vanish at t = 0.
  derived_ = std::make_shared<Maps>();
  build_derived(ob0_.data(), ob1_.data(), 1, *derived_);
}

size_t OHierarchy::o2_pair_offset(int c1, int c2) const {
  if (c1 > c2) std::swap(c1, c2);
  const size_t p = static_cast<size_t>(c2) * (c2 + 1) / 2 + static_cast<size_t>(c1);
  return p * static_cast<size_t>(k2()) * cap_;
}

const cplx* OHierarchy::o2(int c1, int c2, int comp) const {
  return &o2_[o2_pair_offset(c1, c2) + static_cast<size_t>(comp) * cap_];
}

void OHierarchy::parallel_columns(int n, const std::function<void(int)>& fn) const {
  const int w = std::min(options_.workers, n);
  if (w <= 1) {
    for (int c = 0; c < n; ++c) fn(c);
    return;
  }
  // Static interleaved split; every column is written by exactly one worker.
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(w));
  for (int k = 0; k < w; ++k)
    pool.emplace_back([&, k] {
      try {
        for (int c = k; c < n; c += w) fn(c);
      } catch (...) {
        errors[static_cast<size_t>(k)] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------- derived maps

void OHierarchy::build_derived(const cplx* ob0, const cplx* ob1, int n, Maps& d) const {
  d.n = n;
  d.ob0.assign(ob0, ob0 + k0());
  Operator obar0(lay0_, std::vector<cplx>(d.ob0.begin(), d.ob0.end()));
  Operator ld_ob0(layA_);
  {
    auto out = ld_ob0.values();
    for (const auto& [o, l, r] : t_Ld0_A_.terms)
      out[static_cast<size_t>(o)] += Ld_.values()[static_cast<size_t>(l)] * d.ob0[static_cast<size_t>(r)];
  }
  d.A = cplx{0.0, -1.0} * H_ - ld_ob0;

  auto ad = [&](LinearMap& m, const BilinearTable& tl, const BilinearTable& tr, int k) {
    m = LinearMap(k, k);
    add_commutator_with(m, tl, tr, d.A.values(), 1.0);
  };
  ad(d.ad0, t_A0_, t_0A_, lay0_->size());
  d.ad0.finalize();
  if (depth_ >= 1) {
    ad(d.ad1, t_A1_, t_1A_, lay1_->size());
    d.ad1.finalize();
  }
  if (depth_ >= 2) {
    ad(d.ad2, t_A2_, t_2A_, lay2_->size());
    d.ad2.finalize();
  }

  if (closure_ == ObarClosure::auxiliary) {
    const double gamma = gk_.kernel().gamma;
    if (depth_ >= 1) {
      ad(d.g1, t_A1_, t_1A_, lay1_->size());
      for (int k = 0; k < lay1_->size(); ++k) d.g1.add(k, k, -gamma);
      d.g1.finalize();
      d.ob0_comm = LinearMap(lay1_->size(), lay0_->size());
      add_commutator_with(d.ob0_comm, t_00_1_, t_00_1_, d.ob0, 1.0);
      d.ob0_comm.finalize();
    }
    if (depth_ >= 2) {
      ad(d.g2, t_A2_, t_2A_, lay2_->size());
      for (int k = 0; k < lay2_->size(); ++k) {
        d.g2.add(k, k, -gamma);
        // X = e_k -> -[L^dag X, Obar0]
        Operator e(lay2_);
        e.values()[static_cast<size_t>(k)] = 1.0;
        Operator y(lay1_);
        for (const auto& [o, l, r] : t_Ld2_1_.terms)
          y.values()[static_cast<size_t>(o)] += Ld_.values()[static_cast<size_t>(l)] * e.values()[static_cast<size_t>(r)];
        Operator z(lay2_);
        for (const auto& [o, l, r] : t_10_2_.terms)
          z.values()[static_cast<size_t>(o)] -= y.values()[static_cast<size_t>(l)] * d.ob0[static_cast<size_t>(r)];
        for (const auto& [o, l, r] : t_01_2_.terms)
          z.values()[static_cast<size_t>(o)] += d.ob0[static_cast<size_t>(l)] * y.values()[static_cast<size_t>(r)];
        for (int q = 0; q < lay2_->size(); ++q)
          if (z.values()[static_cast<size_t>(q)] != cplx{}) d.g2.add(q, k, z.values()[static_cast<size_t>(q)]);
      }
      d.g2.finalize();
    }
  }

  if (depth_ >= 1) {
    d.m.assign(static_cast<size_t>(k0()) * cap_, cplx{});
    ld_from1_.apply(ob1, cap_, d.m.data(), cap_, static_cast<size_t>(n));
  }
}

// ---------------------------------------------------------------- boundaries

void OHierarchy::set_field_boundaries(int i, CVector& o0, CVector& o1,
                                      CVector& o2) const {
  const size_t c = cap_;
  for (int k = 0; k < k0(); ++k) {
    cplx v = L_.values()[static_cast<size_t>(k)];
    if (options_.grading_perturbation != 0.0) v += perturbation_.values()[static_cast<size_t>(k)];
    o0[static_cast<size_t>(k) * c + static_cast<size_t>(i)] = v;
  }
  if (depth_ < 1) return;
  const int K1 = k1();
  // Row s = i of every older column vanishes; column i is [L, O0(s)].
  for (int col = 0; col < i; ++col)
    for (int k = 0; k < K1; ++k) o1[(static_cast<size_t>(col) * K1 + k) * c + static_cast<size_t>(i)] = 0.0;
  cplx* newcol = &o1[static_cast<size_t>(i) * K1 * c];
  for (int k = 0; k < K1; ++k) zero(newcol + static_cast<size_t>(k) * c, static_cast<size_t>(i) + 1);
  l_comm01_.apply(o0.data(), c, newcol, c, static_cast<size_t>(i) + 1);

  if (!has_o2_field() || o2.empty()) return;
  const int K2 = k2();
  for (int c2 = 0; c2 < i; ++c2)
    for (int c1 = 0; c1 <= c2; ++c1)
      for (int k = 0; k < K2; ++k) o2[o2_pair_offset(c1, c2) + static_cast<size_t>(k) * c + static_cast<size_t>(i)] = 0.0;
  for (int c1 = 0; c1 <= i; ++c1) {
    cplx* pair = &o2[o2_pair_offset(c1, i)];
    for (int k = 0; k < K2; ++k) zero(pair + static_cast<size_t>(k) * c, static_cast<size_t>(i) + 1);
    const cplx* col = &o1[static_cast<size_t>(c1) * K1 * c];
    l_comm12_.apply(col, c, pair, c, static_cast<size_t>(i) + 1);
    for (int k = 0; k < K2; ++k)
      for (int s = 0; s <= i; ++s) pair[static_cast<size_t>(k) * c + static_cast<size_t>(s)] *= 0.5;
  }
}

void OHierarchy::set_obar_boundaries(int i, const CVector& ob0, CVector& ob1,
                                     CVector& ob2) const {
  if (depth_ < 1) return;
  const size_t c = cap_;
  for (int k = 0; k < k1(); ++k) ob1[static_cast<size_t>(k) * c + static_cast<size_t>(i)] = 0.0;
  l_comm01_.apply(ob0.data(), 1, &ob1[static_cast<size_t>(i)], c, 1);
  if (depth_ < 2) return;
  const int K2 = k2();
  CVector tmp(static_cast<size_t>(K2) * (static_cast<size_t>(i) + 1));
  l_comm12_.apply(ob1.data(), c, tmp.data(), static_cast<size_t>(i) + 1, static_cast<size_t>(i) + 1);
  for (int k = 0; k < K2; ++k)
    for (int s = 0; s <= i; ++s) {
      const cplx v = 0.5 * tmp[static_cast<size_t>(k) * (static_cast<size_t>(i) + 1) + static_cast<size_t>(s)];
      ob2[(static_cast<size_t>(k) * c + static_cast<size_t>(i)) * c + static_cast<size_t>(s)] = v;
      ob2[(static_cast<size_t>(k) * c + static_cast<size_t>(s)) * c + static_cast<size_t>(i)] = v;
    }
}

// ---------------------------------------------------------------- derivatives

void OHierarchy::field_derivative_o0(const Maps& d, const cplx* o0, const cplx* ob1, int n, cplx* out) const {
  const size_t c = cap_;
  for (int k = 0; k < k0(); ++k) zero(out + static_cast<size_t>(k) * c, static_cast<size_t>(n));
  d.ad0.apply(o0, c, out, c, static_cast<size_t>(n));
  if (depth_ >= 1) {
    // - L^dag Obar1(s)
    for (const auto& e : ld_from1_.entries()) {
      Eigen::Map<Vec> y(out + static_cast<size_t>(e.out) * c, n);
      y -= e.v * Eigen::Map<const Vec>(ob1 + static_cast<size_t>(e.in) * c, n);
    }
  }
}

void OHierarchy::field_derivative_o1(const Maps& d, int col, const cplx* o1col, const cplx* o0, const cplx* ob2col,
                                     int n, cplx* out) const {
  const size_t c = cap_;
  for (int k = 0; k < k1(); ++k) zero(out + static_cast<size_t>(k) * c, static_cast<size_t>(n));
  d.ad1.apply(o1col, c, out, c, static_cast<size_t>(n));
  // - [M(col), O0(s)]
  CVector mcol(static_cast<size_t>(k0()));
  for (int k = 0; k < k0(); ++k) mcol[static_cast<size_t>(k)] = d.m[static_cast<size_t>(k) * c + static_cast<size_t>(col)];
  LinearMap& mm = colmap_[0];
  mm.reset();
  add_commutator_with(mm, t_00_1_, t_00_1_, mcol, -1.0);
  mm.finalize();
  mm.apply(o0, c, out, c, static_cast<size_t>(n));
  if (depth_ >= 2) {
    // - 2 L^dag Obar2(s, col); components of Obar2 are c*c apart.
    for (const auto& e : ld_from2_.entries()) {
      Eigen::Map<Vec> y(out + static_cast<size_t>(e.out) * c, n);
      y -= 2.0 * e.v * Eigen::Map<const Vec>(ob2col + static_cast<size_t>(e.in) * c * c, n);
    }
  }
}

void OHierarchy::field_derivative_o2(const Maps& d, int c1, int c2, const CVector& o1, const cplx* o0,
                                     const cplx* o2pair, const CVector& ob2, int n, cplx* out) const {
  const size_t c = cap_;
  const int K0 = k0(), K1 = k1(), K2 = k2();
  for (int k = 0; k < K2; ++k) zero(out + static_cast<size_t>(k) * c, static_cast<size_t>(n));
  d.ad2.apply(o2pair, c, out, c, static_cast<size_t>(n));
  auto mcol = [&](int s1) {
    CVector v(static_cast<size_t>(K0));
    for (int k = 0; k < K0; ++k) v[static_cast<size_t>(k)] = d.m[static_cast<size_t>(k) * c + static_cast<size_t>(s1)];
    return v;
  };
  // -(1/2)[M(a), O1(s, b)] for (a, b) = (c1, c2), (c2, c1)
  for (int pass = 0; pass < 2; ++pass) {
    const int a = pass == 0 ? c1 : c2;
    const int b = pass == 0 ? c2 : c1;
    auto ma = mcol(a);
    LinearMap& mm = colmap_[1];
    mm.reset();
    mm.add_left_product(t_01_2_, ma, -0.5);
    mm.add_right_product(t_10_2_, ma, 0.5);
    mm.finalize();
    mm.apply(&o1[static_cast<size_t>(b) * K1 * c], c, out, c, static_cast<size_t>(n));
  }
  // -[L^dag Obar2(c1, c2), O0(s)]
  CVector m2(static_cast<size_t>(K1));
  for (const auto& e : ld_from2_.entries())
    m2[static_cast<size_t>(e.out)] += e.v * ob2[(static_cast<size_t>(e.in) * c + static_cast<size_t>(c2)) * c + static_cast<size_t>(c1)];
  LinearMap& mm = colmap_[2];
  mm.reset();
  mm.add_left_product(t_10_2_, m2, -1.0);
  mm.add_right_product(t_01_2_, m2, 1.0);
  mm.finalize();
  mm.apply(o0, c, out, c, static_cast<size_t>(n));
}

void OHierarchy::obar_derivative(const Maps& d, int i, int n_out, const CVector& ob0,
                                 const CVector& ob1, const CVector& ob2, CVector& d0,
                                 CVector& d1, CVector& d2) const {
  const size_t c = cap_;
  const double gamma = gk_.kernel().gamma;
  const cplx a0 = gk_(0, 0);
  const int K0 = k0(), K1 = k1(), K2 = k2();
  const auto n = static_cast<size_t>(n_out);

  // Obar0: alpha(t,t) L - gamma Obar0 + [A, Obar0] - L^dag int alpha Obar1
  d0.assign(static_cast<size_t>(K0), cplx{});
  d.ad0.apply(ob0.data(), 1, d0.data(), 1, 1);
  for (int k = 0; k < K0; ++k)
    d0[static_cast<size_t>(k)] += a0 * L_.values()[static_cast<size_t>(k)] - gamma * ob0[static_cast<size_t>(k)];
  if (depth_ >= 1) {
    CVector c1(static_cast<size_t>(K1));
    for (int k = 0; k < K1; ++k) c1[static_cast<size_t>(k)] = gk_.convolve_row(i, &ob1[static_cast<size_t>(k) * c]);
    for (const auto& e : ld_from1_.entries()) d0[static_cast<size_t>(e.out)] -= e.v * c1[static_cast<size_t>(e.in)];
  }
  if (depth_ < 1) return;

  // Obar1(s1): (-gamma + ad_A) Obar1 + [Obar0, M(s1)] - 2 L^dag int alpha(t,s) Obar2(s, s1)
  d1.assign(static_cast<size_t>(K1) * c, cplx{});
  d.g1.apply(ob1.data(), c, d1.data(), c, n);
  d.ob0_comm.apply(d.m.data(), c, d1.data(), c, n);
  if (depth_ >= 2) {
    Vec v(i + 1);
    for (int s = 0; s <= i; ++s) v(s) = gk_.weight(i, s) * gk_(i, s);
    CVector c2(static_cast<size_t>(K2) * n);
    for (int k = 0; k < K2; ++k) {
      Eigen::Map<const Mat, 0, Eigen::OuterStride<>> m(&ob2[static_cast<size_t>(k) * c * c], i + 1, n_out,
                                                     Eigen::OuterStride<>(static_cast<Eigen::Index>(c)));
      Eigen::Map<Vec>(&c2[static_cast<size_t>(k) * n], n_out) = m.transpose() * v;
    }
    for (const auto& e : ld_from2_.entries()) {
      Eigen::Map<Vec> y(&d1[static_cast<size_t>(e.out) * c], n_out);
      y -= 2.0 * e.v * Eigen::Map<const Vec>(&c2[static_cast<size_t>(e.in) * n], n_out);
    }
  }
  if (depth_ < 2) return;

  // Obar2(s1, s2), column s2 at a time (vectors over s1).
  if (d2.size() != static_cast<size_t>(K2) * c * c) d2.resize(static_cast<size_t>(K2) * c * c);
  for (int k = 0; k < K2; ++k)
    for (int s2 = 0; s2 < n_out; ++s2) zero(&d2[(static_cast<size_t>(k) * c + static_cast<size_t>(s2)) * c], n);
  CVector ob1col(static_cast<size_t>(K1)), mcol(static_cast<size_t>(K0));
  for (int s2 = 0; s2 < n_out; ++s2) {
    cplx* out = &d2[static_cast<size_t>(s2) * c];
    const size_t stride = c * c;
    d.g2.apply(&ob2[static_cast<size_t>(s2) * c], stride, out, stride, n);
    for (int k = 0; k < K1; ++k) ob1col[static_cast<size_t>(k)] = ob1[static_cast<size_t>(k) * c + static_cast<size_t>(s2)];
    for (int k = 0; k < K0; ++k) mcol[static_cast<size_t>(k)] = d.m[static_cast<size_t>(k) * c + static_cast<size_t>(s2)];
    // -(1/2)[M(s1), Obar1(s2)] as a map on M(s1)
    LinearMap& a = colmap_[3];
    a.reset();
    a.add_right_product(t_01_2_, ob1col, -0.5);
    a.add_left_product(t_10_2_, ob1col, 0.5);
    a.finalize();
    a.apply(d.m.data(), c, out, stride, n);
    // -(1/2)[M(s2), Obar1(s1)] as a map on Obar1(s1)
    LinearMap& b = colmap_[1];
    b.reset();
    b.add_left_product(t_01_2_, mcol, -0.5);
    b.add_right_product(t_10_2_, mcol, 0.5);
    b.finalize();
    b.apply(ob1.data(), c, out, stride, n);
  }
}

// ---------------------------------------------------------------- quadrature closure

void OHierarchy::compute_quadrature_obar(int i, const CVector& o0, const CVector& o1,
                                         const CVector& o2, CVector& ob0, CVector& ob1,
                                         CVector& ob2) const {
  const size_t c = cap_;
  for (int k = 0; k < k0(); ++k) ob0[static_cast<size_t>(k)] = gk_.convolve_row(i, &o0[static_cast<size_t>(k) * c]);
  const int K1 = k1(), K2 = k2();
  for (int col = 0; col <= i; ++col)
    for (int k = 0; k < K1; ++k)
      ob1[static_cast<size_t>(k) * c + static_cast<size_t>(col)] =
          gk_.convolve_row(i, &o1[(static_cast<size_t>(col) * K1 + k) * c]);
  if (!has_o2_field()) return;
  for (int c2 = 0; c2 <= i; ++c2)
    for (int c1 = 0; c1 <= c2; ++c1)
      for (int k = 0; k < K2; ++k) {
        const cplx v = gk_.convolve_row(i, &o2[o2_pair_offset(c1, c2) + static_cast<size_t>(k) * c]);
        ob2[(static_cast<size_t>(k) * c + static_cast<size_t>(c2)) * c + static_cast<size_t>(c1)] = v;
        ob2[(static_cast<size_t>(k) * c + static_cast<size_t>(c1)) * c + static_cast<size_t>(c2)] = v;
      }
}

void OHierarchy::step_quadrature() {
  const int i = index_;
  const int n = i + 1;
  const double dt = grid_.dt;
  const size_t c = cap_;
  const int K0 = k0(), K1 = k1(), K2 = k2();
  const Maps& d = *derived_;

  auto axpy = [n](cplx* y, const cplx* x, cplx a, int comps, size_t stride) {
    for (int k = 0; k < comps; ++k)
      Eigen::Map<Vec>(y + static_cast<size_t>(k) * stride, n) += a * Eigen::Map<const Vec>(x + static_cast<size_t>(k) * stride, n);
  };

  // Stage 1: predictor on the old domain.
  CVector p0 = o0_, p1 = o1_, p2 = o2_;
  CVector f0(static_cast<size_t>(K0) * c);
  field_derivative_o0(d, o0_.data(), ob1_.data(), n, f0.data());
  axpy(p0.data(), f0.data(), dt, K0, c);
  parallel_columns(K1 > 0 ? n : 0, [&](int col) {
    CVector f(static_cast<size_t>(K1) * c);
    field_derivative_o1(d, col, &o1_[static_cast<size_t>(col) * K1 * c], o0_.data(),
                        K2 > 0 ? &ob2_[static_cast<size_t>(col) * c] : nullptr, n, f.data());
    axpy(&p1[static_cast<size_t>(col) * K1 * c], f.data(), dt, K1, c);
  });
  if (has_o2_field()) {
    parallel_columns(n, [&](int c2) {
      CVector f(static_cast<size_t>(K2) * c);
      for (int c1 = 0; c1 <= c2; ++c1) {
        const size_t off = o2_pair_offset(c1, c2);
        field_derivative_o2(d, c1, c2, o1_, o0_.data(), &o2_[off], ob2_, n, f.data());
        axpy(&p2[off], f.data(), dt, K2, c);
      }
    });
  }
  set_field_boundaries(i + 1, p0, p1, p2);
  CVector pb0(ob0_.size()), pb1(ob1_.size()), pb2(ob2_.size());
  compute_quadrature_obar(i + 1, p0, p1, p2, pb0, pb1, pb2);
  Maps dp;
  build_derived(pb0.data(), pb1.data(), n + 1, dp);

  // Stage 2: y <- (y + y_pred + dt f(y_pred)) / 2 on the old domain.
  auto combine = [n](cplx* y, const cplx* yp, const cplx* f, double dt2, int comps, size_t stride) {
    for (int k = 0; k < comps; ++k) {
      Eigen::Map<Vec> yy(y + static_cast<size_t>(k) * stride, n);
      yy = 0.5 * (yy + Eigen::Map<const Vec>(yp + static_cast<size_t>(k) * stride, n) +
                  dt2 * Eigen::Map<const Vec>(f + static_cast<size_t>(k) * stride, n));
    }
  };
  field_derivative_o0(dp, p0.data(), pb1.data(), n, f0.data());
  combine(o0_.data(), p0.data(), f0.data(), dt, K0, c);
  parallel_columns(K1 > 0 ? n : 0, [&](int col) {
    CVector f(static_cast<size_t>(K1) * c);
    field_derivative_o1(dp, col, &p1[static_cast<size_t>(col) * K1 * c], p0.data(),
                        K2 > 0 ? &pb2[static_cast<size_t>(col) * c] : nullptr, n, f.data());
    combine(&o1_[static_cast<size_t>(col) * K1 * c], &p1[static_cast<size_t>(col) * K1 * c], f.data(), dt, K1, c);
  });
  if (has_o2_field()) {
    parallel_columns(n, [&](int c2) {
      CVector f(static_cast<size_t>(K2) * c);
      for (int c1 = 0; c1 <= c2; ++c1) {
        const size_t off = o2_pair_offset(c1, c2);
        field_derivative_o2(dp, c1, c2, p1, p0.data(), &p2[off], pb2, n, f.data());
        combine(&o2_[off], &p2[off], f.data(), dt, K2, c);
      }
    });
  }
  index_ = i + 1;
  set_field_boundaries(index_, o0_, o1_, o2_);
  compute_quadrature_obar(index_, o0_, o1_, o2_, ob0_, ob1_, ob2_);
  build_derived(ob0_.data(), ob1_.data(), index_ + 1, *derived_);
}

// ---------------------------------------------------------------- auxiliary closure

void OHierarchy::step_auxiliary() {
  const int i = index_;
  const int n = i + 1;
  const double dt = grid_.dt;
  const size_t c = cap_;
  const int K0 = k0(), K1 = k1(), K2 = k2();
  const Maps& d = *derived_;

  // Obar predictor.
  auto& d0 = scratch_[0];
  auto& d1 = scratch_[1];
  auto& d2 = scratch_[2];
  obar_derivative(d, i, n, ob0_, ob1_, ob2_, d0, d1, d2);
  auto& pb0 = scratch_[3];
  auto& pb1 = scratch_[4];
  auto& pb2 = scratch_[5];
  pb0 = ob0_;
  pb1 = ob1_;
  // Only the live (n x n) block of Obar2 is copied; row and column n are set by the boundary.
  if (pb2.size() != ob2_.size()) pb2.resize(ob2_.size());
  for (int k = 0; k < K2; ++k)
    for (int s2 = 0; s2 < n; ++s2) {
      const size_t o = (static_cast<size_t>(k) * c + static_cast<size_t>(s2)) * c;
      std::copy_n(&ob2_[o], n, &pb2[o]);
    }
  for (int k = 0; k < K0; ++k) pb0[static_cast<size_t>(k)] += dt * d0[static_cast<size_t>(k)];
  for (int k = 0; k < K1; ++k)
    for (int s = 0; s < n; ++s) pb1[static_cast<size_t>(k) * c + static_cast<size_t>(s)] += dt * d1[static_cast<size_t>(k) * c + static_cast<size_t>(s)];
  for (int k = 0; k < K2; ++k)
    for (int s2 = 0; s2 < n; ++s2) {
      const size_t base = (static_cast<size_t>(k) * c + static_cast<size_t>(s2)) * c;
      Eigen::Map<Vec>(&pb2[base], n) += dt * Eigen::Map<const Vec>(&d2[base], n);
    }
  set_obar_boundaries(i + 1, pb0, pb1, pb2);
  Maps dp;
  build_derived(pb0.data(), pb1.data(), n + 1, dp);

  // Fields (linear in themselves given the Obar coefficients), column by column.
  if (options_.store_fields) {
    CVector o0_old = o0_, p0 = o0_;
    CVector f0(static_cast<size_t>(K0) * c);
    field_derivative_o0(d, o0_old.data(), ob1_.data(), n, f0.data());
    for (int k = 0; k < K0; ++k)
      Eigen::Map<Vec>(&p0[static_cast<size_t>(k) * c], n) += dt * Eigen::Map<const Vec>(&f0[static_cast<size_t>(k) * c], n);
    field_derivative_o0(dp, p0.data(), pb1.data(), n, f0.data());
    for (int k = 0; k < K0; ++k) {
      Eigen::Map<Vec> y(&o0_[static_cast<size_t>(k) * c], n);
      y = 0.5 * (y + Eigen::Map<const Vec>(&p0[static_cast<size_t>(k) * c], n) +
                 dt * Eigen::Map<const Vec>(&f0[static_cast<size_t>(k) * c], n));
    }
    if (K1 > 0) {
      parallel_columns(n, [&](int col) {
        CVector f(static_cast<size_t>(K1) * c), pc(static_cast<size_t>(K1) * c);
        cplx* y = &o1_[static_cast<size_t>(col) * K1 * c];
        field_derivative_o1(d, col, y, o0_old.data(), K2 > 0 ? &ob2_[static_cast<size_t>(col) * c] : nullptr, n,
                            f.data());
        for (int k = 0; k < K1; ++k) {
          const size_t o = static_cast<size_t>(k) * c;
          Eigen::Map<Vec>(&pc[o], n) = Eigen::Map<const Vec>(y + o, n) + dt * Eigen::Map<const Vec>(&f[o], n);
        }
        field_derivative_o1(dp, col, pc.data(), p0.data(), K2 > 0 ? &pb2[static_cast<size_t>(col) * c] : nullptr, n,
                            f.data());
        for (int k = 0; k < K1; ++k) {
          const size_t o = static_cast<size_t>(k) * c;
          Eigen::Map<Vec> yy(y + o, n);
          yy = 0.5 * (yy + Eigen::Map<const Vec>(&pc[o], n) + dt * Eigen::Map<const Vec>(&f[o], n));
        }
      });
    }
  }

  // Obar corrector.
  auto& e0 = scratch_[6];
  auto& e1 = scratch_[7];
  auto& e2 = scratch_[8];
  obar_derivative(dp, i + 1, n, pb0, pb1, pb2, e0, e1, e2);
  for (int k = 0; k < K0; ++k) {
    auto& y = ob0_[static_cast<size_t>(k)];
    y = 0.5 * (y + pb0[static_cast<size_t>(k)] + dt * e0[static_cast<size_t>(k)]);
  }
  for (int k = 0; k < K1; ++k) {
    const size_t o = static_cast<size_t>(k) * c;
    Eigen::Map<Vec> y(&ob1_[o], n);
    y = 0.5 * (y + Eigen::Map<const Vec>(&pb1[o], n) + dt * Eigen::Map<const Vec>(&e1[o], n));
  }
  for (int k = 0; k < K2; ++k)
    for (int s2 = 0; s2 < n; ++s2) {
      const size_t o = (static_cast<size_t>(k) * c + static_cast<size_t>(s2)) * c;
      Eigen::Map<Vec> y(&ob2_[o], n);
      y = 0.5 * (y + Eigen::Map<const Vec>(&pb2[o], n) + dt * Eigen::Map<const Vec>(&e2[o], n));
    }

  index_ = i + 1;
  set_obar_boundaries(index_, ob0_, ob1_, ob2_);
  if (options_.store_fields) set_field_boundaries(index_, o0_, o1_, o2_);
  build_derived(ob0_.data(), ob1_.data(), index_ + 1, *derived_);
}

void OHierarchy::step() {
  if (index_ + 1 >= grid_.n_nodes) throw ConfigError("hierarchy: stepping past the end of the grid");
  if (closure_ == ObarClosure::auxiliary)
    step_auxiliary();
  else
    step_quadrature();
  check_finite_or_throw("step");
}

void OHierarchy::run_to(int index) {
  while (index_ < index) step();
}

bool OHierarchy::finite() const {
  auto ok = [](const CVector& v) {
    for (const auto& x : v)
      if (!std::isfinite(x.real()) || !std::isfinite(x.imag())) return false;
    return true;
  };
  return ok(ob0_) && ok(ob1_) && ok(ob2_) && ok(o0_);
}

void OHierarchy::check_finite_or_throw(const char* what) const {
  if (!finite())
    throw NumericalError(std::string("hierarchy: non-finite value after ") + what + " at t = " + std::to_string(t()) +
                         " (index " + std::to_string(index_) + ")");
}

// ---------------------------------------------------------------- views

Operator OHierarchy::O0(int s) const {
  if (!options_.store_fields) throw ConfigError("hierarchy: fields are not stored");
  if (s < 0 || s > index_) throw ConfigError("hierarchy: s out of range");
  Operator op(lay0_);
  for (int k = 0; k < k0(); ++k) op.values()[static_cast<size_t>(k)] = o0(k)[s];
  return op;
}

Operator OHierarchy::O1(int s, int s1) const {
  if (!options_.store_fields) throw ConfigError("hierarchy: fields are not stored");
  if (s < 0 || s > index_ || s1 < 0 || s1 > index_) throw ConfigError("hierarchy: index out of range");
  Operator op(lay1_);
  for (int k = 0; k < k1(); ++k) op.values()[static_cast<size_t>(k)] = o1(s1, k)[s];
  return op;
}

Operator OHierarchy::O2(int s, int s1, int s2) const {
  if (!has_o2_field()) throw ConfigError("hierarchy: O2 field is only stored by the quadrature closure");
  if (s < 0 || s > index_ || s1 < 0 || s1 > index_ || s2 < 0 || s2 > index_)
    throw ConfigError("hierarchy: index out of range");
  Operator op(lay2_);
  for (int k = 0; k < k2(); ++k) op.values()[static_cast<size_t>(k)] = o2(s1, s2, k)[s];
  return op;
}

Operator OHierarchy::Obar0() const { return Operator(lay0_, std::vector<cplx>(ob0_.begin(), ob0_.end())); }

Operator OHierarchy::Obar1(int s1) const {
  Operator op(lay1_);
  for (int k = 0; k < k1(); ++k) op.values()[static_cast<size_t>(k)] = obar1(k)[s1];
  return op;
}

Operator OHierarchy::Obar2(int s1, int s2) const {
  Operator op(lay2_);
  for (int k = 0; k < k2(); ++k) op.values()[static_cast<size_t>(k)] = obar2(k, s2)[s1];
  return op;
}

// ---------------------------------------------------------------- diagnostics

ForbiddenReport OHierarchy::check_forbidden(int n_samples, std::uint64_t seed) const {
  ForbiddenReport rep;
  rep.t = t();
  if (depth_ < 1 || !options_.store_fields) return rep;
  rep.applicable = true;
  const int i = index_;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, i);
  std::vector<std::array<int, 6>> tuples;
  tuples.push_back({0, 0, 0, 0, 0, 0});
  tuples.push_back({i, i, i, i, i, i});
  tuples.push_back({0, i, 0, i, 0, i});
  for (int k = 0; k < n_samples; ++k) tuples.push_back({pick(rng), pick(rng), pick(rng), pick(rng), pick(rng), pick(rng)});

  const Mat l = L_.dense();
  auto upd = [&](const std::string& key, const Mat& m) {
    const double v = m.size() ? m.cwiseAbs().maxCoeff() : 0.0;
    rep.residuals[key] = std::max(rep.residuals[key], v);
  };
  for (const auto& s : tuples) {
    const Mat o0a = O0(s[0]).dense(), o0b = O0(s[1]).dense();
    const Mat o1a = O1(s[2], s[3]).dense(), o1b = O1(s[4], s[5]).dense();
    // O_j O_k = 0 for j + k >= N - 1
    if (depth_ == 1) {
      upd("L*O1", l * o1a);
      upd("O0*O1", o0a * o1a);
      upd("O1*O0", o1a * o0a);
      upd("O1*O1", o1a * o1b);
    } else {
      Mat o2;
      if (has_o2_field()) {
        o2 = O2(s[0], s[3], s[5]).dense();
      } else {
        rep.uses_obar2 = true;
        o2 = Obar2(s[3], s[5]).dense();
      }
      upd("L*O2", l * o2);
      upd("O0*O2", o0a * o2);
      upd("O2*O0", o2 * o0a);
      upd("O1*O1", o1a * o1b);
      upd("O1*O0*O0", o1a * o0a * o0b);
    }
  }
  return rep;
}

GradingDefects OHierarchy::grading_defects() const {
  GradingDefects g;
  if (options_.storage == Storage::graded) return g;  // structurally exact
  const int n = spec_.n_qubits;
  const int i = index_;
  auto field_defect = [&](const Operator& op, int d) { return grading_defect(op.dense(), n, d); };
  g.obar0 = field_defect(Obar0(), 1);
  for (int s1 = 0; s1 <= i && depth_ >= 1; ++s1) g.obar1 = std::max(g.obar1, field_defect(Obar1(s1), 2));
  for (int s1 = 0; s1 <= i && depth_ >= 2; ++s1)
    for (int s2 = 0; s2 <= i; ++s2) g.obar2 = std::max(g.obar2, field_defect(Obar2(s1, s2), 3));
  if (options_.store_fields) {
    for (int s = 0; s <= i; ++s) {
      g.o0 = std::max(g.o0, field_defect(O0(s), 1));
      for (int s1 = 0; s1 <= i && depth_ >= 1; ++s1) {
        g.o1 = std::max(g.o1, field_defect(O1(s, s1), 2));
        if (has_o2_field())
          for (int s2 = 0; s2 <= s1; ++s2) g.o2 = std::max(g.o2, field_defect(O2(s, s2, s1), 3));
      }
    }
  }
  return g;
}

double OHierarchy::boundary_residual() const {
  double r = 0.0;
  const int i = index_;
  if (options_.store_fields) {
    Operator l_eff = L_;
    if (options_.grading_perturbation != 0.0) l_eff += perturbation_;
    r = std::max(r, max_abs(O0(i) - l_eff));
    for (int s = 0; s <= i && depth_ >= 1; ++s) {
      Operator expect(lay1_);
      Operator o = O0(s);
      l_comm01_.apply(o.values().data(), 1, expect.values().data(), 1, 1);
      r = std::max(r, max_abs(O1(s, i) - expect));
    }
  }
  if (closure_ == ObarClosure::auxiliary && depth_ >= 1) {
    Operator expect(lay1_);
    l_comm01_.apply(ob0_.data(), 1, expect.values().data(), 1, 1);
    r = std::max(r, max_abs(Obar1(i) - expect));
  }
  return r;
}

// ---------------------------------------------------------------- history

ObarHistory::ObarHistory(const OHierarchy& h, int stride) : stride_(stride) {
  if (stride < 1) throw ConfigError("history: stride must be >= 1");
  const int n_coarse = (h.grid().n_nodes - 1) / stride + 1;
  coarse_ = TimeGrid{h.grid().dt * stride, n_coarse};
  k0_ = h.k0();
  k1_ = h.k1();
  k2_ = h.k2();
  lay0_ = h.layout0();
  lay1_ = h.layout1();
  lay2_ = h.layout2();
  record(h);
}

void ObarHistory::record(const OHierarchy& h) {
  if (h.index() % stride_ != 0) return;
  const int j = h.index() / stride_;
  if (j != recorded()) return;
  if (j >= coarse_.n_nodes) return;
  Operator b0 = h.Obar0();
  ob0_.emplace_back(b0.values().begin(), b0.values().end());
  Mat b1(k1_, j + 1);
  for (int k = 0; k < k1_; ++k)
    for (int s = 0; s <= j; ++s) b1(k, s) = h.obar1(k)[s * stride_];
  ob1_.push_back(std::move(b1));
  std::vector<Mat> b2;
  for (int k = 0; k < k2_; ++k) {
    Mat m(j + 1, j + 1);
    for (int s2 = 0; s2 <= j; ++s2)
      for (int s1 = 0; s1 <= j; ++s1) m(s1, s2) = h.obar2(k, s2 * stride_)[s1 * stride_];
    b2.push_back(std::move(m));
  }
  ob2_.push_back(std::move(b2));
}

ObarHistory ObarHistory::compute(const QubitSystemSpec& spec, const BathKernel& kernel, const TimeGrid& fine_grid,
                                 int stride, HierarchyOptions options) {
  options.store_fields = false;
  OHierarchy h(spec, kernel, fine_grid, options);
  ObarHistory hist(h, stride);
  while (h.index() + 1 < fine_grid.n_nodes) {
    h.step();
    hist.record(h);
  }
  return hist;
}

}  // namespace nmqsd
