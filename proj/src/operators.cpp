#include "nmqsd/operators.hpp"

#include <algorithm>
#include <bit>
#include <mutex>
#include <tuple>

namespace nmqsd {

void QubitSystemSpec::validate() const {
  if (n_qubits < 1) throw ConfigError("system: n_qubits must be >= 1");
  if (n_qubits > 12) throw ConfigError("system: n_qubits too large for a dense 2^N space");
  if (static_cast<int>(omega.size()) != n_qubits)
    throw ConfigError("system: omega has " + std::to_string(omega.size()) + " entries, expected " +
                      std::to_string(n_qubits));
  if (static_cast<int>(kappa.size()) != n_qubits)
    throw ConfigError("system: kappa has " + std::to_string(kappa.size()) + " entries, expected " +
                      std::to_string(n_qubits));
  for (double w : omega)
    if (!std::isfinite(w)) throw ConfigError("system: omega must be finite");
  for (double k : kappa)
    if (!std::isfinite(k)) throw ConfigError("system: kappa must be finite");
  if (!std::isfinite(j_xy)) throw ConfigError("system: j_xy must be finite");
}

QubitSystemSpec QubitSystemSpec::uniform(int n_qubits, double omega, double kappa, double j_xy) {
  QubitSystemSpec s;
  s.n_qubits = n_qubits;
  s.omega.assign(static_cast<size_t>(std::max(n_qubits, 0)), omega);
  s.kappa.assign(static_cast<size_t>(std::max(n_qubits, 0)), kappa);
  s.j_xy = j_xy;
  return s;
}

int excitation_count(int b) { return std::popcount(static_cast<unsigned>(b)); }

// ---------------------------------------------------------------- Layout

Layout::Layout(int n_qubits, std::optional<int> grading) : n_qubits_(n_qubits), grading_(grading) {
  const int d = dim();
  slot_.assign(static_cast<size_t>(d * d), -1);
  for (int r = 0; r < d; ++r) {
    for (int c = 0; c < d; ++c) {
      if (grading_ && excitation_count(c) - excitation_count(r) != *grading_) continue;
      slot_[static_cast<size_t>(r * d + c)] = static_cast<int>(entries_.size());
      entries_.emplace_back(r, c);
    }
  }
}

namespace {

std::mutex& cache_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

std::shared_ptr<const Layout> Layout::graded(int n_qubits, int grading) {
  if (n_qubits < 1 || n_qubits > 12) throw ConfigError("layout: bad qubit count");
  static std::map<std::pair<int, int>, std::shared_ptr<const Layout>> cache;
  std::lock_guard lock(cache_mutex());
  auto key = std::make_pair(n_qubits, grading);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto p = std::shared_ptr<const Layout>(new Layout(n_qubits, grading));
  cache.emplace(key, p);
  return p;
}

std::shared_ptr<const Layout> Layout::full(int n_qubits) {
  if (n_qubits < 1 || n_qubits > 12) throw ConfigError("layout: bad qubit count");
  static std::map<int, std::shared_ptr<const Layout>> cache;
  std::lock_guard lock(cache_mutex());
  auto it = cache.find(n_qubits);
  if (it != cache.end()) return it->second;
  auto p = std::shared_ptr<const Layout>(new Layout(n_qubits, std::nullopt));
  cache.emplace(n_qubits, p);
  return p;
}

LayoutPtr product_layout(const Layout& a, const Layout& b) {
  if (a.n_qubits() != b.n_qubits()) throw ConfigError("layout: qubit count mismatch in product");
  if (a.grading() && b.grading()) return Layout::graded(a.n_qubits(), *a.grading() + *b.grading());
  return Layout::full(a.n_qubits());
}

LayoutPtr adjoint_layout(const Layout& a) {
  if (a.grading()) return Layout::graded(a.n_qubits(), -*a.grading());
  return Layout::full(a.n_qubits());
}

// ---------------------------------------------------------------- Operator

Operator::Operator(LayoutPtr layout) : layout_(std::move(layout)) {
  values_.assign(static_cast<size_t>(layout_->size()), cplx{0.0, 0.0});
}

Operator::Operator(LayoutPtr layout, std::vector<cplx> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (static_cast<int>(values_.size()) != layout_->size())
    throw ConfigError("operator: value count does not match layout");
}

Operator Operator::from_dense(const Mat& m, LayoutPtr layout, double tol) {
  const int d = layout->dim();
  if (m.rows() != d || m.cols() != d) throw ConfigError("operator: dense matrix has wrong dimension");
  Operator op(layout);
  for (int r = 0; r < d; ++r) {
    for (int c = 0; c < d; ++c) {
      const int k = layout->slot(r, c);
      if (k >= 0) {
        op.values_[static_cast<size_t>(k)] = m(r, c);
      } else if (std::abs(m(r, c)) > tol) {
        throw ConfigError("operator: entry (" + std::to_string(r) + "," + std::to_string(c) +
                          ") violates the declared grading");
      }
    }
  }
  return op;
}

cplx Operator::operator()(int row, int col) const {
  const int k = layout_->slot(row, col);
  return k < 0 ? cplx{} : values_[static_cast<size_t>(k)];
}

Mat Operator::dense() const {
  const int d = dim();
  Mat m = Mat::Zero(d, d);
  for (int k = 0; k < layout_->size(); ++k) {
    auto [r, c] = layout_->entry(k);
    m(r, c) = values_[static_cast<size_t>(k)];
  }
  return m;
}

Operator Operator::adjoint() const {
  auto lay = adjoint_layout(*layout_);
  Operator out(lay);
  for (int k = 0; k < layout_->size(); ++k) {
    auto [r, c] = layout_->entry(k);
    out.values_[static_cast<size_t>(lay->slot(c, r))] = std::conj(values_[static_cast<size_t>(k)]);
  }
  return out;
}

Operator Operator::relayout(LayoutPtr layout, double tol) const { return from_dense(dense(), std::move(layout), tol); }

Operator& Operator::operator+=(const Operator& o) {
  if (layout_ == o.layout_ || *layout_ == *o.layout_) {
    for (size_t k = 0; k < values_.size(); ++k) values_[k] += o.values_[k];
    return *this;
  }
  // Mixed layouts: promote to full storage.
  *this = Operator::from_dense(dense() + o.dense(), Layout::full(n_qubits()));
  return *this;
}

Operator& Operator::operator-=(const Operator& o) {
  Operator neg = o;
  neg *= cplx{-1.0, 0.0};
  return *this += neg;
}

Operator& Operator::operator*=(cplx s) {
  for (auto& v : values_) v *= s;
  return *this;
}

namespace {

const BilinearTable& cached_table(const LayoutPtr& l, const LayoutPtr& r, const LayoutPtr& o) {
  static std::map<std::tuple<const Layout*, const Layout*, const Layout*>, BilinearTable> cache;
  std::lock_guard lock(cache_mutex());
  auto key = std::make_tuple(l.get(), r.get(), o.get());
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  // Layouts are interned, so the raw pointers stay valid for the program lifetime.
  return cache.emplace(key, BilinearTable::build(l, r, o)).first->second;
}

}  // namespace

Operator operator*(const Operator& a, const Operator& b) {
  auto out_layout = product_layout(*a.layout(), *b.layout());
  const auto& t = cached_table(a.layout(), b.layout(), out_layout);
  Operator out(out_layout);
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  for (const auto& [o, l, r] : t.terms) ov[static_cast<size_t>(o)] += av[static_cast<size_t>(l)] * bv[static_cast<size_t>(r)];
  return out;
}

Operator operator+(Operator a, const Operator& b) { return a += b; }
Operator operator-(Operator a, const Operator& b) { return a -= b; }
Operator operator*(cplx s, Operator a) { return a *= s; }

Operator commutator(const Operator& a, const Operator& b) { return a * b - b * a; }

double max_abs(const Operator& a) {
  double m = 0.0;
  for (auto v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

// ---------------------------------------------------------------- BilinearTable

BilinearTable BilinearTable::build(LayoutPtr left, LayoutPtr right, LayoutPtr out) {
  if (left->n_qubits() != right->n_qubits() || left->n_qubits() != out->n_qubits())
    throw ConfigError("bilinear table: qubit count mismatch");
  BilinearTable t{left, right, out, {}};
  const int d = left->dim();
  std::vector<std::vector<std::pair<int, int>>> right_by_row(static_cast<size_t>(d));
  for (int k = 0; k < right->size(); ++k) {
    auto [r, c] = right->entry(k);
    right_by_row[static_cast<size_t>(r)].emplace_back(k, c);
  }
  for (int kl = 0; kl < left->size(); ++kl) {
    auto [r, m] = left->entry(kl);
    for (auto [kr, c] : right_by_row[static_cast<size_t>(m)]) {
      const int ko = out->slot(r, c);
      if (ko < 0) throw ConfigError("bilinear table: product leaves the output layout");
      t.terms.push_back({ko, kl, kr});
    }
  }
  return t;
}

// ---------------------------------------------------------------- LinearMap

LinearMap::LinearMap(int n_out, int n_in) : n_out_(n_out), n_in_(n_in) {
  scratch_.assign(static_cast<size_t>(n_out * n_in), cplx{});
}

void LinearMap::reset() {
  std::fill(scratch_.begin(), scratch_.end(), cplx{});
  entries_.clear();
}

void LinearMap::add_left_product(const BilinearTable& t, std::span<const cplx> left_vals, cplx coef) {
  for (const auto& [o, l, r] : t.terms) add(o, r, coef * left_vals[static_cast<size_t>(l)]);
}

void LinearMap::add_right_product(const BilinearTable& t, std::span<const cplx> right_vals, cplx coef) {
  for (const auto& [o, l, r] : t.terms) add(o, l, coef * right_vals[static_cast<size_t>(r)]);
}

void LinearMap::finalize() {
  entries_.clear();
  for (int o = 0; o < n_out_; ++o)
    for (int i = 0; i < n_in_; ++i) {
      const cplx v = scratch_[static_cast<size_t>(o * n_in_ + i)];
      if (v != cplx{}) entries_.push_back({o, i, v});
    }
}

void LinearMap::apply(const cplx* const* in, cplx* const* out, size_t len) const {
  using VMap = Eigen::Map<Eigen::VectorXcd>;
  using CMap = Eigen::Map<const Eigen::VectorXcd>;
  const auto n = static_cast<Eigen::Index>(len);
  for (const auto& e : entries_) VMap(out[e.out], n) += e.v * CMap(in[e.in], n);
}

void LinearMap::apply(const cplx* in, size_t in_stride, cplx* out, size_t out_stride, size_t len) const {
  using VMap = Eigen::Map<Eigen::VectorXcd>;
  using CMap = Eigen::Map<const Eigen::VectorXcd>;
  const auto n = static_cast<Eigen::Index>(len);
  for (const auto& e : entries_)
    VMap(out + static_cast<size_t>(e.out) * out_stride, n) += e.v * CMap(in + static_cast<size_t>(e.in) * in_stride, n);
}

// ---------------------------------------------------------------- builders

namespace {

int bit_of(int n_qubits, int qubit) { return n_qubits - qubit; }

}  // namespace

Operator sigma_minus(int n_qubits, int qubit) {
  if (qubit < 1 || qubit > n_qubits) throw ConfigError("sigma_minus: qubit index out of range");
  auto lay = Layout::graded(n_qubits, 1);
  Operator op(lay);
  const int mask = 1 << bit_of(n_qubits, qubit);
  for (int c = 0; c < (1 << n_qubits); ++c)
    if (c & mask) op.values()[static_cast<size_t>(lay->slot(c ^ mask, c))] = 1.0;
  return op;
}

Operator excitation_number(int n_qubits) {
  auto lay = Layout::graded(n_qubits, 0);
  Operator op(lay);
  for (int b = 0; b < (1 << n_qubits); ++b) op.values()[static_cast<size_t>(lay->slot(b, b))] = excitation_count(b);
  return op;
}

Operator build_system_hamiltonian(const QubitSystemSpec& spec) {
  spec.validate();
  const int n = spec.n_qubits;
  const int d = spec.dim();
  Mat h = Mat::Zero(d, d);
  for (int b = 0; b < d; ++b) {
    double e = 0.0;
    for (int q = 1; q <= n; ++q) e += 0.5 * spec.omega[static_cast<size_t>(q - 1)] * ((b >> bit_of(n, q)) & 1 ? 1.0 : -1.0);
    h(b, b) = e;
  }
  // sigma^x sigma^x + sigma^y sigma^y = 2 (sigma_+ sigma_- + sigma_- sigma_+)
  for (int q = 1; q < n; ++q) {
    const int m1 = 1 << bit_of(n, q);
    const int m2 = 1 << bit_of(n, q + 1);
    for (int b = 0; b < d; ++b) {
      const bool b1 = b & m1, b2 = b & m2;
      if (b1 != b2) h(b ^ m1 ^ m2, b) += 2.0 * spec.j_xy;
    }
  }
  return Operator::from_dense(h, Layout::graded(n, 0));
}

Operator build_lindblad_operator(const QubitSystemSpec& spec) {
  spec.validate();
  Operator l(Layout::graded(spec.n_qubits, 1));
  for (int q = 1; q <= spec.n_qubits; ++q) l += spec.kappa[static_cast<size_t>(q - 1)] * sigma_minus(spec.n_qubits, q);
  return l;
}

// ---------------------------------------------------------------- partial trace, grading

Mat partial_trace(const Mat& rho, int n_qubits, const std::vector<int>& keep) {
  if (n_qubits < 1 || rho.rows() != (1 << n_qubits) || rho.cols() != rho.rows())
    throw ConfigError("partial_trace: matrix dimension does not match qubit count");
  if (keep.empty()) throw ConfigError("partial_trace: keep set is empty");
  std::vector<int> k = keep;
  std::sort(k.begin(), k.end());
  for (size_t i = 0; i < k.size(); ++i) {
    if (k[i] < 1 || k[i] > n_qubits) throw ConfigError("partial_trace: qubit index out of range");
    if (i > 0 && k[i] == k[i - 1]) throw ConfigError("partial_trace: duplicate qubit index");
  }
  std::vector<int> traced;
  for (int q = 1; q <= n_qubits; ++q)
    if (!std::binary_search(k.begin(), k.end(), q)) traced.push_back(q);

  const int nk = static_cast<int>(k.size());
  const int nt = static_cast<int>(traced.size());
  auto compose = [&](int kept_bits, int traced_bits) {
    int b = 0;
    for (int i = 0; i < nk; ++i)
      if ((kept_bits >> (nk - 1 - i)) & 1) b |= 1 << bit_of(n_qubits, k[static_cast<size_t>(i)]);
    for (int i = 0; i < nt; ++i)
      if ((traced_bits >> (nt - 1 - i)) & 1) b |= 1 << bit_of(n_qubits, traced[static_cast<size_t>(i)]);
    return b;
  };
  const int dk = 1 << nk;
  Mat out = Mat::Zero(dk, dk);
  for (int a = 0; a < dk; ++a)
    for (int b = 0; b < dk; ++b)
      for (int e = 0; e < (1 << nt); ++e) out(a, b) += rho(compose(a, e), compose(b, e));
  return out;
}

std::vector<int> GradingReport::differences(double tol) const {
  std::vector<int> out;
  for (auto [d, norm] : block_norms)
    if (norm > tol) out.push_back(d);
  return out;
}

GradingReport excitation_grading(const Mat& op, int n_qubits) {
  if (op.rows() != (1 << n_qubits) || op.cols() != op.rows()) throw ConfigError("grading: dimension mismatch");
  std::map<int, double> sq;
  for (int r = 0; r < op.rows(); ++r)
    for (int c = 0; c < op.cols(); ++c) {
      const double a = std::norm(op(r, c));
      if (a > 0.0) sq[excitation_count(c) - excitation_count(r)] += a;
    }
  GradingReport rep;
  for (auto [d, s] : sq) rep.block_norms[d] = std::sqrt(s);
  return rep;
}

GradingReport excitation_grading(const Operator& op) { return excitation_grading(op.dense(), op.n_qubits()); }

double grading_defect(const Mat& op, int n_qubits, int d) {
  double m = 0.0;
  for (int r = 0; r < op.rows(); ++r)
    for (int c = 0; c < op.cols(); ++c)
      if (excitation_count(c) - excitation_count(r) != d) m = std::max(m, std::abs(op(r, c)));
  (void)n_qubits;
  return m;
}

// ---------------------------------------------------------------- density matrices

double hermiticity_defect(const Mat& m) { return (m - m.adjoint()).cwiseAbs().maxCoeff(); }

double min_eigenvalue(const Mat& hermitian) {
  Mat h = 0.5 * (hermitian + hermitian.adjoint());
  Eigen::SelfAdjointEigenSolver<Mat> es(h, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

DensityMatrix::DensityMatrix(Mat rho, double trace_tol, double herm_tol)
    : m(std::move(rho)), trace_tolerance(trace_tol), hermiticity_tolerance(herm_tol) {
  if (m.rows() != m.cols() || m.rows() < 2 || std::popcount(static_cast<unsigned>(m.rows())) != 1)
    throw ConfigError("density matrix: dimension must be a power of two >= 2");
}

DensityMatrix DensityMatrix::pure(const Vec& psi) {
  const double n = psi.norm();
  if (!(n > 0.0)) throw ConfigError("density matrix: zero state vector");
  Vec v = psi / n;
  return DensityMatrix(v * v.adjoint());
}

int DensityMatrix::n_qubits() const { return std::countr_zero(static_cast<unsigned>(m.rows())); }
double DensityMatrix::trace_defect() const { return std::abs(m.trace() - cplx{1.0, 0.0}); }
double DensityMatrix::hermiticity_defect() const { return nmqsd::hermiticity_defect(m); }
double DensityMatrix::min_eigenvalue() const { return nmqsd::min_eigenvalue(m); }

void DensityMatrix::validate() const {
  if (trace_defect() > trace_tolerance)
    throw ConfigError("density matrix: trace differs from 1 by " + std::to_string(trace_defect()));
  if (hermiticity_defect() > hermiticity_tolerance)
    throw ConfigError("density matrix: hermiticity defect " + std::to_string(hermiticity_defect()));
}

Vec basis_state(const std::string& bits) {
  if (bits.empty()) throw ConfigError("basis_state: empty bit string");
  int b = 0;
  for (char ch : bits) {
    if (ch != '0' && ch != '1') throw ConfigError("basis_state: bit string may only contain 0 and 1");
    b = (b << 1) | (ch == '1');
  }
  Vec v = Vec::Zero(1 << bits.size());
  v(b) = 1.0;
  return v;
}

}  // namespace nmqsd
