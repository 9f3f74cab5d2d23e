#pragma once

// Operator algebra on N-qubit spaces with excitation-sector grading.
//
// Basis convention: computational basis, qubit 1 is the most significant bit,
// bit value 1 is the excited state. An operator has grading d when it maps the
// sector with n excitations to the sector with n - d excitations; graded
// operators store only the entries of that block set.

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "nmqsd/types.hpp"

namespace nmqsd {

inline constexpr int kMaxExactQubits = 3;

struct QubitSystemSpec {
  int n_qubits = 1;
  std::vector<double> omega;  // qubit frequencies
  double j_xy = 0.0;          // nearest-neighbour XY coupling
  std::vector<double> kappa;  // coupling weights in L

  void validate() const;
  int dim() const { return 1 << n_qubits; }

  /// Uniform chain: omega_j = omega, kappa_j = kappa.
  static QubitSystemSpec uniform(int n_qubits, double omega = 1.0, double kappa = 1.0, double j_xy = 0.0);
};

/// Which entries of a dim x dim matrix are stored, in row-major order.
class Layout {
 public:
  static std::shared_ptr<const Layout> graded(int n_qubits, int grading);
  static std::shared_ptr<const Layout> full(int n_qubits);

  int n_qubits() const { return n_qubits_; }
  int dim() const { return 1 << n_qubits_; }
  std::optional<int> grading() const { return grading_; }
  int size() const { return static_cast<int>(entries_.size()); }
  std::pair<int, int> entry(int k) const { return entries_[static_cast<size_t>(k)]; }
  /// Storage slot of (row, col), or -1 when the entry is structurally zero.
  int slot(int row, int col) const { return slot_[static_cast<size_t>(row * dim() + col)]; }

  bool operator==(const Layout& o) const { return n_qubits_ == o.n_qubits_ && grading_ == o.grading_; }

 private:
  Layout(int n_qubits, std::optional<int> grading);

  int n_qubits_;
  std::optional<int> grading_;
  std::vector<std::pair<int, int>> entries_;
  std::vector<int> slot_;
};

using LayoutPtr = std::shared_ptr<const Layout>;

/// Layout of a product: gradings add; full if either factor is full.
LayoutPtr product_layout(const Layout& a, const Layout& b);
/// Layout of the adjoint: grading negated.
LayoutPtr adjoint_layout(const Layout& a);

/// Complex matrix stored in a (possibly graded) layout.
class Operator {
 public:
  Operator() = default;
  explicit Operator(LayoutPtr layout);
  Operator(LayoutPtr layout, std::vector<cplx> values);

  /// Entries outside the layout must be below `tol` in magnitude.
  static Operator from_dense(const Mat& m, LayoutPtr layout, double tol = 0.0);

  const LayoutPtr& layout() const { return layout_; }
  std::optional<int> grading() const { return layout_->grading(); }
  int n_qubits() const { return layout_->n_qubits(); }
  int dim() const { return layout_->dim(); }
  std::span<const cplx> values() const { return values_; }
  std::span<cplx> values() { return values_; }
  cplx operator()(int row, int col) const;

  Mat dense() const;
  Operator adjoint() const;
  /// Same operator re-stored in another layout (must be representable).
  Operator relayout(LayoutPtr layout, double tol = 0.0) const;

  Operator& operator+=(const Operator& o);
  Operator& operator-=(const Operator& o);
  Operator& operator*=(cplx s);

 private:
  LayoutPtr layout_;
  std::vector<cplx> values_;
};

Operator operator*(const Operator& a, const Operator& b);
Operator operator+(Operator a, const Operator& b);
Operator operator-(Operator a, const Operator& b);
Operator operator*(cplx s, Operator a);
Operator commutator(const Operator& a, const Operator& b);
double max_abs(const Operator& a);

/// Index triples (out, left, right): out[o] += left[l] * right[r] realises out = left*right.
struct BilinearTable {
  LayoutPtr left, right, out;
  std::vector<std::array<int, 3>> terms;

  static BilinearTable build(LayoutPtr left, LayoutPtr right, LayoutPtr out);
};

/// Sparse linear map between component vectors of two layouts, applied to
/// whole grid vectors at once (one complex axpy per nonzero).
class LinearMap {
 public:
  struct Entry {
    int out;
    int in;
    cplx v;
  };

  LinearMap() = default;
  LinearMap(int n_out, int n_in);

  int n_out() const { return n_out_; }
  int n_in() const { return n_in_; }

  void reset();
  void add(int out, int in, cplx v) { scratch_[static_cast<size_t>(out * n_in_ + in)] += v; }
  /// X -> coef * A X, with A given by the table's left operand values.
  void add_left_product(const BilinearTable& t, std::span<const cplx> left_vals, cplx coef);
  /// X -> coef * X B, with B given by the table's right operand values.
  void add_right_product(const BilinearTable& t, std::span<const cplx> right_vals, cplx coef);
  void finalize();

  std::span<const Entry> entries() const { return entries_; }

  /// out[o][0..len) += sum_in v * in[i][0..len).
  void apply(const cplx* const* in, cplx* const* out, size_t len) const;
  /// Strided variant: component k of vector lives at base + k*stride.
  void apply(const cplx* in, size_t in_stride, cplx* out, size_t out_stride, size_t len) const;

 private:
  int n_out_ = 0;
  int n_in_ = 0;
  std::vector<cplx> scratch_;
  std::vector<Entry> entries_;
};

Operator build_system_hamiltonian(const QubitSystemSpec& spec);
Operator build_lindblad_operator(const QubitSystemSpec& spec);
/// sigma_-^q with q 1-based.
Operator sigma_minus(int n_qubits, int qubit);
/// Total excitation number sum_j sigma_+^j sigma_-^j.
Operator excitation_number(int n_qubits);

/// Number of excitations of basis index `b`.
int excitation_count(int b);

/// Reduced state on the qubits in `keep` (1-based, kept in ascending order).
Mat partial_trace(const Mat& rho, int n_qubits, const std::vector<int>& keep);

struct GradingReport {
  std::map<int, double> block_norms;  // Frobenius norm of each sector-difference block
  std::vector<int> differences(double tol = 0.0) const;
};

GradingReport excitation_grading(const Mat& op, int n_qubits);
GradingReport excitation_grading(const Operator& op);
/// Largest |entry| that connects sectors with difference != d.
double grading_defect(const Mat& op, int n_qubits, int d);

/// Hermitian, unit-trace state with tolerances for the diagnostics below.
struct DensityMatrix {
  Mat m;
  double trace_tolerance = 1e-8;
  double hermiticity_tolerance = 1e-10;

  DensityMatrix() = default;
  explicit DensityMatrix(Mat rho, double trace_tol = 1e-8, double herm_tol = 1e-10);
  static DensityMatrix pure(const Vec& psi);

  int n_qubits() const;
  double trace_defect() const;
  double hermiticity_defect() const;
  double min_eigenvalue() const;
  /// Throws ConfigError when trace or hermiticity is out of tolerance.
  void validate() const;
};

double hermiticity_defect(const Mat& m);
double min_eigenvalue(const Mat& hermitian);

/// Computational basis vector from a bit string such as "101" (qubit 1 first).
Vec basis_state(const std::string& bits);

}  // namespace nmqsd
