#pragma once

// Propagation of the noise expansion of the O operator,
//   O(t,s,z*) = O0(t,s) + int ds1 z*_{s1} O1(t,s,s1) + iint ds1 ds2 z*_{s1} z*_{s2} O2(t,s,s1,s2),
// and of its kernel convolutions Obar_k(t,...) = int_0^t ds alpha(t,s) O_k(t,s,...).
//
// With A = -iH - L^dag Obar0 and M(s1) = L^dag Obar1(t,s1):
//   dO0/dt = [A, O0(s)] - L^dag Obar1(s)
//   dO1/dt = [A, O1(s,s1)] - [M(s1), O0(s)] - 2 L^dag Obar2(s,s1)
//   dO2/dt = [A, O2] - (1/2)([M(s1), O1(s,s2)] + [M(s2), O1(s,s1)]) - [L^dag Obar2(s1,s2), O0(s)]
// Boundaries: O0(t,t) = L, O1(t,s,t) = [L, O0(t,s)], O1(t,t,s1) = 0,
//             O2(t,s,s1,t) = O2(t,s,t,s1) = (1/2)[L, O1(t,s,s1)], O2(t,t,...) = 0.
//
// Two closures for the Obar fields:
//   quadrature: trapezoid convolution of the stored O0, O1, O2 fields (any kernel);
//   auxiliary:  for the OU kernel d(alpha)/dt = -gamma alpha turns each Obar_k
//               into an ODE of its own, so O2 never has to be stored.

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "nmqsd/noise.hpp"
#include "nmqsd/operators.hpp"

namespace nmqsd {

enum class ObarClosure { automatic, quadrature, auxiliary };
enum class Storage { graded, dense };

std::string to_string(ObarClosure c);
std::string to_string(Storage s);

struct HierarchyOptions {
  ObarClosure closure = ObarClosure::automatic;
  Storage storage = Storage::graded;
  /// Keep the O0/O1 (and O2) fields. The auxiliary closure does not need them;
  /// the master equation does.
  bool store_fields = true;
  int workers = 1;
  /// Upper bound on field memory; construction fails beyond it.
  double memory_budget_bytes = 3.5e9;
  /// Test hook: adds this multiple of a grading-violating entry to every O0(t,t).
  /// Requires dense storage.
  double grading_perturbation = 0.0;
};

/// Values of a forbidden product, max over the sampled grid tuples.
struct ForbiddenReport {
  double t = 0.0;
  bool applicable = false;
  bool uses_obar2 = false;  // O2 products checked through Obar2 (auxiliary closure)
  std::map<std::string, double> residuals;
  double max_residual() const;
};

struct GradingDefects {
  double o0 = 0.0, o1 = 0.0, o2 = 0.0, obar0 = 0.0, obar1 = 0.0, obar2 = 0.0;
  double max() const;
};

class OHierarchy {
 public:
  OHierarchy(const QubitSystemSpec& spec, const BathKernel& kernel, const TimeGrid& grid,
             HierarchyOptions options = {});

  int depth() const { return depth_; }
  int index() const { return index_; }
  double t() const { return grid_.t(index_); }
  const TimeGrid& grid() const { return grid_; }
  const GridKernel& grid_kernel() const { return gk_; }
  const QubitSystemSpec& spec() const { return spec_; }
  ObarClosure closure() const { return closure_; }
  Storage storage() const { return options_.storage; }
  bool has_fields() const { return options_.store_fields; }
  bool has_o2_field() const { return options_.store_fields && closure_ == ObarClosure::quadrature && depth_ >= 2; }

  const LayoutPtr& layout0() const { return lay0_; }
  const LayoutPtr& layout1() const { return lay1_; }
  const LayoutPtr& layout2() const { return lay2_; }
  int k0() const { return lay0_->size(); }
  int k1() const { return depth_ >= 1 ? lay1_->size() : 0; }
  int k2() const { return depth_ >= 2 ? lay2_->size() : 0; }
  const Operator& L() const { return L_; }
  const Operator& H() const { return H_; }

  /// Advance one grid step.
  void step();
  void run_to(int index);

  // Raw component vectors; stride between consecutive grid entries is 1.
  size_t capacity() const { return cap_; }
  const cplx* o0(int comp) const { return &o0_[static_cast<size_t>(comp) * cap_]; }
  const cplx* o1(int col, int comp) const { return &o1_[(static_cast<size_t>(col) * k1() + comp) * cap_]; }
  const cplx* o2(int c1, int c2, int comp) const;
  const cplx* obar1(int comp) const { return &ob1_[static_cast<size_t>(comp) * cap_]; }
  /// Column c2 of Obar2 (vector over s1).
  const cplx* obar2(int comp, int c2) const { return &ob2_[(static_cast<size_t>(comp) * cap_ + c2) * cap_]; }

  // Operator views at the current time t.
  Operator O0(int s) const;
  Operator O1(int s, int s1) const;
  Operator O2(int s, int s1, int s2) const;
  Operator Obar0() const;
  Operator Obar1(int s1) const;
  Operator Obar2(int s1, int s2) const;

  /// Forbidden products at the current time over `n_samples` pseudo-random grid
  /// tuples (plus the corners), seeded deterministically.
  ForbiddenReport check_forbidden(int n_samples = 64, std::uint64_t seed = 1) const;
  GradingDefects grading_defects() const;
  /// max |O1(t,s,t) - [L, O0(t,s)]| and max |O0(t,t) - L| at the current time.
  double boundary_residual() const;
  bool finite() const;

 private:
  struct Maps;
  void init();
  void compute_quadrature_obar(int i, const CVector& o0, const CVector& o1,
                               const CVector& o2, CVector& ob0, CVector& ob1,
                               CVector& ob2) const;
  void build_derived(const cplx* ob0, const cplx* ob1, int n, Maps& d) const;
  void step_auxiliary();
  void step_quadrature();
  void set_field_boundaries(int i, CVector& o0, CVector& o1, CVector& o2) const;
  void set_obar_boundaries(int i, const CVector& ob0, CVector& ob1, CVector& ob2) const;
  void field_derivative_o0(const Maps& d, const cplx* o0, const cplx* ob1, int n, cplx* out) const;
  void field_derivative_o1(const Maps& d, int col, const cplx* o1col, const cplx* o0, const cplx* ob2col, int n,
                           cplx* out) const;
  void field_derivative_o2(const Maps& d, int c1, int c2, const CVector& o1, const cplx* o0, const cplx* o2,
                           const CVector& ob2, int n, cplx* out) const;
  void obar_derivative(const Maps& d, int i, int n_out, const CVector& ob0, const CVector& ob1,
                       const CVector& ob2, CVector& d0, CVector& d1,
                       CVector& d2) const;
  size_t o2_pair_offset(int c1, int c2) const;
  void check_finite_or_throw(const char* what) const;
  void parallel_columns(int n, const std::function<void(int)>& fn) const;

  QubitSystemSpec spec_;
  TimeGrid grid_;
  GridKernel gk_;
  HierarchyOptions options_;
  ObarClosure closure_;
  int depth_;
  int index_ = 0;
  size_t cap_;

  LayoutPtr lay0_, lay1_, lay2_, layA_, layLd_;
  Operator H_, L_, Ld_;
  Operator perturbation_;

  // Tables (left, right, out) used by the derivative and boundary kernels.
  BilinearTable t_A0_, t_0A_, t_A1_, t_1A_, t_A2_, t_2A_;
  BilinearTable t_00_1_;   // lay0 * lay0 -> lay1
  BilinearTable t_01_2_;   // lay0 * lay1 -> lay2
  BilinearTable t_10_2_;   // lay1 * lay0 -> lay2
  BilinearTable t_Ld1_0_;  // L^dag * lay1 -> lay0
  BilinearTable t_Ld2_1_;  // L^dag * lay2 -> lay1
  BilinearTable t_Ld0_A_;  // L^dag * lay0 -> grading 0
  LinearMap ld_from1_, ld_from2_;  // X -> L^dag X
  LinearMap l_comm01_, l_comm12_;  // X -> [L, X]

  CVector o0_, o1_, o2_;
  CVector ob0_, ob1_, ob2_;

  std::shared_ptr<Maps> derived_;
  std::array<CVector, 9> scratch_;  // auxiliary-step work buffers
  mutable std::array<LinearMap, 4> colmap_;   // per-column maps: 1<-0, 2<-1, 2<-0, 2<-0 (obar)
};

/// Obar snapshots on a coarse sub-grid (every `stride`-th node of the hierarchy grid).
class ObarHistory {
 public:
  ObarHistory() = default;
  ObarHistory(const OHierarchy& h, int stride);

  /// Records the hierarchy's current Obar fields if its index is a multiple of the stride.
  void record(const OHierarchy& h);
  /// Runs a fresh hierarchy over its whole grid, recording every `stride` steps.
  static ObarHistory compute(const QubitSystemSpec& spec, const BathKernel& kernel, const TimeGrid& fine_grid,
                             int stride, HierarchyOptions options = {});

  const TimeGrid& grid() const { return coarse_; }
  int recorded() const { return static_cast<int>(ob0_.size()); }
  int k0() const { return k0_; }
  int k1() const { return k1_; }
  int k2() const { return k2_; }
  const LayoutPtr& layout0() const { return lay0_; }
  const LayoutPtr& layout1() const { return lay1_; }
  const LayoutPtr& layout2() const { return lay2_; }

  /// Obar0 components at coarse node i.
  const CVector& obar0(int i) const { return ob0_[static_cast<size_t>(i)]; }
  /// Obar1 at node i: k1 x (i+1) matrix (component, s1).
  const Mat& obar1(int i) const { return ob1_[static_cast<size_t>(i)]; }
  /// Obar2 at node i, component k: (i+1) x (i+1) symmetric matrix.
  const Mat& obar2(int i, int k) const { return ob2_[static_cast<size_t>(i)][static_cast<size_t>(k)]; }

 private:
  TimeGrid coarse_;
  int stride_ = 1;
  int k0_ = 0, k1_ = 0, k2_ = 0;
  LayoutPtr lay0_, lay1_, lay2_;
  std::vector<CVector> ob0_;
  std::vector<Mat> ob1_;
  std::vector<std::vector<Mat>> ob2_;
};

/// Binary snapshot of all hierarchy fields at the current time.
void write_checkpoint(const OHierarchy& h, const std::string& path);

struct CheckpointField {
  std::string name;
  std::vector<std::uint64_t> extents;
  CVector values;
};

struct Checkpoint {
  std::uint32_t version = 0;
  int n_qubits = 0;
  int depth = 0;
  std::string closure;
  std::string storage;
  double dt = 0.0;
  int n_nodes = 0;
  int index = 0;
  std::vector<CheckpointField> fields;
  const CheckpointField& field(const std::string& name) const;
};

Checkpoint read_checkpoint(const std::string& path);

}  // namespace nmqsd
