#pragma once

// Exact master equation driven by the O hierarchy,
//   d rho/dt = -i[H, rho] + [L, R] - [L^dag, R^dag],   R = M[P_t Obar^dag],
// and the Markov-limit Lindblad engine with rate 1/2.
//
// R is linear in rho. With kernel transforms B(c) = int alpha(c,c') O0(c') and
// C(b) = int alpha(b,a) Obar1(a), and Ebar = K Obar2 K^T:
//   (i)   rho Obar0^dag
//   (ii)  int dc O0(c) rho C(c)^dag
//   (iii) iint db dc O1(b,c) rho (C(b) B(c))^dag
//   (iv)  iint dc dd [O0(c) O0(d) + O1(c,d)] rho Ebar(c,d)^dag
// Terms (iii) and (iv) only have grading-3 right factors, so each collapses to
// G_e rho E_e^dag over the grading-3 basis matrices E_e.

#include <array>
#include <functional>
#include <vector>

#include "nmqsd/hierarchy.hpp"

namespace nmqsd {

struct RAssembly {
  Mat R;
  std::array<Mat, 4> terms;  // (i)..(iv)
  double quadrature_cost = 0.0;  // complex multiply-adds spent on the rho-independent contractions
};

/// rho-independent part of R at the hierarchy's current time:
///   R(rho) = rho Obar0^dag + sum_l X_l rho E_l^dag + sum_e (G3_e + G4_e) rho E_e^dag.
class RKernel {
 public:
  RKernel() = default;
  static RKernel build(const OHierarchy& h);

  double t() const { return t_; }
  Mat apply(const Mat& rho) const;
  RAssembly assemble(const Mat& rho) const;
  double quadrature_cost() const { return cost_; }

 private:
  struct RightFactor {
    int row, col;  // E = |row><col|
    Mat left;      // operator multiplying rho from the left
  };
  static void add_term(Mat& out, const Mat& left, const Mat& rho, int row, int col);

  double t_ = 0.0;
  Mat obar0_dag_;
  std::vector<RightFactor> term2_, term3_, term4_;
  double cost_ = 0.0;
};

/// Direct evaluation of the four R summands as nested trapezoid sums over all
/// grid tuples (O(n_t^4)); for cross-checking RKernel on coarse grids.
RAssembly assemble_R_bruteforce(const OHierarchy& h, const Mat& rho);

/// Same sums through the factorized recursions of RKernel.
RAssembly assemble_R(const OHierarchy& h, const Mat& rho);

/// Generator -i[H, rho] + [L, R] - [L^dag, R^dag].
Mat master_rhs(const Mat& rho, const Mat& R, const Mat& H, const Mat& L);

struct InvariantLog {
  double max_trace_defect = 0.0;
  double max_hermiticity_defect = 0.0;  // before symmetrization
  double min_eigenvalue = 1.0;
  void merge(const InvariantLog& o);
};

struct StateSeries {
  std::vector<double> t;
  std::vector<Mat> rho;
  InvariantLog log;
};

/// One Heun step of the master equation from t to t + dt. The two kernels
/// must belong to t and t + dt. Returns the symmetrized state; `asym` gets the
/// hermiticity defect before symmetrization.
Mat step_master(const Mat& rho, const RKernel& r_now, const RKernel& r_next, const Mat& H, const Mat& L, double dt,
                double* asym = nullptr);

struct MasterOptions {
  HierarchyOptions hierarchy;
  int output_stride = 1;           // record every k-th node
  double trace_abort = 1e-4;       // abort when |tr rho - 1| exceeds this
  std::function<void(const OHierarchy&)> on_step;  // called after every hierarchy step
};

/// Co-evolves one hierarchy and several initial states on the shared grid.
std::vector<StateSeries> propagate_master(const QubitSystemSpec& spec, const BathKernel& kernel,
                                          const std::vector<Mat>& rho0, const TimeGrid& grid,
                                          const MasterOptions& options = {});
StateSeries propagate_master(const QubitSystemSpec& spec, const BathKernel& kernel, const Mat& rho0,
                             const TimeGrid& grid, const MasterOptions& options = {});

/// d rho/dt = -i[H, rho] + (1/2)(2 L rho L^dag - L^dag L rho - rho L^dag L), RK4.
std::vector<StateSeries> lindblad_propagate(const QubitSystemSpec& spec, const std::vector<Mat>& rho0,
                                            const TimeGrid& grid, int output_stride = 1, double rate = 0.5);
StateSeries lindblad_propagate(const QubitSystemSpec& spec, const Mat& rho0, const TimeGrid& grid,
                               int output_stride = 1, double rate = 0.5);

/// Records trace, hermiticity and min eigenvalue of rho into the log.
void log_state(InvariantLog& log, const Mat& rho);

}  // namespace nmqsd
