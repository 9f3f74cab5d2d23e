#pragma once

// Bath correlation kernels, their discretization on the time grid, and
// complex Gaussian noise paths with the zero-temperature statistics
//   M[z_t] = 0,  M[z_t z_s] = 0,  M[z_t z*_s] = alpha(t,s).

#include <cstdint>
#include <vector>

#include "nmqsd/types.hpp"

namespace nmqsd {

struct BathKernel {
  enum class Kind { ornstein_uhlenbeck, tabulated };

  Kind kind = Kind::ornstein_uhlenbeck;
  double gamma = 1.0;       // inverse memory time (OU)
  double table_dtau = 0.0;  // lag spacing of `table` (tabulated)
  std::vector<cplx> table;  // alpha(k * table_dtau), k = 0, 1, ...; negative lags by conjugation

  static BathKernel ornstein_uhlenbeck(double gamma);
  /// Stationary kernel given on a uniform lag grid; evaluated by linear interpolation.
  static BathKernel tabulated(double dtau, std::vector<cplx> lag_values);

  bool is_ou() const { return kind == Kind::ornstein_uhlenbeck; }
  /// alpha(t, s) as a function of the lag t - s.
  cplx lag(double tau) const;
  cplx eval(double t, double s) const;
  /// Largest lag the kernel can be evaluated at (infinite for OU).
  double max_lag() const;
  /// Checks parameters and positive semidefiniteness of the table's own Gram matrix.
  void validate() const;
};

cplx kernel_eval(const BathKernel& kernel, double t, double s);

/// Trapezoid weight of node b in an integral over [0, t_i].
inline double trapezoid_weight(const TimeGrid& g, int i, int b) {
  if (i == 0) return 0.0;
  return (b == 0 || b == i) ? 0.5 * g.dt : g.dt;
}

/// Kernel sampled on a uniform grid: alpha(t_a, t_b) = lag[a - b].
class GridKernel {
 public:
  GridKernel(const BathKernel& kernel, const TimeGrid& grid);

  const TimeGrid& grid() const { return grid_; }
  const BathKernel& kernel() const { return kernel_; }
  cplx operator()(int a, int b) const { return a >= b ? lag_[static_cast<size_t>(a - b)] : std::conj(lag_[static_cast<size_t>(b - a)]); }
  double weight(int i, int b) const { return trapezoid_weight(grid_, i, b); }

  /// sum_{b<=i} w_b alpha(t_i, t_b) x[b*stride]
  cplx convolve_row(int i, const cplx* x, size_t stride = 1) const;
  /// y[a] = sum_{b<=i} w_b alpha(t_a, t_b) x[b] for a = 0..i.
  void transform(int i, const cplx* x, cplx* y) const;
  /// Same with the conjugate kernel: y[a] = sum_b w_b conj(alpha(t_a, t_b)) x[b].
  void transform_conj(int i, const cplx* x, cplx* y) const;
  /// Gram matrix [alpha(t_a, t_b)] over the first n nodes.
  Mat gram(int n) const;

 private:
  BathKernel kernel_;
  TimeGrid grid_;
  std::vector<cplx> lag_;
  double decay_ = 0.0;  // exp(-gamma dt), OU only
};

/// Discretized complex Gaussian path. `values` holds z*_{t_i}.
struct NoisePath {
  TimeGrid grid;
  std::vector<cplx> values;
  std::uint64_t seed = 0;
};

/// Counter-based seed of trajectory `index` under `master_seed` (splitmix64 of master + index * golden ratio).
std::uint64_t trajectory_seed(std::uint64_t master_seed, std::uint64_t index);

/// Circular standard complex normals, E|xi|^2 = 1, from a 64-bit seed.
void standard_complex_normals(std::uint64_t seed, cplx* out, size_t n);

/// Samples z* = conj(C xi) with C C^dagger the Gram matrix of the kernel on the grid.
class NoiseSampler {
 public:
  NoiseSampler(const BathKernel& kernel, const TimeGrid& grid);

  const TimeGrid& grid() const { return grid_; }
  /// Diagonal shift added before factorization (0 when not needed).
  double regularization() const { return regularization_; }
  const Mat& factor() const { return factor_; }

  void sample_into(std::uint64_t seed, cplx* zstar) const;
  NoisePath sample(std::uint64_t seed) const;

 private:
  TimeGrid grid_;
  Mat factor_;
  double regularization_ = 0.0;
};

NoisePath sample_noise_path(const BathKernel& kernel, const TimeGrid& grid, std::uint64_t seed);

/// Discrete bath: alpha_rec(tau) = sum_k g_k^2 exp(-i omega_k tau).
struct BathModeSet {
  std::vector<double> omega;
  std::vector<double> g;
  double half_width = 0.0;
  double reconstruction_error = 0.0;  // max |alpha_rec - alpha| over the checked lags

  int count() const { return static_cast<int>(omega.size()); }
  cplx kernel(double tau) const;
};

/// Frequency window that keeps the recurrence time 2 pi / d_omega beyond the
/// simulated interval plus ten memory times, capped at 40 gamma.
double default_mode_window(double gamma, int n_modes, double t_max);

/// Uniform midpoint sampling of the Lorentzian spectral density
/// J(w) = (1/2pi) gamma^2 / (w^2 + gamma^2) on [-half_width, half_width],
/// g_k^2 = J(w_k) dw. Throws NumericalError when the kernel reconstruction
/// error on lags 0..check_t_max exceeds max_rel_error * alpha(0).
BathModeSet discretize_bath_modes(const BathKernel& kernel, int n_modes, double half_width, double check_t_max,
                                  double check_dt, double max_rel_error = 0.05);

/// z*_t = -i sum_k g_k z*_k exp(i omega_k t) with independent standard complex z_k.
class ModeNoiseGenerator {
 public:
  ModeNoiseGenerator(BathModeSet modes, const TimeGrid& grid);
  void sample_into(std::uint64_t seed, cplx* zstar) const;

 private:
  BathModeSet modes_;
  TimeGrid grid_;
  Mat phases_;  // (n_nodes x K): -i g_k exp(i omega_k t)
};

/// Sample statistics of a set of paths (z* values), used by the statistical tests.
struct CovarianceEstimate {
  Mat mean_z_zconj;   // M[z_i z*_j]
  Mat std_error;      // elementwise standard error of the above (real and imaginary combined)
  Mat pseudo;         // M[z*_i z*_j]
  Vec mean;           // M[z*_i]
};

CovarianceEstimate empirical_covariance(const std::vector<std::vector<cplx>>& zstar_paths);

}  // namespace nmqsd
