#pragma once

#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace nmqsd {

using cplx = std::complex<double>;
using Mat = Eigen::MatrixXcd;
using Vec = Eigen::VectorXcd;
/// Heap buffer with Eigen's packet alignment, so vectorized loops over it peel
/// the same way on every run.
using CVector = std::vector<cplx, Eigen::aligned_allocator<cplx>>;

inline constexpr cplx kI{0.0, 1.0};

/// Invalid input (bad spec, bad config, malformed index set).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A propagation produced NaN/inf, lost trace, or failed a factorization.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Uniform time grid t_i = i*dt, i = 0..n_nodes-1.
struct TimeGrid {
  double dt = 0.01;
  int n_nodes = 1;

  double t(int i) const { return dt * i; }
  double t_max() const { return dt * (n_nodes - 1); }

  static TimeGrid from_t_max(double dt, double t_max) {
    if (!(dt > 0.0)) throw ConfigError("grid: dt must be positive");
    if (t_max < 0.0) throw ConfigError("grid: t_max must be non-negative");
    return TimeGrid{dt, static_cast<int>(std::llround(t_max / dt)) + 1};
  }
};

}  // namespace nmqsd
