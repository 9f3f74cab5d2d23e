#pragma once

// Monte-Carlo check of the Gaussian integration-by-parts identity behind the
// time-local QSD equation:
//   M[z_s P_t] = int_0^t ds' alpha(s, s') M[O(t, s', z*) P_t],   P_t = |psi_t(z*)><psi_t(z)|.

#include <cstdint>
#include <vector>

#include "nmqsd/hierarchy.hpp"
#include "nmqsd/noise.hpp"

namespace nmqsd {

struct NovikovReport {
  double t = 0.0;
  std::vector<double> s;           // checked times
  double max_residual = 0.0;       // max |mean residual| over entries and s
  double standard_error = 0.0;     // standard error of the entry with the largest ratio
  double max_ratio = 0.0;          // max |mean| / standard error
  long n_traj = 0;
  bool consistent(double n_sigma = 5.0) const { return max_ratio <= n_sigma; }
};

/// Residual mean (z_s - X(s)) P_t per matrix entry, where
/// X(s) = int ds' alpha(s, s') O(t, s', z*) uses the hierarchy's stored fields at
/// its current time t. Paths and final states must come from the same grid.
NovikovReport verify_novikov(const OHierarchy& h, const std::vector<NoisePath>& paths,
                             const std::vector<Vec>& psi_t, const std::vector<int>& s_indices);

/// Runs a quadrature-closure hierarchy with stored fields to t_max, n_traj
/// trajectories on the same grid, and checks five s values in [0, t_max].
NovikovReport run_novikov_check(const QubitSystemSpec& spec, const BathKernel& kernel, const Vec& psi0,
                                const TimeGrid& grid, long n_traj, std::uint64_t master_seed = 1);

}  // namespace nmqsd
