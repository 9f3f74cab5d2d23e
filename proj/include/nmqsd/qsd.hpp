#pragma once

// Linear non-Markovian QSD trajectories
//   d psi/dt = (-iH + L z*_t - L^dag Obar(t, z*)) psi,
//   Obar(t, z*) = Obar0 + int z*_{s1} Obar1(s1) + iint z*_{s1} z*_{s2} Obar2(s1, s2),
// and their ensemble mean rho = M[|psi><psi|].

#include <cstdint>
#include <vector>

#include "nmqsd/hierarchy.hpp"
#include "nmqsd/master.hpp"

namespace nmqsd {

/// Running sums of projectors per output time; merged in a fixed order.
class EnsembleAccumulator {
 public:
  EnsembleAccumulator() = default;
  EnsembleAccumulator(int n_times, int dim);

  void add(int time_index, const Vec& psi);
  /// Adds another accumulator (same shape). Counts add.
  void merge(const EnsembleAccumulator& o);
  void finish_trajectory() { ++count_; }

  long count() const { return count_; }
  int n_times() const { return static_cast<int>(sum_.size()); }
  Mat mean(int time_index) const;
  /// Elementwise standard error of the mean: sqrt((E|x|^2 - |E x|^2) / (n - 1)).
  Mat standard_error(int time_index) const;
  /// Standard error of the trace.
  double trace_standard_error(int time_index) const;

 private:
  std::vector<Mat> sum_;
  std::vector<Eigen::MatrixXd> sumsq_;
  std::vector<double> tr_sum_, tr_sumsq_;
  long count_ = 0;
};

struct QsdOptions {
  long n_traj = 1000;
  std::uint64_t master_seed = 1;
  int chunk = 50;                 // trajectories propagated together
  int workers = 1;
  bool include_obar2 = true;      // false drops the noise-square term (diagnostic only)
  double norm_cap = 0.0;          // > 0: flag trajectories whose norm exceeds it
  bool exclude_flagged = false;   // drop flagged trajectories from the mean (biased; reported)
};

struct EnsembleResult {
  std::vector<double> t;
  std::vector<Mat> rho;
  std::vector<Mat> std_error;
  std::vector<double> trace_std_error;
  long n_traj = 0;
  long flagged = 0;
  long excluded = 0;
  EnsembleAccumulator accumulator;
};

/// Single trajectory on the history grid; returns psi at every node.
std::vector<Vec> qsd_trajectory(const QubitSystemSpec& spec, const ObarHistory& hist, const NoisePath& path,
                                const Vec& psi0, bool include_obar2 = true);

/// Trajectories `first .. first + count - 1` of the ensemble (seeded by index).
EnsembleAccumulator run_trajectory_block(const QubitSystemSpec& spec, const ObarHistory& hist, const NoiseSampler& sampler, const Vec& psi0,
                                         long first, long count, const QsdOptions& options, long* flagged = nullptr,
                                         long* excluded = nullptr);

EnsembleResult run_ensemble(const QubitSystemSpec& spec, const BathKernel& kernel, const Vec& psi0,
                            const ObarHistory& hist, const QsdOptions& options);

/// Builds the Obar history on a grid `refine` times finer than `grid`, then runs the ensemble on `grid`.
EnsembleResult run_ensemble(const QubitSystemSpec& spec, const BathKernel& kernel, const Vec& psi0,
                            const TimeGrid& grid, const QsdOptions& options, int refine = 5);

}  // namespace nmqsd
