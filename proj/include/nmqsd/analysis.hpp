#pragma once

// Entanglement and distance measures, and the closed-form single-qubit reference.

#include <array>
#include <utility>
#include <vector>

#include "nmqsd/types.hpp"

namespace nmqsd {

/// Wootters concurrence of a two-qubit state.
double concurrence(const Mat& rho2, double herm_tol = 1e-8);

/// (1/2) sum |eig(a - b)|.
double trace_distance(const Mat& a, const Mat& b);

struct ConcurrenceSeries {
  std::pair<int, int> pair;  // 1-based qubit indices
  std::vector<double> t;
  std::vector<double> values;
};

/// Reduces every state to each pair and evaluates its concurrence (clamped to [0, 1]).
std::vector<ConcurrenceSeries> pairwise_concurrence_series(const std::vector<double>& t, const std::vector<Mat>& rho,
                                                           const std::vector<std::pair<int, int>>& pairs);

/// Excited-state population of one qubit, H = omega sigma_z / 2, L = kappa sigma_-,
/// OU kernel, initial population rho11_0. The amplitude u and the memory integral
/// J = kappa^2 int alpha(t-s) e^{i omega (t-s)} u(s) ds obey the linear system
///   u' = -J,  J' = (kappa^2 gamma / 2) u + (-gamma + i omega) J,
/// solved with an exact 2x2 matrix exponential.
std::vector<double> single_qubit_benchmark(double gamma, double omega, const std::vector<double>& t,
                                           double kappa = 1.0, double rho11_0 = 1.0);

/// Turning points of a sampled series: an extremum counts once the series has
/// moved back from it by more than `min_swing`. Plateaus count once.
int count_local_extrema(const std::vector<double>& v, double min_swing = 0.0);

}  // namespace nmqsd
