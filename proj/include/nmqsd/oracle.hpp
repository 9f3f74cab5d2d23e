#pragma once

// Reference engines that do not use the O hierarchy:
//   pseudomode  - system plus one damped bosonic mode (exact for the OU kernel);
//   finite bath - unitary evolution with K discrete modes in the
//                 excitation-restricted basis (any kernel, up to discretization).

#include <cstdint>
#include <vector>

#include "nmqsd/master.hpp"
#include "nmqsd/noise.hpp"

namespace nmqsd {

struct PseudomodeConfig {
  int fock_cutoff = 5;         // highest mode occupation kept
  double coupling = 0.0;       // Omega in Omega (L a^dag + L^dag a)
  double mode_decay = 0.0;     // amplitude decay rate: <a(tau) a^dag(0)> ~ exp(-mode_decay tau)
  double mode_frequency = 0.0;

  /// Omega^2 = gamma / 2, decay gamma, frequency 0.
  static PseudomodeConfig for_ou(double gamma, int fock_cutoff = 5);
  /// Omega^2 exp(-(decay + i frequency) tau), the correlation the mode induces.
  cplx induced_kernel(double tau) const;
  /// Checks the cutoff and that the induced kernel matches `kernel` on a few lags.
  void validate(const BathKernel& kernel, int n_qubits) const;
};

/// Free-mode two-time correlation <a(tau) a^dag(0)> from the vacuum, computed by
/// the quantum regression theorem with the same generator the engine uses.
std::vector<cplx> pseudomode_free_correlation(const PseudomodeConfig& cfg, const TimeGrid& grid);

/// RK4 on the joint system-mode state; returns the system marginals.
std::vector<StateSeries> pseudomode_evolve(const QubitSystemSpec& spec, const std::vector<Mat>& rho0,
                                           const TimeGrid& grid, const PseudomodeConfig& cfg,
                                           int output_stride = 1);
StateSeries pseudomode_evolve(const QubitSystemSpec& spec, double gamma, const Mat& rho0, const TimeGrid& grid,
                              const PseudomodeConfig& cfg, int output_stride = 1);

/// Max trace distance between runs at cutoff c and c + 1.
double pseudomode_cutoff_difference(const QubitSystemSpec& spec, const Mat& rho0, const TimeGrid& grid,
                                    const PseudomodeConfig& cfg, int output_stride = 1);

/// System-plus-bath basis states with total excitation exactly `sector`
/// (qubit excitations plus mode occupations).
class ExcitationBasis {
 public:
  ExcitationBasis(int n_qubits, int n_modes, int sector);

  size_t size() const { return system_.size(); }
  int sector() const { return sector_; }
  int system_state(size_t i) const { return system_[i]; }
  /// Packed sorted multiset of occupied mode indices (each index + 1, base n_modes + 1).
  std::uint64_t bath_key(size_t i) const { return bath_[i]; }
  /// Index of (system, bath multiset), or -1.
  long find(int system, std::uint64_t bath_key) const;
  const std::vector<int>& modes_of(size_t i) const { return modes_[i]; }

  static std::uint64_t pack(const std::vector<int>& sorted_modes, int n_modes);

 private:
  int n_qubits_, n_modes_, sector_;
  std::vector<int> system_;
  std::vector<std::uint64_t> bath_;
  std::vector<std::vector<int>> modes_;
  std::vector<std::pair<std::uint64_t, long>> lookup_;  // sorted (combined key, index)
};

/// sum_{m=0..cap} (system states with m excitations) * (bath occupations summing to <= cap - m).
std::uint64_t finite_bath_dimension(int n_qubits, int n_modes, int cap);

struct FiniteBathOptions {
  int excitation_cap = 3;
  int krylov_dim = 30;
  double krylov_tol = 1e-10;
  double memory_budget_bytes = 3e9;
};

struct FiniteBathDiagnostics {
  std::uint64_t dimension = 0;           // total restricted basis size over the sectors used
  double max_norm_defect = 0.0;          // | ||psi(t)|| - ||psi(0)|| | per sector vector
  double max_excitation_drift = 0.0;     // |<N_tot>(t) - <N_tot>(0)|
  long matvecs = 0;
};

/// Real symmetric Hamiltonian of one excitation sector in CSR form.
struct SectorHamiltonian {
  std::vector<long> row_ptr;
  std::vector<int> col;
  std::vector<double> val;
  size_t size() const { return row_ptr.empty() ? 0 : row_ptr.size() - 1; }
  void multiply(const cplx* x, cplx* y) const;
};

SectorHamiltonian build_sector_hamiltonian(const QubitSystemSpec& spec, const BathModeSet& modes,
                                           const ExcitationBasis& basis);

/// psi <- exp(-i tau H) psi by Lanczos with substeps; returns the matvec count.
long krylov_expm_apply(const SectorHamiltonian& H, std::vector<cplx>& psi, double tau, int max_dim, double tol);

/// Exact unitary evolution of pure initial states; outputs at every node of `grid`.
std::vector<StateSeries> finite_bath_evolve(const QubitSystemSpec& spec, const BathModeSet& modes,
                                            const std::vector<Vec>& psi0, const TimeGrid& grid,
                                            const FiniteBathOptions& options = {},
                                            FiniteBathDiagnostics* diagnostics = nullptr);

}  // namespace nmqsd
