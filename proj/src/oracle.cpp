#include "nmqsd/oracle.hpp"

#include <algorithm>
#include <bit>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_map>

#include <Eigen/Sparse>

#include "nmqsd/analysis.hpp"

namespace nmqsd {

// ---------------------------------------------------------------- pseudomode

PseudomodeConfig PseudomodeConfig::for_ou(double gamma, int fock_cutoff) {
  if (!(gamma > 0.0)) throw ConfigError("pseudomode: gamma must be positive");
  PseudomodeConfig c;
  c.fock_cutoff = fock_cutoff;
  c.coupling = std::sqrt(gamma / 2.0);
  c.mode_decay = gamma;
  c.mode_frequency = 0.0;
  return c;
}

cplx PseudomodeConfig::induced_kernel(double tau) const {
  const double a = std::abs(tau);
  cplx v = coupling * coupling * std::exp(cplx(-mode_decay * a, -mode_frequency * a));
  return tau >= 0.0 ? v : std::conj(v);
}

void PseudomodeConfig::validate(const BathKernel& kernel, int n_qubits) const {
  if (fock_cutoff < n_qubits + 1)
    throw ConfigError("pseudomode: fock_cutoff " + std::to_string(fock_cutoff) + " is below n_qubits + 1");
  if (!(mode_decay > 0.0)) throw ConfigError("pseudomode: mode_decay must be positive");
  for (double tau : {0.0, 0.1, 0.5, 1.0, 2.0, 5.0}) {
    const cplx want = kernel.lag(tau);
    if (std::abs(induced_kernel(tau) - want) > 1e-12 * std::max(1.0, std::abs(want)))
      throw ConfigError("pseudomode: mode parameters do not reproduce the bath kernel at lag " + std::to_string(tau));
  }
}

namespace {

using SpMat = Eigen::SparseMatrix<cplx>;

struct PseudomodeModel {
  int dim_sys = 0, dim_mode = 0;
  SpMat H, a, ad;
  Eigen::VectorXd n_mode;  // a^dag a on the joint diagonal
  double decay = 0.0;

  Mat rhs(const Mat& rho) const {
    Mat out = -kI * (H * rho - rho * H);
    const Mat arho = a * rho;
    out += decay * (2.0 * (arho * ad) - n_mode.asDiagonal() * rho - rho * n_mode.asDiagonal());
    return out;
  }
};

PseudomodeModel build_pseudomode(const QubitSystemSpec& spec, const PseudomodeConfig& cfg, bool with_system) {
  PseudomodeModel m;
  m.dim_sys = with_system ? spec.dim() : 1;
  m.dim_mode = cfg.fock_cutoff + 1;
  m.decay = cfg.mode_decay;
  const int dm = m.dim_mode;
  Mat a = Mat::Zero(dm, dm);
  for (int k = 1; k < dm; ++k) a(k - 1, k) = std::sqrt(static_cast<double>(k));
  const Mat Is = Mat::Identity(m.dim_sys, m.dim_sys);
  const Mat Im = Mat::Identity(dm, dm);
  auto kron = [](const Mat& x, const Mat& y) {
    Mat r(x.rows() * y.rows(), x.cols() * y.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.cols(); ++j) r.block(i * y.rows(), j * y.cols(), y.rows(), y.cols()) = x(i, j) * y;
    return r;
  };
  const Mat A = kron(Is, a);
  Mat H = cfg.mode_frequency * kron(Is, a.adjoint() * a);
  if (with_system) {
    const Mat Hs = build_system_hamiltonian(spec).dense();
    const Mat L = build_lindblad_operator(spec).dense();
    H += kron(Hs, Im) + cfg.coupling * (kron(L, a.adjoint()) + kron(L.adjoint(), a));
  }
  m.H = H.sparseView();
  m.a = A.sparseView();
  m.ad = Mat(A.adjoint()).sparseView();
  m.n_mode.resize(m.dim_sys * dm);
  for (int s = 0; s < m.dim_sys; ++s)
    for (int k = 0; k < dm; ++k) m.n_mode(s * dm + k) = k;
  return m;
}

Mat rk4(const PseudomodeModel& m, const Mat& rho, double dt) {
  const Mat k1 = m.rhs(rho);
  const Mat k2 = m.rhs(rho + 0.5 * dt * k1);
  const Mat k3 = m.rhs(rho + 0.5 * dt * k2);
  const Mat k4 = m.rhs(rho + dt * k3);
  return rho + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

Mat trace_mode(const Mat& joint, int dim_sys, int dim_mode) {
  Mat r = Mat::Zero(dim_sys, dim_sys);
  for (int i = 0; i < dim_sys; ++i)
    for (int j = 0; j < dim_sys; ++j)
      for (int k = 0; k < dim_mode; ++k) r(i, j) += joint(i * dim_mode + k, j * dim_mode + k);
  return r;
}

}  // namespace

std::vector<cplx> pseudomode_free_correlation(const PseudomodeConfig& cfg, const TimeGrid& grid) {
  const auto m = build_pseudomode(QubitSystemSpec::uniform(1), cfg, false);
  // X(0) = a^dag |0><0|; <a(tau) a^dag(0)> = tr[a X(tau)]
  Mat x = Mat::Zero(m.dim_mode, m.dim_mode);
  x(1, 0) = 1.0;
  std::vector<cplx> out;
  out.push_back((m.a * x).trace());
  for (int i = 0; i + 1 < grid.n_nodes; ++i) {
    x = rk4(m, x, grid.dt);
    out.push_back((m.a * x).trace());
  }
  return out;
}

std::vector<StateSeries> pseudomode_evolve(const QubitSystemSpec& spec, const std::vector<Mat>& rho0,
                                           const TimeGrid& grid, const PseudomodeConfig& cfg, int output_stride) {
  if (output_stride < 1) throw ConfigError("pseudomode: output_stride must be >= 1");
  if (cfg.fock_cutoff < spec.n_qubits + 1)
    throw ConfigError("pseudomode: fock_cutoff must be at least n_qubits + 1");
  spec.validate();
  const auto m = build_pseudomode(spec, cfg, true);
  std::vector<StateSeries> out;
  for (const Mat& r0 : rho0) {
    if (r0.rows() != spec.dim()) throw ConfigError("pseudomode: initial state has the wrong dimension");
    Mat joint = Mat::Zero(m.dim_sys * m.dim_mode, m.dim_sys * m.dim_mode);
    for (int i = 0; i < m.dim_sys; ++i)
      for (int j = 0; j < m.dim_sys; ++j) joint(i * m.dim_mode, j * m.dim_mode) = r0(i, j);
    StateSeries s;
    s.t.push_back(0.0);
    s.rho.push_back(r0);
    log_state(s.log, r0);
    for (int i = 0; i + 1 < grid.n_nodes; ++i) {
      joint = rk4(m, joint, grid.dt);
      s.log.max_hermiticity_defect = std::max(s.log.max_hermiticity_defect, hermiticity_defect(joint));
      joint = 0.5 * (joint + joint.adjoint());
      if ((i + 1) % output_stride == 0) {
        Mat r = trace_mode(joint, m.dim_sys, m.dim_mode);
        s.t.push_back(grid.t(i + 1));
        log_state(s.log, r);
        s.rho.push_back(std::move(r));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

StateSeries pseudomode_evolve(const QubitSystemSpec& spec, double gamma, const Mat& rho0, const TimeGrid& grid,
                              const PseudomodeConfig& cfg, int output_stride) {
  cfg.validate(BathKernel::ornstein_uhlenbeck(gamma), spec.n_qubits);
  return pseudomode_evolve(spec, std::vector<Mat>{rho0}, grid, cfg, output_stride).front();
}

double pseudomode_cutoff_difference(const QubitSystemSpec& spec, const Mat& rho0, const TimeGrid& grid,
                                    const PseudomodeConfig& cfg, int output_stride) {
  PseudomodeConfig up = cfg;
  up.fock_cutoff += 1;
  const auto a = pseudomode_evolve(spec, std::vector<Mat>{rho0}, grid, cfg, output_stride).front();
  const auto b = pseudomode_evolve(spec, std::vector<Mat>{rho0}, grid, up, output_stride).front();
  double d = 0.0;
  for (size_t k = 0; k < a.rho.size(); ++k) d = std::max(d, trace_distance(a.rho[k], b.rho[k]));
  return d;
}

// ---------------------------------------------------------------- finite bath

std::uint64_t ExcitationBasis::pack(const std::vector<int>& sorted_modes, int n_modes) {
  std::uint64_t key = 0, base = 1;
  for (int m : sorted_modes) {
    key += static_cast<std::uint64_t>(m + 1) * base;
    base *= static_cast<std::uint64_t>(n_modes + 1);
  }
  return key;
}

ExcitationBasis::ExcitationBasis(int n_qubits, int n_modes, int sector)
    : n_qubits_(n_qubits), n_modes_(n_modes), sector_(sector) {
  if (n_modes < 1) throw ConfigError("finite bath: need at least one mode");
  if (sector < 0) throw ConfigError("finite bath: negative excitation sector");
  const int dim = 1 << n_qubits;
  std::vector<int> modes;
  // Nondecreasing mode sequences of length q.
  std::function<void(int, int, int)> rec = [&](int a, int q, int start) {
    if (static_cast<int>(modes.size()) == q) {
      system_.push_back(a);
      bath_.push_back(pack(modes, n_modes_));
      modes_.push_back(modes);
      return;
    }
    for (int k = start; k < n_modes_; ++k) {
      modes.push_back(k);
      rec(a, q, k);
      modes.pop_back();
    }
  };
  for (int a = 0; a < dim; ++a) {
    const int p = std::popcount(static_cast<unsigned>(a));
    if (p > sector) continue;
    rec(a, sector - p, 0);
  }
  lookup_.reserve(system_.size());
  for (size_t i = 0; i < system_.size(); ++i)
    lookup_.emplace_back(bath_[i] * static_cast<std::uint64_t>(dim) + static_cast<std::uint64_t>(system_[i]),
                         static_cast<long>(i));
  std::sort(lookup_.begin(), lookup_.end());
}

long ExcitationBasis::find(int system, std::uint64_t bath_key) const {
  const std::uint64_t key = bath_key * static_cast<std::uint64_t>(1 << n_qubits_) + static_cast<std::uint64_t>(system);
  auto it = std::lower_bound(lookup_.begin(), lookup_.end(), std::make_pair(key, -1L));
  if (it == lookup_.end() || it->first != key) return -1;
  return it->second;
}

std::uint64_t finite_bath_dimension(int n_qubits, int n_modes, int cap) {
  // multisets of size q from K modes: C(K + q - 1, q)
  auto multisets = [&](int q) {
    long double c = 1.0L;
    for (int i = 1; i <= q; ++i) c = c * (n_modes + i - 1) / i;
    return static_cast<std::uint64_t>(std::llround(static_cast<double>(c)));
  };
  auto binom = [](int n, int k) {
    std::uint64_t c = 1;
    for (int i = 1; i <= k; ++i) c = c * static_cast<std::uint64_t>(n - k + i) / static_cast<std::uint64_t>(i);
    return c;
  };
  std::uint64_t total = 0;
  for (int m = 0; m <= std::min(cap, n_qubits); ++m) {
    std::uint64_t bath = 0;
    for (int q = 0; q <= cap - m; ++q) bath += multisets(q);
    total += binom(n_qubits, m) * bath;
  }
  return total;
}

void SectorHamiltonian::multiply(const cplx* x, cplx* y) const {
  const size_t n = size();
  for (size_t r = 0; r < n; ++r) {
    cplx acc{};
    for (long k = row_ptr[r]; k < row_ptr[r + 1]; ++k) acc += val[static_cast<size_t>(k)] * x[col[static_cast<size_t>(k)]];
    y[r] = acc;
  }
}

SectorHamiltonian build_sector_hamiltonian(const QubitSystemSpec& spec, const BathModeSet& modes,
                                           const ExcitationBasis& basis) {
  const int N = spec.n_qubits;
  const int K = modes.count();
  const Mat Hs = build_system_hamiltonian(spec).dense();
  struct Trip {
    long r, c;
    double v;
  };
  std::vector<Trip> trips;
  for (size_t i = 0; i < basis.size(); ++i) {
    const int a = basis.system_state(i);
    const auto& occ = basis.modes_of(i);
    const auto ii = static_cast<long>(i);
    double diag = Hs(a, a).real();
    for (int k : occ) diag += modes.omega[static_cast<size_t>(k)];
    trips.push_back({ii, ii, diag});
    for (int a2 = 0; a2 < spec.dim(); ++a2) {
      if (a2 == a || Hs(a2, a) == cplx{}) continue;
      const long j = basis.find(a2, basis.bath_key(i));
      if (j >= 0) trips.push_back({j, ii, Hs(a2, a).real()});
    }
    // L b_k^dag: lower qubit q, add a quantum to mode k (and the Hermitian partner).
    for (int q = 1; q <= N; ++q) {
      const int bit = 1 << (N - q);
      if (!(a & bit)) continue;
      const double kq = spec.kappa[static_cast<size_t>(q - 1)];
      if (kq == 0.0) continue;
      for (int k = 0; k < K; ++k) {
        std::vector<int> occ2 = occ;
        occ2.insert(std::upper_bound(occ2.begin(), occ2.end(), k), k);
        const auto nk = static_cast<double>(std::count(occ2.begin(), occ2.end(), k));
        const long j = basis.find(a ^ bit, ExcitationBasis::pack(occ2, K));
        if (j < 0) throw NumericalError("finite bath: basis is not closed under the interaction");
        const double v = kq * modes.g[static_cast<size_t>(k)] * std::sqrt(nk);
        trips.push_back({j, ii, v});
        trips.push_back({ii, j, v});
      }
    }
  }
  std::sort(trips.begin(), trips.end(), [](const Trip& x, const Trip& y) { return x.r != y.r ? x.r < y.r : x.c < y.c; });
  SectorHamiltonian H;
  H.row_ptr.assign(basis.size() + 1, 0);
  for (size_t k = 0; k < trips.size(); ++k) {
    if (k > 0 && trips[k].r == trips[k - 1].r && trips[k].c == trips[k - 1].c) {
      H.val.back() += trips[k].v;
      continue;
    }
    H.col.push_back(static_cast<int>(trips[k].c));
    H.val.push_back(trips[k].v);
    H.row_ptr[static_cast<size_t>(trips[k].r) + 1] += 1;
  }
  std::partial_sum(H.row_ptr.begin(), H.row_ptr.end(), H.row_ptr.begin());
  return H;
}

long krylov_expm_apply(const SectorHamiltonian& H, std::vector<cplx>& psi, double tau, int max_dim, double tol) {
  const auto n = static_cast<Eigen::Index>(psi.size());
  if (n == 0 || tau == 0.0) return 0;
  max_dim = std::max(2, std::min<int>(max_dim, static_cast<int>(n)));
  long matvecs = 0;
  double remaining = tau;
  double h_try = tau;
  std::vector<Vec> V;
  Vec w(n);
  while (remaining > 1e-15 * tau) {
    Eigen::Map<Vec> x(psi.data(), n);
    const double beta = x.norm();
    if (beta == 0.0) return matvecs;
    V.assign(1, x / beta);
    std::vector<double> alpha, offd;
    double h = std::min(h_try, remaining);
    // Error estimate for step h with the current basis of size m.
    auto small_exp = [&](int m, double step) {
      Eigen::MatrixXd T = Eigen::MatrixXd::Zero(m, m);
      for (int k = 0; k < m; ++k) T(k, k) = alpha[static_cast<size_t>(k)];
      for (int k = 0; k + 1 < m; ++k) T(k, k + 1) = T(k + 1, k) = offd[static_cast<size_t>(k)];
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(T);
      const Eigen::MatrixXd& Q = es.eigenvectors();
      Vec ph(m);
      for (int k = 0; k < m; ++k) ph(k) = std::exp(cplx(0.0, -step * es.eigenvalues()(k))) * Q(0, k);
      return Vec(Q.cast<cplx>() * ph);
    };
    bool done = false, breakdown = false;
    int m = 0;
    Vec y;
    for (int j = 0; j < max_dim; ++j) {
      H.multiply(V[static_cast<size_t>(j)].data(), w.data());
      ++matvecs;
      const double a = V[static_cast<size_t>(j)].dot(w).real();
      alpha.push_back(a);
      // Full reorthogonalization (twice is enough).
      for (int pass = 0; pass < 2; ++pass)
        for (int k = 0; k <= j; ++k) w -= V[static_cast<size_t>(k)].dot(w) * V[static_cast<size_t>(k)];
      const double b = w.norm();
      m = j + 1;
      if (b < 1e-13 * std::max(1.0, std::abs(a))) {
        breakdown = true;
        y = small_exp(m, h);
        done = true;
        break;
      }
      offd.push_back(b);
      if (m >= 4 || m == max_dim) {
        y = small_exp(m, h);
        if (b * std::abs(y(m - 1)) < tol) {
          done = true;
          break;
        }
      }
      if (j + 1 < max_dim) V.push_back(w / b);
    }
    if (!done) {
      // Shrink the step on the existing basis until the estimate passes.
      while (true) {
        h *= 0.5;
        y = small_exp(m, h);
        if (offd.back() * std::abs(y(m - 1)) < tol || h < 1e-12 * tau) break;
      }
      h_try = h;
    } else if (!breakdown) {
      h_try = std::min(2.0 * h, tau);
    }
    Vec out = Vec::Zero(n);
    for (int k = 0; k < m; ++k) out += y(k) * V[static_cast<size_t>(k)];
    x = beta * out;
    remaining -= h;
  }
  return matvecs;
}

std::vector<StateSeries> finite_bath_evolve(const QubitSystemSpec& spec, const BathModeSet& modes,
                                            const std::vector<Vec>& psi0, const TimeGrid& grid,
                                            const FiniteBathOptions& options, FiniteBathDiagnostics* diagnostics) {
  spec.validate();
  const int N = spec.n_qubits;
  const int dim = spec.dim();
  const int K = modes.count();
  FiniteBathDiagnostics diag;

  // Split every initial state by excitation sector.
  std::vector<std::vector<Vec>> proj(static_cast<size_t>(N + 1));
  for (const Vec& p : psi0) {
    if (p.size() != dim) throw ConfigError("finite bath: initial state has the wrong dimension");
    for (int m = 0; m <= N; ++m) {
      Vec q = Vec::Zero(dim);
      for (int a = 0; a < dim; ++a)
        if (std::popcount(static_cast<unsigned>(a)) == m) q(a) = p(a);
      proj[static_cast<size_t>(m)].push_back(q);
    }
  }

  struct SectorRun {
    int m;
    std::unique_ptr<ExcitationBasis> basis;
    SectorHamiltonian H;
    std::vector<std::vector<cplx>> phi;  // evolved orthonormal starting vectors
    Mat coef;                            // (n_states x n_vectors): component of state j on vector r
    std::vector<int> cfg_id;             // global bath configuration of each basis element
    std::vector<double> norm0;
  };
  std::vector<SectorRun> runs;
  std::unordered_map<std::uint64_t, int> cfg_index;
  std::vector<int> cfg_quanta;

  for (int m = 0; m <= N; ++m) {
    const auto& P = proj[static_cast<size_t>(m)];
    // Gram-Schmidt over this sector's projections.
    std::vector<Vec> u;
    for (const Vec& p : P) {
      Vec r = p;
      for (const Vec& v : u) r -= v.dot(r) * v;
      for (const Vec& v : u) r -= v.dot(r) * v;
      if (r.norm() > 1e-12) u.push_back(r / r.norm());
    }
    if (u.empty()) continue;
    if (m > options.excitation_cap)
      throw ConfigError("finite bath: initial state has " + std::to_string(m) + " excitations, above the cap " +
                        std::to_string(options.excitation_cap));
    SectorRun run;
    run.m = m;
    run.basis = std::make_unique<ExcitationBasis>(N, K, m);
    const double bytes = static_cast<double>(run.basis->size()) * 16.0 * (options.krylov_dim + 3 + u.size());
    diag.dimension += run.basis->size();
    if (bytes > options.memory_budget_bytes)
      throw ConfigError("finite bath: sector " + std::to_string(m) + " has dimension " +
                        std::to_string(run.basis->size()) + ", above the memory budget");
    run.H = build_sector_hamiltonian(spec, modes, *run.basis);
    run.coef.resize(static_cast<Eigen::Index>(P.size()), static_cast<Eigen::Index>(u.size()));
    for (size_t j = 0; j < P.size(); ++j)
      for (size_t r = 0; r < u.size(); ++r) run.coef(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(r)) = u[r].dot(P[j]);
    const std::uint64_t vacuum = ExcitationBasis::pack({}, K);
    for (const Vec& v : u) {
      std::vector<cplx> phi(run.basis->size(), cplx{});
      for (int a = 0; a < dim; ++a) {
        if (v(a) == cplx{}) continue;
        const long idx = run.basis->find(a, vacuum);
        phi[static_cast<size_t>(idx)] = v(a);
      }
      run.norm0.push_back(1.0);
      run.phi.push_back(std::move(phi));
    }
    run.cfg_id.resize(run.basis->size());
    for (size_t i = 0; i < run.basis->size(); ++i) {
      const auto key = run.basis->bath_key(i);
      auto [it, fresh] = cfg_index.emplace(key, static_cast<int>(cfg_quanta.size()));
      if (fresh) cfg_quanta.push_back(static_cast<int>(run.basis->modes_of(i).size()));
      run.cfg_id[i] = it->second;
    }
    runs.push_back(std::move(run));
  }

  const auto n_cfg = static_cast<Eigen::Index>(cfg_quanta.size());
  std::vector<StateSeries> out(psi0.size());
  std::vector<double> n_tot0(psi0.size(), 0.0);
  Mat Psi(n_cfg, dim);
  auto record = [&](double t, bool first) {
    for (size_t j = 0; j < psi0.size(); ++j) {
      Psi.setZero();
      double ntot = 0.0;
      for (const auto& run : runs) {
        for (size_t r = 0; r < run.phi.size(); ++r) {
          const cplx c = run.coef(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(r));
          if (c == cplx{}) continue;
          const auto& phi = run.phi[r];
          for (size_t i = 0; i < phi.size(); ++i)
            Psi(run.cfg_id[i], run.basis->system_state(static_cast<size_t>(i))) += c * phi[i];
        }
      }
      for (Eigen::Index b = 0; b < n_cfg; ++b)
        for (int a = 0; a < dim; ++a) {
          const double p = std::norm(Psi(b, a));
          if (p != 0.0) ntot += p * (cfg_quanta[static_cast<size_t>(b)] + std::popcount(static_cast<unsigned>(a)));
        }
      Mat rho = (Psi.adjoint() * Psi).transpose();
      if (first) n_tot0[j] = ntot;
      diag.max_excitation_drift = std::max(diag.max_excitation_drift, std::abs(ntot - n_tot0[j]));
      out[j].t.push_back(t);
      log_state(out[j].log, rho);
      out[j].rho.push_back(std::move(rho));
    }
  };
  record(0.0, true);
  for (int i = 0; i + 1 < grid.n_nodes; ++i) {
    for (auto& run : runs)
      for (size_t r = 0; r < run.phi.size(); ++r) {
        diag.matvecs += krylov_expm_apply(run.H, run.phi[r], grid.dt, options.krylov_dim, options.krylov_tol);
        const double nrm = Eigen::Map<const Vec>(run.phi[r].data(), static_cast<Eigen::Index>(run.phi[r].size())).norm();
        diag.max_norm_defect = std::max(diag.max_norm_defect, std::abs(nrm - run.norm0[r]));
      }
    record(grid.t(i + 1), false);
  }
  if (diagnostics) *diagnostics = diag;
  return out;
}

}  // namespace nmqsd
