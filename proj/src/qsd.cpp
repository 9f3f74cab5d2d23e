#include "nmqsd/qsd.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace nmqsd {

// ---------------------------------------------------------------- accumulator

EnsembleAccumulator::EnsembleAccumulator(int n_times, int dim)
    : sum_(static_cast<size_t>(n_times), Mat::Zero(dim, dim)),
      sumsq_(static_cast<size_t>(n_times), Eigen::MatrixXd::Zero(dim, dim)),
      tr_sum_(static_cast<size_t>(n_times), 0.0),
      tr_sumsq_(static_cast<size_t>(n_times), 0.0) {}

void EnsembleAccumulator::add(int time_index, const Vec& psi) {
  const auto k = static_cast<size_t>(time_index);
  const Mat p = psi * psi.adjoint();
  sum_[k] += p;
  sumsq_[k] += p.cwiseAbs2();
  const double tr = psi.squaredNorm();
  tr_sum_[k] += tr;
  tr_sumsq_[k] += tr * tr;
}

void EnsembleAccumulator::merge(const EnsembleAccumulator& o) {
  if (sum_.empty()) {
    *this = o;
    return;
  }
  if (o.sum_.size() != sum_.size()) throw ConfigError("accumulator merge: shape mismatch");
  for (size_t k = 0; k < sum_.size(); ++k) {
    sum_[k] += o.sum_[k];
    sumsq_[k] += o.sumsq_[k];
    tr_sum_[k] += o.tr_sum_[k];
    tr_sumsq_[k] += o.tr_sumsq_[k];
  }
  count_ += o.count_;
}

Mat EnsembleAccumulator::mean(int time_index) const {
  if (count_ == 0) throw NumericalError("ensemble: no trajectories");
  return sum_[static_cast<size_t>(time_index)] / static_cast<double>(count_);
}

Mat EnsembleAccumulator::standard_error(int time_index) const {
  const auto k = static_cast<size_t>(time_index);
  const Mat m = mean(time_index);
  Mat se = Mat::Zero(m.rows(), m.cols());
  if (count_ < 2) return se;
  const double n = static_cast<double>(count_);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double var = std::max(0.0, sumsq_[k](r, c) / n - std::norm(m(r, c)));
      se(r, c) = std::sqrt(var / (n - 1.0));
    }
  return se;
}

double EnsembleAccumulator::trace_standard_error(int time_index) const {
  const auto k = static_cast<size_t>(time_index);
  if (count_ < 2) return 0.0;
  const double n = static_cast<double>(count_);
  const double m = tr_sum_[k] / n;
  return std::sqrt(std::max(0.0, tr_sumsq_[k] / n - m * m) / (n - 1.0));
}

// ---------------------------------------------------------------- propagation

namespace {

struct Operators {
  Mat H, L, Ld;
  std::vector<Mat> E0, E1, E2;  // basis matrices of the Obar layouts
};

std::vector<Mat> basis(const LayoutPtr& lay, int dim, int count) {
  std::vector<Mat> out;
  for (int k = 0; k < count; ++k) {
    Mat e = Mat::Zero(dim, dim);
    const auto [r, c] = lay->entry(k);
    e(r, c) = 1.0;
    out.push_back(std::move(e));
  }
  return out;
}

Operators make_operators(const QubitSystemSpec& spec, const ObarHistory& hist) {
  Operators ops;
  ops.H = build_system_hamiltonian(spec).dense();
  ops.L = build_lindblad_operator(spec).dense();
  ops.Ld = ops.L.adjoint();
  const int dim = spec.dim();
  ops.E0 = basis(hist.layout0(), dim, hist.k0());
  if (hist.k1() > 0) ops.E1 = basis(hist.layout1(), dim, hist.k1());
  if (hist.k2() > 0) ops.E2 = basis(hist.layout2(), dim, hist.k2());
  return ops;
}

/// Noise-dependent Obar components at node i for every trajectory of the block:
///   c1(k, b) = sum_s w_s z*_b(s) Obar1_k(s),
///   c2(k, b) = sum_{s,s'} w_s w_s' z*_b(s) z*_b(s') Obar2_k(s, s').
void noise_contractions(const ObarHistory& hist, int i, const Mat& Z, bool include_obar2, Mat& c1, Mat& c2) {
  const auto& g = hist.grid();
  const int n = i + 1;
  const auto B = Z.cols();
  Mat WZ(n, B);
  for (int s = 0; s < n; ++s) WZ.row(s) = trapezoid_weight(g, i, s) * Z.row(s);
  c1.resize(hist.k1(), B);
  if (hist.k1() > 0) c1.noalias() = hist.obar1(i) * WZ;
  c2.setZero(hist.k2(), B);
  if (!include_obar2) return;
  for (int k = 0; k < hist.k2(); ++k) {
    const Mat Y = hist.obar2(i, k) * WZ;
    c2.row(k) = (WZ.cwiseProduct(Y)).colwise().sum();
  }
}

/// Propagates the trajectories whose noise paths are the columns of Z.
template <class Visit>
void propagate_block(const Operators& ops, const ObarHistory& hist, const Mat& Z, const Vec& psi0,
                     bool include_obar2, Visit&& visit) {
  const int n_nodes = hist.recorded();
  const double dt = hist.grid().dt;
  const auto B = Z.cols();
  const Mat A0 = -kI * ops.H;

  Mat c1, c2;
  auto drift = [&](int i, Eigen::Index b, const Mat& ob0, const Vec& psi) -> Vec {
    Mat ob = ob0;
    for (size_t k = 0; k < ops.E1.size(); ++k) ob += c1(static_cast<Eigen::Index>(k), b) * ops.E1[k];
    for (size_t k = 0; k < ops.E2.size(); ++k) ob += c2(static_cast<Eigen::Index>(k), b) * ops.E2[k];
    return A0 * psi + Z(i, b) * (ops.L * psi) - ops.Ld * (ob * psi);
  };
  auto obar0 = [&](int i) {
    Mat m = Mat::Zero(ops.H.rows(), ops.H.cols());
    const auto& v = hist.obar0(i);
    for (size_t k = 0; k < ops.E0.size(); ++k) m += v[k] * ops.E0[k];
    return m;
  };

  std::vector<Vec> psi(static_cast<size_t>(B), psi0), f0(static_cast<size_t>(B)), pred(static_cast<size_t>(B));
  for (Eigen::Index b = 0; b < B; ++b) visit(0, b, psi[static_cast<size_t>(b)]);
  Mat ob_now = obar0(0);
  noise_contractions(hist, 0, Z, include_obar2, c1, c2);
  for (int i = 0; i + 1 < n_nodes; ++i) {
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto u = static_cast<size_t>(b);
      f0[u] = drift(i, b, ob_now, psi[u]);
      pred[u] = psi[u] + dt * f0[u];
    }
    const Mat ob_next = obar0(i + 1);
    noise_contractions(hist, i + 1, Z, include_obar2, c1, c2);
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto u = static_cast<size_t>(b);
      psi[u] += 0.5 * dt * (f0[u] + drift(i + 1, b, ob_next, pred[u]));
      if (!psi[u].allFinite()) throw NumericalError("qsd: non-finite state at t = " + std::to_string(hist.grid().t(i + 1)));
      visit(i + 1, b, psi[u]);
    }
    ob_now = ob_next;
  }
}

}  // namespace

std::vector<Vec> qsd_trajectory(const QubitSystemSpec& spec, const ObarHistory& hist, const NoisePath& path,
                                const Vec& psi0, bool include_obar2) {
  if (path.grid.n_nodes < hist.recorded() || std::abs(path.grid.dt - hist.grid().dt) > 1e-12 * hist.grid().dt)
    throw ConfigError("qsd: noise path does not cover the history grid");
  if (psi0.size() != spec.dim()) throw ConfigError("qsd: psi0 has the wrong dimension");
  const Operators ops = make_operators(spec, hist);
  Mat Z(hist.recorded(), 1);
  for (int i = 0; i < hist.recorded(); ++i) Z(i, 0) = path.values[static_cast<size_t>(i)];
  std::vector<Vec> out(static_cast<size_t>(hist.recorded()));
  propagate_block(ops, hist, Z, psi0, include_obar2,
                  [&](int i, Eigen::Index, const Vec& psi) { out[static_cast<size_t>(i)] = psi; });
  return out;
}

EnsembleAccumulator run_trajectory_block(const QubitSystemSpec& spec, const ObarHistory& hist, const NoiseSampler& sampler, const Vec& psi0,
                                         long first, long count, const QsdOptions& options, long* flagged,
                                         long* excluded) {
  const int n = hist.recorded();
  if (sampler.grid().n_nodes < n) throw ConfigError("qsd: sampler grid shorter than the history");
  const Operators ops = make_operators(spec, hist);
  EnsembleAccumulator acc(n, spec.dim());
  std::vector<cplx> path(static_cast<size_t>(sampler.grid().n_nodes));
  long n_flagged = 0, n_excluded = 0;
  const long chunk = std::max(1, options.chunk);
  for (long start = first; start < first + count; start += chunk) {
    const long b_count = std::min(chunk, first + count - start);
    Mat Z(n, b_count);
    for (long b = 0; b < b_count; ++b) {
      sampler.sample_into(trajectory_seed(options.master_seed, static_cast<std::uint64_t>(start + b)), path.data());
      for (int i = 0; i < n; ++i) Z(i, b) = path[static_cast<size_t>(i)];
    }
    // States are held until a trajectory is known to be unflagged.
    std::vector<std::vector<Vec>> states(static_cast<size_t>(b_count), std::vector<Vec>(static_cast<size_t>(n)));
    std::vector<char> flag(static_cast<size_t>(b_count), 0);
    propagate_block(ops, hist, Z, psi0, options.include_obar2, [&](int i, Eigen::Index b, const Vec& psi) {
      states[static_cast<size_t>(b)][static_cast<size_t>(i)] = psi;
      if (options.norm_cap > 0.0 && psi.norm() > options.norm_cap) flag[static_cast<size_t>(b)] = 1;
    });
    for (long b = 0; b < b_count; ++b) {
      const auto u = static_cast<size_t>(b);
      if (flag[u]) {
        ++n_flagged;
        if (options.exclude_flagged) {
          ++n_excluded;
          continue;
        }
      }
      for (int i = 0; i < n; ++i) acc.add(i, states[u][static_cast<size_t>(i)]);
      acc.finish_trajectory();
    }
  }
  if (flagged) *flagged += n_flagged;
  if (excluded) *excluded += n_excluded;
  return acc;
}

EnsembleResult run_ensemble(const QubitSystemSpec& spec, const BathKernel& kernel, const Vec& psi0,
                            const ObarHistory& hist, const QsdOptions& options) {
  if (options.n_traj < 1) throw ConfigError("qsd: n_traj must be positive");
  const NoiseSampler sampler(kernel, hist.grid());
  const long chunk = std::max(1, options.chunk);
  const long n_chunks = (options.n_traj + chunk - 1) / chunk;
  std::vector<EnsembleAccumulator> parts(static_cast<size_t>(n_chunks));
  std::vector<long> flagged(static_cast<size_t>(n_chunks), 0), excluded(static_cast<size_t>(n_chunks), 0);
  auto run_chunk = [&](long c) {
    const long first = c * chunk;
    const long count = std::min(chunk, options.n_traj - first);
    const auto u = static_cast<size_t>(c);
    parts[u] = run_trajectory_block(spec, hist, sampler, psi0, first, count, options, &flagged[u], &excluded[u]);
  };
  const int workers = std::max(1, std::min<int>(options.workers, static_cast<int>(n_chunks)));
  if (workers == 1) {
    for (long c = 0; c < n_chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (long c = w; c < n_chunks; c += workers) run_chunk(c);
        } catch (...) {
          errors[static_cast<size_t>(w)] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  // Fixed reduction order: chunk index.
  EnsembleResult res;
  for (long c = 0; c < n_chunks; ++c) {
    res.accumulator.merge(parts[static_cast<size_t>(c)]);
    res.flagged += flagged[static_cast<size_t>(c)];
    res.excluded += excluded[static_cast<size_t>(c)];
  }
  res.n_traj = res.accumulator.count();
  for (int i = 0; i < res.accumulator.n_times(); ++i) {
    res.t.push_back(hist.grid().t(i));
    res.rho.push_back(res.accumulator.mean(i));
    res.std_error.push_back(res.accumulator.standard_error(i));
    res.trace_std_error.push_back(res.accumulator.trace_standard_error(i));
  }
  return res;
}

EnsembleResult run_ensemble(const QubitSystemSpec& spec, const BathKernel& kernel, const Vec& psi0,
                            const TimeGrid& grid, const QsdOptions& options, int refine) {
  if (refine < 1) throw ConfigError("qsd: refine must be >= 1");
  const TimeGrid fine{grid.dt / refine, (grid.n_nodes - 1) * refine + 1};
  HierarchyOptions ho;
  ho.store_fields = false;
  ho.workers = options.workers;
  const ObarHistory hist = ObarHistory::compute(spec, kernel, fine, refine, ho);
  return run_ensemble(spec, kernel, psi0, hist, options);
}

}  // namespace nmqsd
