#include "nmqsd/novikov.hpp"

#include <algorithm>
#include <cmath>

#include "nmqsd/qsd.hpp"

namespace nmqsd {

namespace {

Mat basis_matrix(const LayoutPtr& lay, int k) {
  Mat e = Mat::Zero(lay->dim(), lay->dim());
  const auto [r, c] = lay->entry(k);
  e(r, c) = 1.0;
  return e;
}

}  // namespace

NovikovReport verify_novikov(const OHierarchy& h, const std::vector<NoisePath>& paths,
                             const std::vector<Vec>& psi_t, const std::vector<int>& s_indices) {
  if (!h.has_fields()) throw ConfigError("novikov: the hierarchy must store its fields");
  if (h.depth() >= 2 && !h.has_o2_field()) throw ConfigError("novikov: depth-2 check needs the O2 field (quadrature closure)");
  if (paths.size() != psi_t.size() || paths.size() < 2) throw ConfigError("novikov: need matching paths and states (>= 2)");
  const int i = h.index();
  const int n = i + 1;
  for (const auto& p : paths)
    if (p.grid.n_nodes < n || std::abs(p.grid.dt - h.grid().dt) > 1e-12 * h.grid().dt)
      throw ConfigError("novikov: path grid does not match the hierarchy grid");
  for (int s : s_indices)
    if (s < 0 || s > i) throw ConfigError("novikov: s outside [0, t]");

  const GridKernel& gk = h.grid_kernel();
  const int dim = h.spec().dim();
  const int K0 = h.k0(), K1 = h.k1(), K2 = h.k2();
  std::vector<double> w(static_cast<size_t>(n));
  for (int b = 0; b < n; ++b) w[static_cast<size_t>(b)] = gk.weight(i, b);

  // Kernel transforms over s' of the stored fields:
  //   B0[k](s), B1[s1][k](s), B2[pair(s1<=s2)][k](s).
  auto transform = [&](const cplx* x) {
    Vec y(n);
    gk.transform(i, x, y.data());
    return y;
  };
  std::vector<Vec> B0(static_cast<size_t>(K0));
  for (int k = 0; k < K0; ++k) B0[static_cast<size_t>(k)] = transform(h.o0(k));
  std::vector<std::vector<Vec>> B1(static_cast<size_t>(n));
  if (K1 > 0)
    for (int s1 = 0; s1 < n; ++s1)
      for (int k = 0; k < K1; ++k) B1[static_cast<size_t>(s1)].push_back(transform(h.o1(s1, k)));
  std::vector<std::vector<Vec>> B2;
  if (K2 > 0)
    for (int s2 = 0; s2 < n; ++s2)
      for (int s1 = 0; s1 <= s2; ++s1) {
        std::vector<Vec> v;
        for (int k = 0; k < K2; ++k) v.push_back(transform(h.o2(s1, s2, k)));
        B2.push_back(std::move(v));
      }

  std::vector<Mat> E0, E1, E2;
  for (int k = 0; k < K0; ++k) E0.push_back(basis_matrix(h.layout0(), k));
  for (int k = 0; k < K1; ++k) E1.push_back(basis_matrix(h.layout1(), k));
  for (int k = 0; k < K2; ++k) E2.push_back(basis_matrix(h.layout2(), k));

  const size_t n_s = s_indices.size();
  std::vector<Mat> sum(n_s, Mat::Zero(dim, dim));
  std::vector<Eigen::MatrixXd> sumsq(n_s, Eigen::MatrixXd::Zero(dim, dim));
  std::vector<cplx> c1(static_cast<size_t>(K1)), c2(static_cast<size_t>(K2));
  for (size_t traj = 0; traj < paths.size(); ++traj) {
    const auto& z = paths[traj].values;
    const Mat P = psi_t[traj] * psi_t[traj].adjoint();
    for (size_t q = 0; q < n_s; ++q) {
      const int s = s_indices[q];
      Mat X = Mat::Zero(dim, dim);
      for (int k = 0; k < K0; ++k) X += B0[static_cast<size_t>(k)](s) * E0[static_cast<size_t>(k)];
      if (K1 > 0) {
        std::fill(c1.begin(), c1.end(), cplx{});
        for (int s1 = 0; s1 < n; ++s1) {
          const cplx f = w[static_cast<size_t>(s1)] * z[static_cast<size_t>(s1)];
          for (int k = 0; k < K1; ++k) c1[static_cast<size_t>(k)] += f * B1[static_cast<size_t>(s1)][static_cast<size_t>(k)](s);
        }
        for (int k = 0; k < K1; ++k) X += c1[static_cast<size_t>(k)] * E1[static_cast<size_t>(k)];
      }
      if (K2 > 0) {
        std::fill(c2.begin(), c2.end(), cplx{});
        size_t pair = 0;
        for (int s2 = 0; s2 < n; ++s2)
          for (int s1 = 0; s1 <= s2; ++s1, ++pair) {
            // Off-diagonal pairs stand for both orderings.
            const double mult = s1 == s2 ? 1.0 : 2.0;
            const cplx f = mult * w[static_cast<size_t>(s1)] * w[static_cast<size_t>(s2)] * z[static_cast<size_t>(s1)] *
                           z[static_cast<size_t>(s2)];
            for (int k = 0; k < K2; ++k) c2[static_cast<size_t>(k)] += f * B2[pair][static_cast<size_t>(k)](s);
          }
        for (int k = 0; k < K2; ++k) X += c2[static_cast<size_t>(k)] * E2[static_cast<size_t>(k)];
      }
      const Mat r = std::conj(z[static_cast<size_t>(s)]) * P - X * P;
      sum[q] += r;
      sumsq[q] += r.cwiseAbs2();
    }
  }

  NovikovReport rep;
  rep.t = h.t();
  rep.n_traj = static_cast<long>(paths.size());
  const double N = static_cast<double>(paths.size());
  for (size_t q = 0; q < n_s; ++q) {
    rep.s.push_back(h.grid().t(s_indices[q]));
    for (int a = 0; a < dim; ++a)
      for (int b = 0; b < dim; ++b) {
        const cplx m = sum[q](a, b) / N;
        const double var = std::max(0.0, sumsq[q](a, b) / N - std::norm(m));
        const double se = std::sqrt(var / (N - 1.0));
        const double res = std::abs(m);
        rep.max_residual = std::max(rep.max_residual, res);
        // Entries that vanish on every trajectory carry no information.
        if (se == 0.0 && res == 0.0) continue;
        const double ratio = se > 0.0 ? res / se : INFINITY;
        if (ratio > rep.max_ratio) {
          rep.max_ratio = ratio;
          rep.standard_error = se;
        }
      }
  }
  return rep;
}

NovikovReport run_novikov_check(const QubitSystemSpec& spec, const BathKernel& kernel, const Vec& psi0,
                                const TimeGrid& grid, long n_traj, std::uint64_t master_seed) {
  HierarchyOptions ho;
  ho.closure = ObarClosure::quadrature;
  ho.store_fields = true;
  OHierarchy h(spec, kernel, grid, ho);
  ObarHistory hist(h, 1);
  while (h.index() + 1 < grid.n_nodes) {
    h.step();
    hist.record(h);
  }
  const NoiseSampler sampler(kernel, grid);
  std::vector<NoisePath> paths;
  std::vector<Vec> finals;
  paths.reserve(static_cast<size_t>(n_traj));
  finals.reserve(static_cast<size_t>(n_traj));
  for (long j = 0; j < n_traj; ++j) {
    paths.push_back(sampler.sample(trajectory_seed(master_seed, static_cast<std::uint64_t>(j))));
    finals.push_back(qsd_trajectory(spec, hist, paths.back(), psi0).back());
  }
  const int i = h.index();
  std::vector<int> s_idx{0, i / 4, i / 2, (3 * i) / 4, i};
  s_idx.erase(std::unique(s_idx.begin(), s_idx.end()), s_idx.end());
  return verify_novikov(h, paths, finals, s_idx);
}

}  // namespace nmqsd
