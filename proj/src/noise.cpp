#include "nmqsd/noise.hpp"

#include <numbers>
#include <random>

namespace nmqsd {

BathKernel BathKernel::ornstein_uhlenbeck(double gamma) {
  BathKernel k;
  k.kind = Kind::ornstein_uhlenbeck;
  k.gamma = gamma;
  k.validate();
  return k;
}

BathKernel BathKernel::tabulated(double dtau, std::vector<cplx> lag_values) {
  BathKernel k;
  k.kind = Kind::tabulated;
  k.table_dtau = dtau;
  k.table = std::move(lag_values);
  k.validate();
  return k;
}

double BathKernel::max_lag() const {
  if (is_ou()) return std::numeric_limits<double>::infinity();
  return table_dtau * static_cast<double>(table.size() - 1);
}

cplx BathKernel::lag(double tau) const {
  if (tau < 0.0) return std::conj(lag(-tau));
  if (is_ou()) return 0.5 * gamma * std::exp(-gamma * tau);
  const double x = tau / table_dtau;
  const auto k = static_cast<size_t>(std::floor(x));
  if (k + 1 >= table.size()) {
    if (k + 1 == table.size() && x - static_cast<double>(k) < 1e-9) return table.back();
    throw ConfigError("kernel: tabulated kernel queried at lag " + std::to_string(tau) + " beyond its table (" +
                      std::to_string(max_lag()) + ")");
  }
  const double f = x - static_cast<double>(k);
  return (1.0 - f) * table[k] + f * table[k + 1];
}

cplx BathKernel::eval(double t, double s) const { return lag(t - s); }

cplx kernel_eval(const BathKernel& kernel, double t, double s) {
  if (t < 0.0 || s < 0.0) throw ConfigError("kernel: times must be non-negative");
  return kernel.eval(t, s);
}

void BathKernel::validate() const {
  if (is_ou()) {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("kernel: gamma must be positive");
    return;
  }
  if (!(table_dtau > 0.0)) throw ConfigError("kernel: tabulated lag spacing must be positive");
  if (table.size() < 2) throw ConfigError("kernel: tabulated kernel needs at least two lags");
  if (std::abs(table[0].imag()) > 1e-12 * std::max(1.0, std::abs(table[0])))
    throw ConfigError("kernel: alpha(0) must be real for a Hermitian kernel");
  const auto n = static_cast<Eigen::Index>(table.size());
  Mat g(n, n);
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index b = 0; b < n; ++b)
      g(a, b) = a >= b ? table[static_cast<size_t>(a - b)] : std::conj(table[static_cast<size_t>(b - a)]);
  Eigen::SelfAdjointEigenSolver<Mat> es(g, Eigen::EigenvaluesOnly);
  const double scale = std::max(1.0, std::abs(table[0]) * static_cast<double>(n));
  if (es.eigenvalues().minCoeff() < -1e-10 * scale)
    throw ConfigError("kernel: tabulated Gram matrix is not positive semidefinite (min eigenvalue " +
                      std::to_string(es.eigenvalues().minCoeff()) + ")");
}

// ---------------------------------------------------------------- GridKernel

GridKernel::GridKernel(const BathKernel& kernel, const TimeGrid& grid) : kernel_(kernel), grid_(grid) {
  kernel_.validate();
  lag_.resize(static_cast<size_t>(grid.n_nodes));
  for (int k = 0; k < grid.n_nodes; ++k) lag_[static_cast<size_t>(k)] = kernel_.lag(grid.t(k));
  if (kernel_.is_ou()) decay_ = std::exp(-kernel_.gamma * grid.dt);
}

cplx GridKernel::convolve_row(int i, const cplx* x, size_t stride) const {
  cplx acc{};
  for (int b = 0; b <= i; ++b) acc += weight(i, b) * lag_[static_cast<size_t>(i - b)] * x[static_cast<size_t>(b) * stride];
  return acc;
}

void GridKernel::transform(int i, const cplx* x, cplx* y) const {
  if (i == 0) {
    y[0] = 0.0;
    return;
  }
  if (kernel_.is_ou()) {
    const double lam = decay_;
    const double pref = 0.5 * kernel_.gamma;
    cplx f{};
    for (int a = 0; a <= i; ++a) {
      f = lam * f + weight(i, a) * x[a];
      y[a] = f;
    }
    cplx g{};
    for (int a = i - 1; a >= 0; --a) {
      g = lam * (g + weight(i, a + 1) * x[a + 1]);
      y[a] += g;
    }
    for (int a = 0; a <= i; ++a) y[a] *= pref;
    return;
  }
  for (int a = 0; a <= i; ++a) {
    cplx acc{};
    for (int b = 0; b <= i; ++b) acc += weight(i, b) * (*this)(a, b) * x[b];
    y[a] = acc;
  }
}

void GridKernel::transform_conj(int i, const cplx* x, cplx* y) const {
  if (kernel_.is_ou()) {
    transform(i, x, y);
    return;
  }
  for (int a = 0; a <= i; ++a) {
    cplx acc{};
    for (int b = 0; b <= i; ++b) acc += weight(i, b) * std::conj((*this)(a, b)) * x[b];
    y[a] = acc;
  }
}

Mat GridKernel::gram(int n) const {
  Mat g(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) g(a, b) = (*this)(a, b);
  return g;
}

// ---------------------------------------------------------------- sampling

std::uint64_t trajectory_seed(std::uint64_t master_seed, std::uint64_t index) {
  std::uint64_t z = master_seed + (index + 1) * 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void standard_complex_normals(std::uint64_t seed, cplx* out, size_t n) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, std::numbers::sqrt2 / 2.0);
  for (size_t k = 0; k < n; ++k) {
    const double re = nd(rng);
    const double im = nd(rng);
    out[k] = {re, im};
  }
}

namespace {

// Plain Cholesky used only to name the first failing leading minor.
int first_bad_minor(const Mat& g) {
  const auto n = g.rows();
  Mat l = Mat::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    cplx s = g(j, j);
    for (Eigen::Index k = 0; k < j; ++k) s -= l(j, k) * std::conj(l(j, k));
    if (!(s.real() > 0.0)) return static_cast<int>(j + 1);
    l(j, j) = std::sqrt(s.real());
    for (Eigen::Index i = j + 1; i < n; ++i) {
      cplx t = g(i, j);
      for (Eigen::Index k = 0; k < j; ++k) t -= l(i, k) * std::conj(l(j, k));
      l(i, j) = t / l(j, j);
    }
  }
  return -1;
}

}  // namespace

NoiseSampler::NoiseSampler(const BathKernel& kernel, const TimeGrid& grid) : grid_(grid) {
  GridKernel gk(kernel, grid);
  Mat g = gk.gram(grid.n_nodes);
  Eigen::LLT<Mat> llt(g);
  if (llt.info() != Eigen::Success) {
    const double maxdiag = g.diagonal().real().maxCoeff();
    regularization_ = 1e-12 * maxdiag;
    g.diagonal().array() += regularization_;
    llt.compute(g);
    if (llt.info() != Eigen::Success) {
      const int k = first_bad_minor(g);
      throw NumericalError("noise: Gram matrix not positive definite after regularization " +
                           std::to_string(regularization_) + "; leading minor of order " + std::to_string(k) +
                           " (t = " + std::to_string(grid.t(std::max(k - 1, 0))) + ") fails");
    }
  }
  factor_ = llt.matrixL();
}

void NoiseSampler::sample_into(std::uint64_t seed, cplx* zstar) const {
  const auto n = static_cast<size_t>(grid_.n_nodes);
  Vec xi(static_cast<Eigen::Index>(n));
  standard_complex_normals(seed, xi.data(), n);
  Vec z = factor_.triangularView<Eigen::Lower>() * xi;
  for (size_t k = 0; k < n; ++k) zstar[k] = std::conj(z(static_cast<Eigen::Index>(k)));
}

NoisePath NoiseSampler::sample(std::uint64_t seed) const {
  NoisePath p;
  p.grid = grid_;
  p.seed = seed;
  p.values.resize(static_cast<size_t>(grid_.n_nodes));
  sample_into(seed, p.values.data());
  return p;
}

NoisePath sample_noise_path(const BathKernel& kernel, const TimeGrid& grid, std::uint64_t seed) {
  return NoiseSampler(kernel, grid).sample(seed);
}

// ---------------------------------------------------------------- bath modes

cplx BathModeSet::kernel(double tau) const {
  cplx acc{};
  for (size_t k = 0; k < omega.size(); ++k) acc += g[k] * g[k] * std::exp(cplx{0.0, -omega[k] * tau});
  return acc;
}

double default_mode_window(double gamma, int n_modes, double t_max) {
  const double recurrence_limited = std::numbers::pi * n_modes / (t_max + 10.0 / gamma);
  return std::min(40.0 * gamma, recurrence_limited);
}

BathModeSet discretize_bath_modes(const BathKernel& kernel, int n_modes, double half_width, double check_t_max,
                                  double check_dt, double max_rel_error) {
  if (n_modes < 1) throw ConfigError("bath modes: K must be >= 1");
  if (!kernel.is_ou()) throw ConfigError("bath modes: spectral density is only known for the OU kernel");
  if (!(half_width > 0.0)) throw ConfigError("bath modes: window half-width must be positive");
  const double gamma = kernel.gamma;
  BathModeSet m;
  m.half_width = half_width;
  const double dw = 2.0 * half_width / n_modes;
  for (int k = 0; k < n_modes; ++k) {
    const double w = -half_width + (k + 0.5) * dw;
    const double j = gamma * gamma / (2.0 * std::numbers::pi * (w * w + gamma * gamma));
    m.omega.push_back(w);
    m.g.push_back(std::sqrt(j * dw));
  }
  double err = 0.0;
  const int n_check = check_dt > 0.0 ? static_cast<int>(std::llround(check_t_max / check_dt)) : 0;
  for (int i = 0; i <= n_check; ++i) {
    const double tau = i * check_dt;
    err = std::max(err, std::abs(m.kernel(tau) - kernel.lag(tau)));
  }
  m.reconstruction_error = err;
  if (err > max_rel_error * std::abs(kernel.lag(0.0)))
    throw NumericalError("bath modes: kernel reconstruction error " + std::to_string(err) +
                         " exceeds threshold; widen the window or add modes");
  return m;
}

ModeNoiseGenerator::ModeNoiseGenerator(BathModeSet modes, const TimeGrid& grid) : modes_(std::move(modes)), grid_(grid) {
  const int k = modes_.count();
  phases_.resize(grid.n_nodes, k);
  for (int i = 0; i < grid.n_nodes; ++i)
    for (int j = 0; j < k; ++j)
      phases_(i, j) = cplx{0.0, -1.0} * modes_.g[static_cast<size_t>(j)] *
                      std::exp(cplx{0.0, modes_.omega[static_cast<size_t>(j)] * grid.t(i)});
}

void ModeNoiseGenerator::sample_into(std::uint64_t seed, cplx* zstar) const {
  Vec zk(phases_.cols());
  standard_complex_normals(seed, zk.data(), static_cast<size_t>(zk.size()));
  Vec out = phases_ * zk.conjugate();
  for (Eigen::Index i = 0; i < out.size(); ++i) zstar[i] = out(i);
}

CovarianceEstimate empirical_covariance(const std::vector<std::vector<cplx>>& paths) {
  if (paths.size() < 2) throw ConfigError("covariance: need at least two paths");
  const auto n = static_cast<Eigen::Index>(paths.front().size());
  const double m = static_cast<double>(paths.size());
  CovarianceEstimate est;
  est.mean_z_zconj = Mat::Zero(n, n);
  est.pseudo = Mat::Zero(n, n);
  est.mean = Vec::Zero(n);
  Mat sq_re = Mat::Zero(n, n), sq_im = Mat::Zero(n, n);
  Eigen::MatrixXd s2_re = Eigen::MatrixXd::Zero(n, n), s2_im = Eigen::MatrixXd::Zero(n, n);
  for (const auto& p : paths) {
    Eigen::Map<const Vec> zs(p.data(), n);
    Vec z = zs.conjugate();
    Mat prod = z * zs.transpose();  // z_i z*_j
    est.mean_z_zconj += prod;
    est.pseudo += zs * zs.transpose();
    est.mean += zs;
    s2_re += prod.real().cwiseAbs2();
    s2_im += prod.imag().cwiseAbs2();
  }
  est.mean_z_zconj /= m;
  est.pseudo /= m;
  est.mean /= m;
  Eigen::MatrixXd var_re = (s2_re / m - est.mean_z_zconj.real().cwiseAbs2()) * (m / (m - 1.0));
  Eigen::MatrixXd var_im = (s2_im / m - est.mean_z_zconj.imag().cwiseAbs2()) * (m / (m - 1.0));
  est.std_error = ((var_re + var_im).cwiseMax(0.0) / m).cwiseSqrt().cast<cplx>();
  return est;
}

}  // namespace nmqsd
