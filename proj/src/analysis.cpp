#include "nmqsd/analysis.hpp"

#include <algorithm>

#include <unsupported/Eigen/MatrixFunctions>

#include "nmqsd/operators.hpp"

namespace nmqsd {

double concurrence(const Mat& rho2, double herm_tol) {
  if (rho2.rows() != 4 || rho2.cols() != 4) throw ConfigError("concurrence: expected a 4x4 density matrix");
  if (hermiticity_defect(rho2) > herm_tol) throw ConfigError("concurrence: input is not Hermitian");
  Mat yy = Mat::Zero(4, 4);
  // sigma_y (x) sigma_y, antidiagonal (-1, 1, 1, -1) in either bit convention
  yy(0, 3) = -1.0;
  yy(3, 0) = -1.0;
  yy(1, 2) = 1.0;
  yy(2, 1) = 1.0;
  const Mat tilde = yy * rho2.conjugate() * yy;
  Eigen::ComplexEigenSolver<Mat> es(rho2 * tilde, false);
  std::array<double, 4> lam{};
  for (int k = 0; k < 4; ++k) {
    double v = es.eigenvalues()(k).real();
    if (v < 0.0 && v > -1e-12) v = 0.0;
    lam[static_cast<size_t>(k)] = std::sqrt(std::max(v, 0.0));
  }
  std::sort(lam.begin(), lam.end(), std::greater<>());
  return std::max(0.0, lam[0] - lam[1] - lam[2] - lam[3]);
}

double trace_distance(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ConfigError("trace_distance: dimension mismatch");
  const Mat d = a - b;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (d + d.adjoint()), Eigen::EigenvaluesOnly);
  return 0.5 * es.eigenvalues().cwiseAbs().sum();
}

std::vector<ConcurrenceSeries> pairwise_concurrence_series(const std::vector<double>& t, const std::vector<Mat>& rho,
                                                           const std::vector<std::pair<int, int>>& pairs) {
  if (t.size() != rho.size()) throw ConfigError("concurrence series: time and state counts differ");
  std::vector<ConcurrenceSeries> out;
  for (const auto& p : pairs) {
    ConcurrenceSeries s;
    s.pair = p;
    s.t = t;
    for (const Mat& r : rho) {
      const int n = static_cast<int>(std::lround(std::log2(static_cast<double>(r.rows()))));
      const Mat r2 = partial_trace(r, n, {std::min(p.first, p.second), std::max(p.first, p.second)});
      s.values.push_back(std::clamp(concurrence(r2), 0.0, 1.0));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<double> single_qubit_benchmark(double gamma, double omega, const std::vector<double>& t, double kappa,
                                           double rho11_0) {
  if (!(gamma > 0.0)) throw ConfigError("benchmark: gamma must be positive");
  Eigen::Matrix2cd A;
  A << 0.0, -1.0, kappa * kappa * gamma / 2.0, cplx(-gamma, omega);
  std::vector<double> out;
  out.reserve(t.size());
  for (double ti : t) {
    const Eigen::Matrix2cd U = (A * ti).exp();
    // (u, J)(0) = (1, 0)
    out.push_back(rho11_0 * std::norm(U(0, 0)));
  }
  return out;
}

int count_local_extrema(const std::vector<double>& v, double min_swing) {
  if (v.size() < 3) return 0;
  int dir = 0, count = 0;
  double ext = v[0];
  for (size_t k = 1; k < v.size(); ++k) {
    const double x = v[k];
    if (dir == 0) {
      if (x > ext + min_swing) dir = 1;
      else if (x < ext - min_swing) dir = -1;
      if (dir != 0) ext = x;
    } else if (dir * (x - ext) > 0.0) {
      ext = x;
    } else if (dir * (ext - x) > min_swing) {
      ++count;
      dir = -dir;
      ext = x;
    }
  }
  return count;
}

}  // namespace nmqsd
