#pragma once

// Independent dense constructions used as oracles in tests. Nothing here
// calls into the library's operator or propagation code.

#include <algorithm>
#include <cmath>
#include <complex>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

namespace ref {

using cplx = std::complex<double>;
using Mat = Eigen::MatrixXcd;
using Vec = Eigen::VectorXcd;

inline Mat kron(const Mat& a, const Mat& b) {
  Mat out(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// Single-qubit basis (|0>, |1>) with |1> excited.
inline Mat sz() { Mat m(2, 2); m << -1, 0, 0, 1; return m; }
inline Mat sminus() { Mat m(2, 2); m << 0, 1, 0, 0; return m; }
inline Mat splus() { return sminus().adjoint(); }

/// op acting on qubit q (1-based, qubit 1 leftmost in the tensor product).
inline Mat on_qubit(const Mat& op, int q, int n) {
  Mat out = Mat::Identity(1, 1);
  for (int k = 1; k <= n; ++k) out = kron(out, k == q ? op : Mat(Mat::Identity(2, 2)));
  return out;
}

inline Mat hamiltonian(int n, const std::vector<double>& omega, double jxy) {
  const int d = 1 << n;
  Mat h = Mat::Zero(d, d);
  for (int q = 1; q <= n; ++q) h += 0.5 * omega[q - 1] * on_qubit(sz(), q, n);
  Mat sx(2, 2), sy(2, 2);
  sx << 0, 1, 1, 0;
  sy << 0, cplx(0, -1), cplx(0, 1), 0;
  for (int q = 1; q < n; ++q)
    h += jxy * (on_qubit(sx, q, n) * on_qubit(sx, q + 1, n) + on_qubit(sy, q, n) * on_qubit(sy, q + 1, n));
  return h;
}

inline Mat lindblad_op(int n, const std::vector<double>& kappa) {
  const int d = 1 << n;
  Mat l = Mat::Zero(d, d);
  for (int q = 1; q <= n; ++q) l += kappa[q - 1] * on_qubit(sminus(), q, n);
  return l;
}

inline Vec basis(int n, std::initializer_list<int> bits_of_qubits) {
  int idx = 0;
  for (int b : bits_of_qubits) idx = 2 * idx + b;
  Vec v = Vec::Zero(1 << n);
  v(idx) = 1.0;
  return v;
}

/// Lindblad generator as a superoperator on column-stacked rho:
/// -i[H, .] + rate (2 L . L^dag - {L^dag L, .}).
inline Mat lindblad_superop(const Mat& h, const Mat& l, double rate) {
  const int d = static_cast<int>(h.rows());
  const Mat id = Mat::Identity(d, d);
  const Mat ldl = l.adjoint() * l;
  // vec(A X B) = (B^T kron A) vec(X)
  return -cplx(0, 1) * (kron(id, h) - kron(h.transpose(), id)) +
         rate * (2.0 * kron(l.conjugate(), l) - kron(id, ldl) - kron(ldl.transpose(), id));
}

inline Mat evolve_lindblad_exact(const Mat& h, const Mat& l, double rate, const Mat& rho0, double t) {
  const int d = static_cast<int>(h.rows());
  const Mat s = (lindblad_superop(h, l, rate) * t).exp();
  Vec v = Eigen::Map<const Vec>(rho0.data(), d * d);
  Vec w = s * v;
  return Eigen::Map<Mat>(w.data(), d, d);
}

/// Wootters concurrence through the eigenvalues of rho (sy sy) rho* (sy sy).
inline double concurrence(const Mat& rho) {
  Mat sy(2, 2);
  sy << 0, cplx(0, -1), cplx(0, 1), 0;
  const Mat yy = kron(sy, sy);
  const Mat r = rho * yy * rho.conjugate() * yy;
  Eigen::ComplexEigenSolver<Mat> es(r);
  std::vector<double> lam;
  for (int k = 0; k < 4; ++k) lam.push_back(std::sqrt(std::max(0.0, es.eigenvalues()(k).real())));
  std::sort(lam.rbegin(), lam.rend());
  return std::max(0.0, lam[0] - lam[1] - lam[2] - lam[3]);
}

inline double binomial(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

}  // namespace ref
