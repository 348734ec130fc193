#pragma once

// Test-side oracles, implemented independently of the library code they
// check: naive loops, hand-rolled linear algebra, finite differences.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>

namespace oracles {

// Naive double-loop forward pass of the two-layer net.
inline Eigen::VectorXd naive_shallow_forward(const Eigen::MatrixXd& weights,
                                             const Eigen::VectorXd& signs,
                                             const Eigen::MatrixXd& inputs) {
  const Eigen::Index n = inputs.rows();
  const Eigen::Index m = weights.cols();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double acc = 0.0;
    for (Eigen::Index r = 0; r < m; ++r) {
      double pre = 0.0;
      for (Eigen::Index k = 0; k < weights.rows(); ++k)
        pre += weights(k, r) * inputs(i, k);
      if (pre > 0.0) acc += signs[r] * pre;
    }
    out[i] = acc / std::sqrt(static_cast<double>(m));
  }
  return out;
}

// Central finite-difference gradient of a scalar function of a flat vector.
inline Eigen::VectorXd fd_gradient(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& at, double h) {
  Eigen::VectorXd grad(at.size());
  for (Eigen::Index i = 0; i < at.size(); ++i) {
    Eigen::VectorXd hi = at, lo = at;
    hi[i] += h;
    lo[i] -= h;
    grad[i] = (f(hi) - f(lo)) / (2.0 * h);
  }
  return grad;
}

// Dense finite-difference Hessian from an analytic gradient.
inline Eigen::MatrixXd fd_hessian(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& grad,
    const Eigen::VectorXd& at, double h) {
  const Eigen::Index n = at.size();
  Eigen::MatrixXd hess(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::VectorXd hi = at, lo = at;
    hi[j] += h;
    lo[j] -= h;
    hess.col(j) = (grad(hi) - grad(lo)) / (2.0 * h);
  }
  return 0.5 * (hess + hess.transpose()).eval();
}

// Gauss-Jordan inverse with partial pivoting.
inline Eigen::MatrixXd gauss_jordan_inverse(Eigen::MatrixXd a) {
  const Eigen::Index n = a.rows();
  if (a.cols() != n) throw std::invalid_argument("inverse: square only");
  Eigen::MatrixXd inv = Eigen::MatrixXd::Identity(n, n);
  for (Eigen::Index col = 0; col < n; ++col) {
    Eigen::Index pivot = col;
    for (Eigen::Index r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    if (a(pivot, col) == 0.0) throw std::runtime_error("inverse: singular");
    a.row(col).swap(a.row(pivot));
    inv.row(col).swap(inv.row(pivot));
    const double scale = a(col, col);
    a.row(col) /= scale;
    inv.row(col) /= scale;
    for (Eigen::Index r = 0; r < n; ++r) {
      if (r == col) continue;
      const double factor = a(r, col);
      a.row(r) -= factor * a.row(col);
      inv.row(r) -= factor * inv.row(col);
    }
  }
  return inv;
}

// Closed-form eigenvalues of a symmetric 3x3 matrix (trigonometric method),
// returned ascending.
inline std::vector<double> symmetric_3x3_eigenvalues(const Eigen::Matrix3d& a) {
  const double p1 = a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
  std::vector<double> eig(3);
  if (p1 == 0.0) {
    eig = {a(0, 0), a(1, 1), a(2, 2)};
    std::sort(eig.begin(), eig.end());
    return eig;
  }
  const double q = a.trace() / 3.0;
  const double p2 = (a(0, 0) - q) * (a(0, 0) - q) +
                    (a(1, 1) - q) * (a(1, 1) - q) +
                    (a(2, 2) - q) * (a(2, 2) - q) + 2.0 * p1;
  const double p = std::sqrt(p2 / 6.0);
  Eigen::Matrix3d b = (a - q * Eigen::Matrix3d::Identity()) / p;
  double r = b.determinant() / 2.0;
  r = std::clamp(r, -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  const double e1 = q + 2.0 * p * std::cos(phi);
  const double e3 = q + 2.0 * p * std::cos(phi + 2.0 * M_PI / 3.0);
  const double e2 = 3.0 * q - e1 - e3;
  eig = {e3, e2, e1};
  std::sort(eig.begin(), eig.end());
  return eig;
}

struct JacobiSvd {
  Eigen::MatrixXd u;  // columns are left singular vectors
  Eigen::VectorXd sigma;
};

// One-sided Jacobi SVD; requires rows >= cols.
inline JacobiSvd one_sided_jacobi_svd(Eigen::MatrixXd a, int sweeps = 60) {
  const Eigen::Index n = a.cols();
  if (a.rows() < n) throw std::invalid_argument("jacobi_svd: rows < cols");
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    bool rotated = false;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double alpha = a.col(p).squaredNorm();
        const double beta = a.col(q).squaredNorm();
        const double gamma = a.col(p).dot(a.col(q));
        if (std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        const Eigen::VectorXd col_p = a.col(p);
        a.col(p) = c * col_p - s * a.col(q);
        a.col(q) = s * col_p + c * a.col(q);
      }
    }
    if (!rotated) break;
  }
  JacobiSvd out;
  out.sigma.resize(n);
  out.u.resize(a.rows(), n);
  std::vector<Eigen::Index> order(n);
  for (Eigen::Index j = 0; j < n; ++j) order[j] = j;
  std::vector<double> norms(n);
  for (Eigen::Index j = 0; j < n; ++j) norms[j] = a.col(j).norm();
  std::sort(order.begin(), order.end(),
            [&](Eigen::Index x, Eigen::Index y) { return norms[x] > norms[y]; });
  for (Eigen::Index j = 0; j < n; ++j) {
    const double sigma = norms[order[j]];
    out.sigma[j] = sigma;
    out.u.col(j) = sigma > 0.0 ? (a.col(order[j]) / sigma).eval()
                               : Eigen::VectorXd::Zero(a.rows()).eval();
  }
  return out;
}

}  // namespace oracles
