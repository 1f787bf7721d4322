#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace droplin {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

struct CapacityError : std::runtime_error {
  explicit CapacityError(const std::string& what) : std::runtime_error(what) {}
};

/// Thin SVD of a dense matrix: X = U * diag(sigma) * V^T with
/// sigma non-increasing and U, V having min(rows, cols) columns.
struct Spectrum {
  Matrix u;
  Vector sigma;
  Matrix v;

  Matrix reconstruct() const { return u * sigma.asDiagonal() * v.transpose(); }
};

namespace detail {

// One-sided Jacobi on a matrix with rows >= cols: orthogonalize the
// columns of A by plane rotations applied on the right, accumulating V.
inline void one_sided_jacobi(Matrix& a, Matrix& v) {
  const Eigen::Index n = a.cols();
  v = Matrix::Identity(n, n);
  const double tol = 1e-12;
  const int max_sweeps = 60;

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool converged = true;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double app = a.col(p).squaredNorm();
        const double aqq = a.col(q).squaredNorm();
        const double apq = a.col(p).dot(a.col(q));
        if (std::abs(apq) <= tol * std::sqrt(app * aqq) || apq == 0.0) continue;
        converged = false;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        a.applyOnTheRight(p, q, Eigen::JacobiRotation<double>(c, s));
        v.applyOnTheRight(p, q, Eigen::JacobiRotation<double>(c, s));
      }
    }
    if (converged) return;
  }
  throw NumericalError("one-sided Jacobi SVD did not converge in 60 sweeps");
}

} // namespace detail

/// One-sided Jacobi SVD, suitable for the small dense matrices used here.
inline Spectrum svd(const Matrix& x) {
  if (!x.allFinite()) throw std::invalid_argument("svd: non-finite entries");
  const bool transposed = x.rows() < x.cols();
  Matrix a = transposed ? Matrix(x.transpose()) : x;
  Matrix v;
  detail::one_sided_jacobi(a, v);

  const Eigen::Index n = a.cols();
  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  Vector norms(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    norms[j] = a.col(j).norm();
    order[static_cast<size_t>(j)] = j;
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return norms[i] > norms[j]; });

  Spectrum s;
  s.u.resize(a.rows(), n);
  s.v.resize(v.rows(), n);
  s.sigma.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index src = order[static_cast<size_t>(j)];
    s.sigma[j] = norms[src];
    s.v.col(j) = v.col(src);
    if (norms[src] > 0.0) {
      s.u.col(j) = a.col(src) / norms[src];
    } else {
      // Null column: any unit vector keeps U V^T consistent at sigma = 0.
      s.u.col(j).setZero();
      s.u(j % a.rows(), j) = 1.0;
    }
  }
  if (transposed) std::swap(s.u, s.v);
  return s;
}

inline double nuclear_norm(const Matrix& x) { return svd(x).sigma.sum(); }

/// Numerical rank with the fixed relative cutoff sigma_i > 1e-9 * sigma_1.
inline int numerical_rank(const Vector& sigma) {
  if (sigma.size() == 0 || sigma[0] <= 0.0) return 0;
  int r = 0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i)
    if (sigma[i] > 1e-9 * sigma[0]) ++r;
  return r;
}

inline int numerical_rank(const Matrix& x) { return numerical_rank(svd(x).sigma); }

} // namespace droplin
