#pragma once

// Test-only reference computations. None of these call into the library's
// factorized paths; they use dense textbook formulas instead.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <random>

namespace oracle {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Determinant by Gaussian elimination with partial pivoting.
inline double lu_determinant(MatrixXd a) {
  const Eigen::Index n = a.rows();
  double det = 1.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    Eigen::Index pivot = k;
    for (Eigen::Index i = k + 1; i < n; ++i) {
      if (std::abs(a(i, k)) > std::abs(a(pivot, k))) pivot = i;
    }
    if (a(pivot, k) == 0.0) return 0.0;
    if (pivot != k) {
      a.row(k).swap(a.row(pivot));
      det = -det;
    }
    det *= a(k, k);
    for (Eigen::Index i = k + 1; i < n; ++i) {
      const double f = a(i, k) / a(k, k);
      a.row(i).tail(n - k) -= f * a.row(k).tail(n - k);
    }
  }
  return det;
}

/// log p(y) for y ~ N(0, sigma^2 I + Phi K Phi^T), evaluated densely in N dimensions.
inline double dense_log_marginal(const MatrixXd& phi, const VectorXd& y, const MatrixXd& k,
                                 double noise_var) {
  const Eigen::Index n = y.size();
  MatrixXd psi = phi * k * phi.transpose();
  psi.diagonal().array() += noise_var;
  Eigen::LLT<MatrixXd> chol(psi);
  const double logdet = 2.0 * chol.matrixLLT().diagonal().array().log().sum();
  return -0.5 * logdet - 0.5 * y.dot(chol.solve(y)) -
         0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
}

/// Dual (N x N) posterior: g = K Phi^T Psi^-1 y, Sigma = K - K Phi^T Psi^-1 Phi K.
inline std::pair<VectorXd, MatrixXd> dense_posterior(const MatrixXd& phi, const VectorXd& y,
                                                     const MatrixXd& k, double noise_var) {
  MatrixXd psi = phi * k * phi.transpose();
  psi.diagonal().array() += noise_var;
  const Eigen::PartialPivLU<MatrixXd> lu(psi);
  const MatrixXd kpt = k * phi.transpose();
  return {kpt * lu.solve(y), k - kpt * lu.solve(kpt.transpose())};
}

inline double min_eigenvalue(const MatrixXd& m) {
  return Eigen::SelfAdjointEigenSolver<MatrixXd>(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly)
      .eigenvalues()
      .minCoeff();
}

inline double max_abs_eigenvalue(const MatrixXd& m) {
  return Eigen::SelfAdjointEigenSolver<MatrixXd>(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly)
      .eigenvalues()
      .cwiseAbs()
      .maxCoeff();
}

inline VectorXd normal_vector(std::mt19937_64& rng, Eigen::Index n) {
  std::normal_distribution<double> d;
  VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
  return v;
}

inline MatrixXd normal_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> d;
  MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j) {
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = d(rng);
  }
  return m;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double relative_error(const MatrixXd& a, const MatrixXd& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale == 0.0 ? 0.0 : (a - b).norm() / scale;
}

}  // namespace oracle
