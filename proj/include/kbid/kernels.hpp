#pragma once

// Stable kernels for impulse-response priors (DI, TC, SS), their square-root
// factors, and the ordering machinery used to bound posterior covariances
// over a box of hyperparameters.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>

#include "kbid/errors.hpp"

namespace kbid {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Kernel scale c >= 0 and decay 0 <= lambda <= 1.
struct Hyperparameters {
  double c = 1.0;
  double lambda = 0.5;

  bool in_domain() const { return c >= 0.0 && lambda >= 0.0 && lambda <= 1.0; }
  bool in_interior() const { return c > 0.0 && lambda > 0.0 && lambda < 1.0; }

  friend bool operator==(const Hyperparameters&, const Hyperparameters&) = default;
};

enum class KernelFamily { DI, TC, SS };

inline std::string to_string(KernelFamily family) {
  switch (family) {
    case KernelFamily::DI: return "DI";
    case KernelFamily::TC: return "TC";
    case KernelFamily::SS: return "SS";
  }
  return "?";
}

inline KernelFamily parse_kernel_family(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::toupper(ch)); });
  if (upper == "DI") return KernelFamily::DI;
  if (upper == "TC") return KernelFamily::TC;
  if (upper == "SS") return KernelFamily::SS;
  throw DomainError("unknown kernel family '" + std::string(name) + "' (expected DI, TC or SS)");
}

/// Axis-aligned box [eta1, eta2] in hyperparameter space.
struct HyperRectangle {
  Hyperparameters lower;
  Hyperparameters upper;

  bool valid() const { return lower.c <= upper.c && lower.lambda <= upper.lambda; }
  bool contains(const Hyperparameters& eta) const {
    return eta.c >= lower.c && eta.c <= upper.c && eta.lambda >= lower.lambda &&
           eta.lambda <= upper.lambda;
  }
  bool degenerate() const { return lower == upper; }
};

namespace detail {

inline void require_domain(const Hyperparameters& eta) {
  if (!eta.in_domain()) {
    throw DomainError("hyperparameters outside c >= 0, 0 <= lambda <= 1");
  }
}

inline double kernel_entry(KernelFamily family, double c, double lambda, Eigen::Index i,
                           Eigen::Index j) {
  const auto hi = static_cast<double>(std::max(i, j));
  const auto lo = static_cast<double>(std::min(i, j));
  switch (family) {
    case KernelFamily::DI: return i == j ? c * std::pow(lambda, hi) : 0.0;
    case KernelFamily::TC: return c * std::pow(lambda, hi);
    case KernelFamily::SS:
      return c * std::pow(lambda, 2.0 * hi) *
             (std::pow(lambda, lo) / 2.0 - std::pow(lambda, hi) / 6.0);
  }
  return 0.0;
}

}  // namespace detail

/// Kernel matrix K(eta) evaluated at lags 0 .. n_g-1.
inline MatrixXd build_kernel(KernelFamily family, const Hyperparameters& eta, Eigen::Index n_g) {
  detail::require_domain(eta);
  if (n_g < 1) throw DomainError("kernel size must be positive");
  MatrixXd k(n_g, n_g);
  for (Eigen::Index j = 0; j < n_g; ++j) {
    for (Eigen::Index i = j; i < n_g; ++i) {
      k(i, j) = detail::kernel_entry(family, eta.c, eta.lambda, i, j);
      k(j, i) = k(i, j);
    }
  }
  return k;
}

/// Square-root factor F with F F^T = K for a PSD matrix, via pivoted LDL^T.
/// Pivots that come out slightly negative from rounding are clamped to zero.
inline MatrixXd symmetric_factor(const MatrixXd& k) {
  Eigen::LDLT<MatrixXd> ldlt(k);
  const VectorXd d = ldlt.vectorD().cwiseMax(0.0).cwiseSqrt();
  MatrixXd lower = ldlt.matrixL();
  return ldlt.transpositionsP().transpose() * (lower * d.asDiagonal());
}

/// Square-root factor of K(eta). DI and TC have exact closed forms that stay
/// accurate when lambda^{n_g} is far below machine precision relative to c:
/// K_TC = T diag(d) T^T with T upper-triangular ones and
/// d_k = c (lambda^k - lambda^{k+1}), d_{n-1} = c lambda^{n-1}.
inline MatrixXd kernel_factor(KernelFamily family, const Hyperparameters& eta, Eigen::Index n_g) {
  detail::require_domain(eta);
  if (n_g < 1) throw DomainError("kernel size must be positive");
  switch (family) {
    case KernelFamily::DI: {
      VectorXd d(n_g);
      for (Eigen::Index i = 0; i < n_g; ++i) {
        d(i) = std::sqrt(eta.c * std::pow(eta.lambda, static_cast<double>(i)));
      }
      return d.asDiagonal();
    }
    case KernelFamily::TC: {
      MatrixXd f = MatrixXd::Zero(n_g, n_g);
      for (Eigen::Index k = 0; k < n_g; ++k) {
        const double pk = std::pow(eta.lambda, static_cast<double>(k));
        const double dk = k + 1 < n_g ? eta.c * pk * (1.0 - eta.lambda) : eta.c * pk;
        f.col(k).head(k + 1).setConstant(std::sqrt(std::max(dk, 0.0)));
      }
      return f;
    }
    case KernelFamily::SS:
      return symmetric_factor(build_kernel(family, eta, n_g));
  }
  return {};
}

/// Exponent gamma of the kernel ordering condition (lambda2/lambda1)^gamma c1 <= c2,
/// stated for lags counted from one: 0 for DI and -1/ln(lambda2) - 1 for TC.
inline double gamma_exponent(KernelFamily family, double lambda2) {
  switch (family) {
    case KernelFamily::DI: return 0.0;
    case KernelFamily::TC:
      if (!(lambda2 > 0.0 && lambda2 < 1.0)) {
        throw DomainError("gamma exponent is singular unless 0 < lambda2 < 1");
      }
      return -1.0 / std::log(lambda2) - 1.0;
    case KernelFamily::SS:
      throw UnsupportedFamilyError("no closed-form ordering exponent for SS kernels");
  }
  return 0.0;
}

/// Ordering exponent for kernels evaluated at lags 0 .. n_g-1. Shifting the
/// first lag from 1 to 0 lowers every power by one, so TC needs gamma + 1.
inline double ordering_exponent(KernelFamily family, double lambda2) {
  const double gamma = gamma_exponent(family, lambda2);
  return family == KernelFamily::TC ? gamma + 1.0 : gamma;
}

/// M(m)_{i,j} = m_{max(i,j)}.
inline MatrixXd maxindex_matrix(const VectorXd& m) {
  const Eigen::Index n = m.size();
  MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) out(i, j) = m(std::max(i, j));
  }
  return out;
}

/// det M(m) = m_n prod_{i<n} (m_i - m_{i+1}).
inline double maxindex_det(const VectorXd& m) {
  if (m.size() < 1) throw DomainError("maxindex_det needs at least one entry");
  double det = m(m.size() - 1);
  for (Eigen::Index i = 0; i + 1 < m.size(); ++i) det *= m(i) - m(i + 1);
  return det;
}

/// PSD test with relative jitter: min eigenvalue >= -rel_tol * max |eigenvalue|.
inline bool is_psd(const MatrixXd& m, double rel_tol = 1e-10) {
  if (m.size() == 0) return true;
  const MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(sym, Eigen::EigenvaluesOnly);
  const VectorXd& ev = solver.eigenvalues();
  const double scale = ev.cwiseAbs().maxCoeff();
  return ev.minCoeff() >= -rel_tol * scale;
}

/// True iff K(eta_a) - K(eta_b) is PSD.
inline bool kernel_dominates(KernelFamily family, const Hyperparameters& eta_a,
                             const Hyperparameters& eta_b, Eigen::Index n_g) {
  return is_psd(build_kernel(family, eta_a, n_g) - build_kernel(family, eta_b, n_g));
}

}  // namespace kbid
