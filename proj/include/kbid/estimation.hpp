#pragma once

// Least-squares and kernel-regularized FIR estimation.
//
// Every regularized quantity is computed from a square-root factor F of the
// prior covariance (K = F F^T) so that neither K^-1 nor any N x N matrix is
// formed:
//
//   A     = I + F^T Phi^T Phi F / sigma^2
//   w     = A^-1 F^T Phi^T y / sigma^2,   g_hat = F w
//   Sigma = F A^-1 F^T
//   y^T Psi^-1 y = |y - Phi g_hat|^2 / sigma^2 + |w|^2
//   log det Psi  = N log sigma^2 + log det A

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <utility>

#include "kbid/errors.hpp"
#include "kbid/kernels.hpp"
#include "kbid/linsys.hpp"

namespace kbid {

/// Dataset plus the products every estimator reuses.
class RegressionProblem {
 public:
  explicit RegressionProblem(const Dataset& data)
      : phi_(data.phi),
        y_(data.y),
        gram_(data.phi.transpose() * data.phi),
        phi_t_y_(data.phi.transpose() * data.y),
        y_t_y_(data.y.squaredNorm()),
        noise_var_(data.noise_var) {}

  const MatrixXd& phi() const { return phi_; }
  const VectorXd& y() const { return y_; }
  const MatrixXd& gram() const { return gram_; }
  const VectorXd& phi_t_y() const { return phi_t_y_; }
  double y_t_y() const { return y_t_y_; }
  double noise_var() const { return noise_var_; }
  Eigen::Index samples() const { return y_.size(); }
  Eigen::Index order() const { return phi_.cols(); }

 private:
  MatrixXd phi_;
  VectorXd y_;
  MatrixXd gram_;
  VectorXd phi_t_y_;
  double y_t_y_;
  double noise_var_;
};

struct LeastSquaresModel {
  VectorXd g_hat;
  MatrixXd sigma;
};

struct PosteriorModel {
  VectorXd g_hat;
  MatrixXd sigma;
  std::optional<Hyperparameters> eta;
  std::optional<KernelFamily> family;
};

/// Factorized posterior for one prior factor F. Holds everything needed to
/// produce the estimate, the covariance (or just its diagonal), and the
/// marginal likelihood without refactoring.
class FactorPosterior {
 public:
  FactorPosterior(const RegressionProblem& problem, MatrixXd factor)
      : FactorPosterior(problem, factor, factor.transpose() * problem.gram() * factor,
                        factor.transpose() * problem.phi_t_y()) {}

  /// `ftgf` = F^T Phi^T Phi F and `ftpy` = F^T Phi^T y, when already known.
  FactorPosterior(const RegressionProblem& problem, MatrixXd factor, const MatrixXd& ftgf,
                  const VectorXd& ftpy)
      : problem_(&problem), factor_(std::move(factor)) {
    const double s2 = problem.noise_var();
    if (!(s2 > 0.0)) throw DegenerateNoiseError("regularized estimation needs noise variance > 0");
    MatrixXd a = ftgf / s2;
    a.diagonal().array() += 1.0;
    chol_.compute(a);
    if (chol_.info() != Eigen::Success) throw NumericalError("posterior system is not positive definite");
    w_ = chol_.solve(ftpy) / s2;
  }

  VectorXd estimate() const { return factor_ * w_; }

  /// L^-1 F^T, whose Gram matrix is the posterior covariance.
  MatrixXd whitened() const { return chol_.matrixL().solve(factor_.transpose()); }

  MatrixXd covariance() const {
    const MatrixXd w = whitened();
    return w.transpose() * w;
  }

  VectorXd variances() const { return whitened().colwise().squaredNorm().transpose(); }

  /// Sigma(l, l) alone, in O(n_g^2).
  double variance(Eigen::Index l) const {
    return chol_.matrixL().solve(factor_.row(l).transpose()).squaredNorm();
  }

  double log_det_a() const { return 2.0 * chol_.matrixLLT().diagonal().array().log().sum(); }

  /// y^T Psi^-1 y.
  double quadratic_form() const {
    const VectorXd residual = problem_->y() - problem_->phi() * estimate();
    return residual.squaredNorm() / problem_->noise_var() + w_.squaredNorm();
  }

  double log_marginal() const {
    const auto n = static_cast<double>(problem_->samples());
    return -0.5 * (n * std::log(problem_->noise_var()) + log_det_a()) - 0.5 * quadratic_form() -
           0.5 * n * std::log(2.0 * std::numbers::pi);
  }

  const VectorXd& weights() const { return w_; }
  const MatrixXd& factor() const { return factor_; }
  const Eigen::LLT<MatrixXd>& system() const { return chol_; }

 private:
  const RegressionProblem* problem_;
  MatrixXd factor_;
  Eigen::LLT<MatrixXd> chol_;
  VectorXd w_;
};

inline FactorPosterior factor_posterior(const RegressionProblem& problem, KernelFamily family,
                                        const Hyperparameters& eta) {
  return {problem, kernel_factor(family, eta, problem.order())};
}

/// Evaluates posteriors of one kernel family at many hyperparameters. The
/// factor scales as F(c, lambda) = sqrt(c) F(1, lambda), so the O(n_g^3)
/// products with Phi^T Phi are computed once per distinct lambda and cached.
/// Not thread-safe; use one evaluator per worker.
class PosteriorEvaluator {
 public:
  PosteriorEvaluator(const RegressionProblem& problem, KernelFamily family,
                     std::size_t cache_limit = 512)
      : problem_(&problem), family_(family), cache_limit_(cache_limit) {}

  FactorPosterior operator()(const Hyperparameters& eta) {
    detail::require_domain(eta);
    const UnitFactor& unit = unit_factor(eta.lambda);
    const double root = std::sqrt(eta.c);
    return {*problem_, root * unit.factor, eta.c * unit.ftgf, root * unit.ftpy};
  }

  const RegressionProblem& problem() const { return *problem_; }
  KernelFamily family() const { return family_; }

 private:
  struct UnitFactor {
    MatrixXd factor;
    MatrixXd ftgf;
    VectorXd ftpy;
  };

  const UnitFactor& unit_factor(double lambda) {
    auto it = cache_.find(lambda);
    if (it != cache_.end()) return it->second;
    if (cache_.size() >= cache_limit_) cache_.clear();
    UnitFactor unit;
    unit.factor = kernel_factor(family_, {1.0, lambda}, problem_->order());
    unit.ftgf = unit.factor.transpose() * problem_->gram() * unit.factor;
    unit.ftpy = unit.factor.transpose() * problem_->phi_t_y();
    return cache_.emplace(lambda, std::move(unit)).first->second;
  }

  const RegressionProblem* problem_;
  KernelFamily family_;
  std::size_t cache_limit_;
  std::map<double, UnitFactor> cache_;
};

/// Condition-number limit on Phi^T Phi for least squares.
inline constexpr double kMaxGramCondition = 1e12;

inline LeastSquaresModel least_squares(const RegressionProblem& problem) {
  const MatrixXd& gram = problem.gram();
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > kMaxGramCondition) {
    throw SingularRegressorError("regressor is rank deficient (Phi^T Phi condition number above 1e12)");
  }
  Eigen::LLT<MatrixXd> chol(gram);
  LeastSquaresModel model;
  model.g_hat = chol.solve(problem.phi_t_y());
  model.sigma = problem.noise_var() *
                chol.solve(MatrixXd::Identity(gram.rows(), gram.cols()));
  return model;
}

inline LeastSquaresModel least_squares(const Dataset& data) {
  return least_squares(RegressionProblem(data));
}

/// Unbiased residual variance of the least-squares fit, |y - Phi g_LS|^2 / (N - n_g).
inline double estimate_noise_variance(const Dataset& data) {
  const Eigen::Index dof = data.samples() - data.order();
  if (dof < 1) throw DomainError("noise variance estimate needs N > n_g");
  Dataset unit = data;
  unit.noise_var = 1.0;
  const LeastSquaresModel ls = least_squares(unit);
  return (data.y - data.phi * ls.g_hat).squaredNorm() / static_cast<double>(dof);
}

inline PosteriorModel regularized_estimate(const RegressionProblem& problem, KernelFamily family,
                                           const Hyperparameters& eta) {
  const FactorPosterior post = factor_posterior(problem, family, eta);
  return {post.estimate(), post.covariance(), eta, family};
}

inline PosteriorModel regularized_estimate(const Dataset& data, KernelFamily family,
                                           const Hyperparameters& eta) {
  return regularized_estimate(RegressionProblem(data), family, eta);
}

/// Regularized estimate for an arbitrary PSD prior covariance.
inline PosteriorModel regularized_estimate(const Dataset& data, const MatrixXd& kernel) {
  if (kernel.rows() != data.order() || kernel.cols() != data.order()) {
    throw DomainError("kernel size does not match the regressor");
  }
  const RegressionProblem problem(data);
  const FactorPosterior post(problem, symmetric_factor(kernel));
  return {post.estimate(), post.covariance(), std::nullopt, std::nullopt};
}

/// Estimate in the representer form K (Phi^T Phi K + sigma^2 I)^-1 Phi^T y.
inline VectorXd representer_estimate(const Dataset& data, const MatrixXd& kernel) {
  MatrixXd m = data.phi.transpose() * data.phi * kernel;
  m.diagonal().array() += data.noise_var;
  return kernel * m.partialPivLu().solve(data.phi.transpose() * data.y);
}

/// Symmetric factorization of K + jitter I with jitter = 1e-12 tr(K) / n_g.
inline Eigen::LDLT<MatrixXd> jittered_kernel_factorization(const MatrixXd& kernel) {
  MatrixXd k = kernel;
  const double jitter = 1e-12 * kernel.trace() / static_cast<double>(kernel.rows());
  k.diagonal().array() += jitter;
  return Eigen::LDLT<MatrixXd>(k);
}

/// Estimate and covariance in the primal form (Phi^T Phi + sigma^2 K^-1)^-1,
/// with K^-1 taken from the jittered factorization.
inline PosteriorModel primal_estimate(const Dataset& data, const MatrixXd& kernel) {
  const Eigen::Index n = kernel.rows();
  const MatrixXd k_inv = jittered_kernel_factorization(kernel).solve(MatrixXd::Identity(n, n));
  MatrixXd h = data.phi.transpose() * data.phi + data.noise_var * k_inv;
  h = 0.5 * (h + h.transpose());
  Eigen::LLT<MatrixXd> chol(h);
  PosteriorModel model;
  model.g_hat = chol.solve(data.phi.transpose() * data.y);
  model.sigma = data.noise_var * chol.solve(MatrixXd::Identity(n, n));
  return model;
}

/// g_hat^T K^-1 g_hat, squared RKHS norm of the fitted impulse response.
inline double rkhs_norm_sq(const PosteriorModel& model, const MatrixXd& kernel) {
  const double value = model.g_hat.dot(jittered_kernel_factorization(kernel).solve(model.g_hat));
  return std::max(value, 0.0);
}

/// log p(y | u, eta), including the -N/2 log(2 pi) normalizer.
inline double log_marginal(const RegressionProblem& problem, KernelFamily family,
                           const Hyperparameters& eta) {
  return factor_posterior(problem, family, eta).log_marginal();
}

inline double log_marginal(const Dataset& data, KernelFamily family, const Hyperparameters& eta) {
  return log_marginal(RegressionProblem(data), family, eta);
}

}  // namespace kbid
