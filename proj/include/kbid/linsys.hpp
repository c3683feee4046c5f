#pragma once

// Discrete-time SISO test systems, FIR data generation and the Toeplitz
// regressor.
//
// Conventions used throughout the library: time t is 1-based, lag l is
// 0-based, and the system is at rest before the first sample (u_t = 0 for
// t <= 0). Polynomials are stored in ascending powers of q^-1.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "kbid/errors.hpp"

namespace kbid {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Rational transfer function B(q^-1) / A(q^-1) with monic A.
class TransferFunction {
 public:
  TransferFunction(std::vector<double> numerator, std::vector<double> denominator)
      : num_(std::move(numerator)), den_(std::move(denominator)) {
    if (den_.empty() || den_.front() != 1.0) {
      throw DomainError("transfer function denominator must be monic");
    }
    if (num_.empty()) num_.push_back(0.0);
  }

  const std::vector<double>& numerator() const { return num_; }
  const std::vector<double>& denominator() const { return den_; }

  /// Roots of z^n + a_1 z^{n-1} + ... + a_n, i.e. the poles in the z-plane.
  std::vector<std::complex<double>> poles() const {
    std::size_t order = den_.size() - 1;
    while (order > 0 && den_[order] == 0.0) --order;
    if (order == 0) return {};
    MatrixXd companion = MatrixXd::Zero(static_cast<Eigen::Index>(order),
                                        static_cast<Eigen::Index>(order));
    for (std::size_t k = 0; k < order; ++k) {
      companion(0, static_cast<Eigen::Index>(k)) = -den_[k + 1];
    }
    for (std::size_t k = 1; k < order; ++k) {
      companion(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k - 1)) = 1.0;
    }
    Eigen::EigenSolver<MatrixXd> solver(companion, false);
    std::vector<std::complex<double>> roots;
    for (Eigen::Index k = 0; k < solver.eigenvalues().size(); ++k) {
      roots.push_back(solver.eigenvalues()(k));
    }
    return roots;
  }

  bool is_stable() const {
    for (const auto& p : poles()) {
      if (std::abs(p) >= 1.0) return false;
    }
    return true;
  }

 private:
  std::vector<double> num_;
  std::vector<double> den_;
};

/// Truncated impulse response g_0 .. g_{n_g-1}.
using ImpulseResponse = VectorXd;

/// G1(q) = 0.0616 / (q^2 - 1.8 q + 0.81): a double real pole at 0.9, unit H2 norm.
inline TransferFunction system_g1() { return {{0.0, 0.0, 0.0616}, {1.0, -1.8, 0.81}}; }

/// G2(q) = 0.4888 / (q^2 - q + 0.81): complex poles of magnitude 0.9, unit H2 norm.
inline TransferFunction system_g2() { return {{0.0, 0.0, 0.4888}, {1.0, -1.0, 0.81}}; }

/// Power-series coefficients of the transfer function, by the recurrence
/// g_k = b_k - sum_{j>=1} a_j g_{k-j}.
inline ImpulseResponse impulse_response(const TransferFunction& tf, Eigen::Index n_g) {
  if (n_g < 1) throw DomainError("impulse response length must be positive");
  if (!tf.is_stable()) throw StabilityError("transfer function has poles on or outside the unit circle");
  const auto& b = tf.numerator();
  const auto& a = tf.denominator();
  ImpulseResponse g(n_g);
  for (Eigen::Index k = 0; k < n_g; ++k) {
    const auto uk = static_cast<std::size_t>(k);
    double value = uk < b.size() ? b[uk] : 0.0;
    for (std::size_t j = 1; j < a.size() && j <= uk; ++j) {
      value -= a[j] * g(k - static_cast<Eigen::Index>(j));
    }
    g(k) = value;
  }
  return g;
}

inline double h2_norm(const ImpulseResponse& g) { return g.norm(); }

/// N x n_g regressor with Phi(t, l) = u_{t-l} (zero before the first sample).
inline MatrixXd build_regressor(const VectorXd& u, Eigen::Index n_g) {
  const Eigen::Index n = u.size();
  MatrixXd phi = MatrixXd::Zero(n, n_g);
  for (Eigen::Index l = 0; l < n_g; ++l) {
    if (l < n) phi.col(l).tail(n - l) = u.head(n - l);
  }
  return phi;
}

/// Input/output record together with its FIR regression matrix.
struct Dataset {
  VectorXd u;
  VectorXd y;
  MatrixXd phi;
  double noise_var = 0.0;

  Eigen::Index samples() const { return y.size(); }
  Eigen::Index order() const { return phi.cols(); }
};

/// Builds a dataset from measured records. Requires N >= n_g.
inline Dataset make_dataset(VectorXd u, VectorXd y, Eigen::Index n_g, double noise_var) {
  if (u.size() != y.size()) throw DomainError("input and output lengths differ");
  if (u.size() < n_g) throw DomainError("need at least n_g samples");
  if (!(noise_var >= 0.0)) throw DomainError("noise variance must be nonnegative");
  Dataset data;
  data.phi = build_regressor(u, n_g);
  data.u = std::move(u);
  data.y = std::move(y);
  data.noise_var = noise_var;
  return data;
}

/// Standard-normal vector drawn from a 64-bit Mersenne twister.
inline VectorXd gaussian_vector(std::mt19937_64& rng, Eigen::Index n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  VectorXd v(n);
  for (Eigen::Index k = 0; k < n; ++k) v(k) = normal(rng);
  return v;
}

/// y = Phi g + v with v ~ N(0, noise_var I), drawn from `rng`.
inline Dataset simulate_fir(const ImpulseResponse& g, const VectorXd& u, double noise_var,
                            std::mt19937_64& rng) {
  if (!(noise_var >= 0.0)) throw DomainError("noise variance must be nonnegative");
  MatrixXd phi = build_regressor(u, g.size());
  VectorXd noise = gaussian_vector(rng, u.size());
  Dataset data;
  data.y = phi * g + std::sqrt(noise_var) * noise;
  data.phi = std::move(phi);
  data.u = u;
  data.noise_var = noise_var;
  return data;
}

inline Dataset simulate_fir(const ImpulseResponse& g, const VectorXd& u, double noise_var,
                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return simulate_fir(g, u, noise_var, rng);
}

/// Simulates the n_g-truncated response of `tf` driven by `u`.
inline Dataset simulate(const TransferFunction& tf, const VectorXd& u, Eigen::Index n_g,
                        double noise_var, std::uint64_t seed) {
  return simulate_fir(impulse_response(tf, n_g), u, noise_var, seed);
}

}  // namespace kbid
