#pragma once

// Discretized hyperparameter posterior p(eta | u, y) over a tensor grid that
// is log-spaced in c and linear in lambda.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "kbid/errors.hpp"
#include "kbid/estimation.hpp"
#include "kbid/kernels.hpp"

namespace kbid {

struct GridSpec {
  double c_min = 1e-3;
  double c_max = 1e3;
  int c_count = 40;
  double lambda_min = 0.01;
  double lambda_max = 0.99;
  int lambda_count = 40;

  void validate() const {
    if (c_count < 1 || lambda_count < 1) throw DomainError("grid counts must be positive");
    if (!(c_min > 0.0) || !(c_max >= c_min)) throw DomainError("grid needs 0 < c_min <= c_max");
    if (!(lambda_min > 0.0) || !(lambda_max < 1.0) || !(lambda_max >= lambda_min)) {
      throw DomainError("grid needs 0 < lambda_min <= lambda_max < 1");
    }
  }

  std::vector<double> c_values() const {
    validate();
    std::vector<double> out(static_cast<std::size_t>(c_count));
    const double lo = std::log(c_min);
    const double step = c_count > 1 ? (std::log(c_max) - lo) / (c_count - 1) : 0.0;
    for (int i = 0; i < c_count; ++i) out[static_cast<std::size_t>(i)] = std::exp(lo + step * i);
    if (c_count > 1) out.back() = c_max;
    out.front() = c_min;
    return out;
  }

  std::vector<double> lambda_values() const {
    validate();
    std::vector<double> out(static_cast<std::size_t>(lambda_count));
    const double step = lambda_count > 1 ? (lambda_max - lambda_min) / (lambda_count - 1) : 0.0;
    for (int i = 0; i < lambda_count; ++i) out[static_cast<std::size_t>(i)] = lambda_min + step * i;
    if (lambda_count > 1) out.back() = lambda_max;
    return out;
  }
};

struct GridIndex {
  int c = 0;
  int lambda = 0;
  friend bool operator==(const GridIndex&, const GridIndex&) = default;
};

/// Inclusive index box [c_lo, c_hi] x [lambda_lo, lambda_hi] of grid points.
struct GridBox {
  int c_lo = 0;
  int c_hi = 0;
  int lambda_lo = 0;
  int lambda_hi = 0;

  int cells() const { return (c_hi - c_lo + 1) * (lambda_hi - lambda_lo + 1); }
  bool contains(const GridIndex& idx) const {
    return idx.c >= c_lo && idx.c <= c_hi && idx.lambda >= lambda_lo && idx.lambda <= lambda_hi;
  }
  friend auto operator<=>(const GridBox&, const GridBox&) = default;
};

/// Log of a hyperprior density (up to a constant) in (log c, lambda) coordinates.
/// Returning -inf excludes a cell.
using LogHyperprior = std::function<double(const Hyperparameters&)>;

inline double flat_log_hyperprior(const Hyperparameters&) { return 0.0; }

/// Hyperposterior tabulated on a grid. Each grid point is the midpoint of a
/// cell of equal area in (log c, lambda), so the quadrature weight of a cell
/// is proportional to p(y | u, eta) p(eta) at its midpoint.
class HyperGrid {
 public:
  HyperGrid(std::vector<double> c_values, std::vector<double> lambda_values)
      : c_(std::move(c_values)), lambda_(std::move(lambda_values)) {
    const std::size_t n = c_.size() * lambda_.size();
    log_marginal_.assign(n, 0.0);
    log_prior_.assign(n, 0.0);
    weight_.assign(n, 0.0);
  }

  int c_count() const { return static_cast<int>(c_.size()); }
  int lambda_count() const { return static_cast<int>(lambda_.size()); }
  std::size_t size() const { return c_.size() * lambda_.size(); }
  const std::vector<double>& c_values() const { return c_; }
  const std::vector<double>& lambda_values() const { return lambda_; }

  std::size_t flat(const GridIndex& idx) const {
    return static_cast<std::size_t>(idx.c) * lambda_.size() + static_cast<std::size_t>(idx.lambda);
  }
  GridIndex unflat(std::size_t k) const {
    return {static_cast<int>(k / lambda_.size()), static_cast<int>(k % lambda_.size())};
  }
  Hyperparameters eta(const GridIndex& idx) const {
    return {c_[static_cast<std::size_t>(idx.c)], lambda_[static_cast<std::size_t>(idx.lambda)]};
  }
  HyperRectangle rectangle(const GridBox& box) const {
    return {eta({box.c_lo, box.lambda_lo}), eta({box.c_hi, box.lambda_hi})};
  }

  double& log_marginal(const GridIndex& idx) { return log_marginal_[flat(idx)]; }
  double log_marginal(const GridIndex& idx) const { return log_marginal_[flat(idx)]; }
  double& log_prior(const GridIndex& idx) { return log_prior_[flat(idx)]; }
  double log_prior(const GridIndex& idx) const { return log_prior_[flat(idx)]; }
  /// Normalized posterior mass of the cell.
  double weight(const GridIndex& idx) const { return weight_[flat(idx)]; }
  const std::vector<double>& weights() const { return weight_; }

  /// Posterior variances Sigma_ll at every grid point, when tabulated.
  bool has_variances() const { return !variances_.empty(); }
  const VectorXd& variances(const GridIndex& idx) const { return variances_[flat(idx)]; }
  std::vector<VectorXd>& variance_table() { return variances_; }

  /// Sets weights to exp(log-likelihood + log-prior) normalized to one,
  /// stabilized by subtracting the maximum exponent.
  void normalize() {
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < size(); ++k) peak = std::max(peak, log_marginal_[k] + log_prior_[k]);
    if (!std::isfinite(peak)) throw NumericalError("hyperposterior has no finite cell");
    long double total = 0.0L;
    for (std::size_t k = 0; k < size(); ++k) {
      weight_[k] = std::exp(log_marginal_[k] + log_prior_[k] - peak);
      total += weight_[k];
    }
    if (!(total > 0.0L)) throw NumericalError("hyperposterior weights underflow");
    for (auto& w : weight_) w = static_cast<double>(w / total);
  }

  /// Grid point with the largest marginal likelihood; ties go to the smaller
  /// c, then the smaller lambda.
  GridIndex argmax_likelihood() const {
    std::size_t best = 0;
    for (std::size_t k = 1; k < size(); ++k) {
      if (log_marginal_[k] > log_marginal_[best]) best = k;
    }
    return unflat(best);
  }

 private:
  std::vector<double> c_;
  std::vector<double> lambda_;
  std::vector<double> log_marginal_;
  std::vector<double> log_prior_;
  std::vector<double> weight_;
  std::vector<VectorXd> variances_;
};

/// Constant-time box mass queries from 2-D prefix sums in extended precision.
class MassTable {
 public:
  explicit MassTable(const HyperGrid& grid)
      : rows_(grid.c_count()), cols_(grid.lambda_count()),
        prefix_(static_cast<std::size_t>((rows_ + 1) * (cols_ + 1)), 0.0L) {
    for (int i = 0; i < rows_; ++i) {
      for (int j = 0; j < cols_; ++j) {
        at(i + 1, j + 1) = static_cast<long double>(grid.weight({i, j})) + at(i, j + 1) +
                           at(i + 1, j) - at(i, j);
      }
    }
  }

  long double mass(const GridBox& b) const {
    return at(b.c_hi + 1, b.lambda_hi + 1) - at(b.c_lo, b.lambda_hi + 1) -
           at(b.c_hi + 1, b.lambda_lo) + at(b.c_lo, b.lambda_lo);
  }

 private:
  long double& at(int i, int j) { return prefix_[static_cast<std::size_t>(i * (cols_ + 1) + j)]; }
  long double at(int i, int j) const { return prefix_[static_cast<std::size_t>(i * (cols_ + 1) + j)]; }

  int rows_;
  int cols_;
  std::vector<long double> prefix_;
};

/// Mass of the cells inside `box`, summed directly.
inline double box_mass(const HyperGrid& grid, const GridBox& box) {
  long double total = 0.0L;
  for (int i = box.c_lo; i <= box.c_hi; ++i) {
    for (int j = box.lambda_lo; j <= box.lambda_hi; ++j) total += grid.weight({i, j});
  }
  return static_cast<double>(total);
}

struct HyperposteriorOptions {
  /// Also tabulate diag Sigma(eta) at every grid point.
  bool tabulate_variances = false;
  LogHyperprior log_prior = flat_log_hyperprior;
};

inline HyperGrid build_hyperposterior(const RegressionProblem& problem, KernelFamily family,
                                      const GridSpec& spec,
                                      const HyperposteriorOptions& options = {}) {
  HyperGrid grid(spec.c_values(), spec.lambda_values());
  PosteriorEvaluator evaluate(problem, family);
  if (options.tabulate_variances) grid.variance_table().resize(grid.size());
  for (int j = 0; j < grid.lambda_count(); ++j) {
    for (int i = 0; i < grid.c_count(); ++i) {
      const GridIndex idx{i, j};
      const Hyperparameters eta = grid.eta(idx);
      const FactorPosterior post = evaluate(eta);
      grid.log_marginal(idx) = post.log_marginal();
      const double lp = options.log_prior ? options.log_prior(eta) : 0.0;
      if (std::isnan(lp)) throw DomainError("hyperprior is not defined on the grid");
      grid.log_prior(idx) = lp;
      if (options.tabulate_variances) grid.variance_table()[grid.flat(idx)] = post.variances();
    }
  }
  grid.normalize();
  return grid;
}

inline HyperGrid build_hyperposterior(const Dataset& data, KernelFamily family,
                                      const GridSpec& spec,
                                      const HyperposteriorOptions& options = {}) {
  return build_hyperposterior(RegressionProblem(data), family, spec, options);
}

/// Maximum-marginal-likelihood hyperparameters over the grid.
inline Hyperparameters estimate_hyperparameters(const RegressionProblem& problem,
                                                KernelFamily family, const GridSpec& spec) {
  const HyperGrid grid = build_hyperposterior(problem, family, spec);
  return grid.eta(grid.argmax_likelihood());
}

inline Hyperparameters estimate_hyperparameters(const Dataset& data, KernelFamily family,
                                                const GridSpec& spec) {
  return estimate_hyperparameters(RegressionProblem(data), family, spec);
}

}  // namespace kbid
