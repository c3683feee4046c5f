#pragma once

// Element-wise probabilistic error bands for FIR estimates: least squares,
// kernel posterior at the estimated hyperparameters ("vanilla"), and the
// robust band that stays valid when the true hyperparameters are unknown.
//
// The robust band takes a credible box [eta1, eta2] of the hyperparameter
// posterior and the worst posterior variance inside it:
//   DI/TC: Sigma(eta) <= Sigma(c_bar, lambda2) for every eta in the box,
//          c_bar = (lambda2 / lambda1)^gamma c2 (closed form)
//   other: sigma_l^2 = max_{eta in box} Sigma_ll(eta) (numerical search)
// and scales sqrt(sigma_l^2) by mu_delta, or by mu_delta + 2 |y|_S / sigma.

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "kbid/errors.hpp"
#include "kbid/estimation.hpp"
#include "kbid/hypergrid.hpp"
#include "kbid/kernels.hpp"

namespace kbid {

/// mu with P(|Z| <= mu) = 1 - delta for standard normal Z.
inline double gaussian_quantile(double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("delta must lie in (0, 1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), 1.0 - delta / 2.0);
}

enum class BandMethod { LeastSquares, Vanilla, Robust };
enum class Scaling { Practical, Theoretical };

inline std::string to_string(BandMethod method) {
  switch (method) {
    case BandMethod::LeastSquares: return "ls";
    case BandMethod::Vanilla: return "vanilla";
    case BandMethod::Robust: return "robust";
  }
  return "?";
}

inline std::string to_string(Scaling scaling) {
  return scaling == Scaling::Practical ? "practical" : "theoretical";
}

inline Scaling parse_scaling(const std::string& name) {
  if (name == "practical") return Scaling::Practical;
  if (name == "theoretical") return Scaling::Theoretical;
  throw DomainError("unknown scaling mode '" + name + "' (expected practical or theoretical)");
}

/// Half-widths b_l with |g_hat_l - g_l| <= b_l at the stated confidence.
struct ErrorBand {
  VectorXd half_width;
  BandMethod method = BandMethod::Vanilla;
  double delta = 0.1;
  double delta_prime = 0.0;
  Scaling scaling = Scaling::Practical;

  bool contains(const VectorXd& estimate, const VectorXd& truth, Eigen::Index l) const {
    return std::abs(estimate(l) - truth(l)) <= half_width(l);
  }
};

inline ErrorBand ls_band(const LeastSquaresModel& model, double delta) {
  const double mu = gaussian_quantile(delta);
  return {mu * model.sigma.diagonal().cwiseMax(0.0).cwiseSqrt(), BandMethod::LeastSquares, delta};
}

inline ErrorBand vanilla_band(const PosteriorModel& model, double delta) {
  const double mu = gaussian_quantile(delta);
  return {mu * model.sigma.diagonal().cwiseMax(0.0).cwiseSqrt(), BandMethod::Vanilla, delta};
}

// ---------------------------------------------------------------------------
// Uniform worst case for DI and TC kernels

/// Cap on the inflated kernel scale; beyond it the posterior equals the
/// least-squares covariance to machine precision.
inline constexpr double kMaxInflatedScale = 1e200;

/// (lambda2 / lambda1)^gamma c2, the scale of the kernel whose posterior
/// dominates every posterior in the box.
inline double inflated_scale(KernelFamily family, const HyperRectangle& rect) {
  if (family == KernelFamily::SS) {
    throw UnsupportedFamilyError("uniform covariance bound covers DI and TC kernels only");
  }
  if (!rect.valid()) throw DomainError("hyper-rectangle corners are not ordered");
  const double l1 = rect.lower.lambda;
  const double l2 = rect.upper.lambda;
  if (!(l1 > 0.0 && l2 < 1.0)) throw DomainError("uniform bound needs 0 < lambda1 <= lambda2 < 1");
  if (rect.upper.c == 0.0) return 0.0;
  const double gamma = ordering_exponent(family, l2);
  const double log_scale = gamma * (std::log(l2) - std::log(l1)) + std::log(rect.upper.c);
  return std::exp(std::min(log_scale, std::log(kMaxInflatedScale)));
}

/// Posterior for the dominating kernel K(c_bar, lambda2).
inline FactorPosterior uniform_posterior(const RegressionProblem& problem, KernelFamily family,
                                         const HyperRectangle& rect) {
  return factor_posterior(problem, family, {inflated_scale(family, rect), rect.upper.lambda});
}

/// Diagonal of sigma^2 (Phi^T Phi + sigma^2 (lambda1/lambda2)^gamma K^-1(eta2))^-1.
inline VectorXd uniform_sigma(const RegressionProblem& problem, KernelFamily family,
                              const HyperRectangle& rect) {
  return uniform_posterior(problem, family, rect).variances();
}

// ---------------------------------------------------------------------------
// Numerical worst case for any kernel

struct SearchOptions {
  int subgrid = 15;
  double step_tolerance = 1e-4;
  int max_iterations = 60;
  /// Exact inner maximizations tried per outer minimization before the
  /// best one found is accepted.
  int max_exact_candidates = 8;
};

/// A point with a known posterior variance, used to seed the search.
struct VarianceSeed {
  Hyperparameters eta;
  double value;
};

/// max_{eta in box} Sigma_ll(eta) by a dense sub-grid followed by coordinate
/// search with step halving. Sub-grid results are memoized per box and shared
/// between lags.
class WorstCaseSearch {
 public:
  WorstCaseSearch(const RegressionProblem& problem, KernelFamily family, SearchOptions options = {})
      : evaluate_(problem, family), options_(options) {
    if (options_.subgrid < 2) throw DomainError("search sub-grid needs at least 2 points per side");
  }

  const SearchOptions& options() const { return options_; }
  const RegressionProblem& problem() const { return evaluate_.problem(); }
  KernelFamily family() const { return evaluate_.family(); }

  double elementwise(const HyperRectangle& rect, Eigen::Index l,
                     const std::optional<VarianceSeed>& seed = std::nullopt) {
    const Subgrid& grid = subgrid(rect);
    std::size_t best = 0;
    for (std::size_t k = 1; k < grid.points.size(); ++k) {
      if (grid.variances[k](l) > grid.variances[best](l)) best = k;
    }
    Hyperparameters start = grid.points[best];
    double value = grid.variances[best](l);
    if (seed && seed->value > value) {
      start = seed->eta;
      value = seed->value;
    }
    return refine(rect, l, start, value);
  }

  VectorXd elementwise_all(const HyperRectangle& rect,
                           const std::vector<std::optional<VarianceSeed>>& seeds = {}) {
    const Eigen::Index n = problem().order();
    VectorXd out(n);
    for (Eigen::Index l = 0; l < n; ++l) {
      const auto ul = static_cast<std::size_t>(l);
      out(l) = elementwise(rect, l, ul < seeds.size() ? seeds[ul] : std::nullopt);
    }
    return out;
  }

 private:
  struct Subgrid {
    std::vector<Hyperparameters> points;
    std::vector<VectorXd> variances;
  };

  struct Mapping {
    const HyperRectangle& rect;
    bool log_c;

    Hyperparameters at(double s, double t) const {
      const double c = log_c ? std::exp(std::log(rect.lower.c) +
                                        s * (std::log(rect.upper.c) - std::log(rect.lower.c)))
                             : rect.lower.c + s * (rect.upper.c - rect.lower.c);
      const double lambda = rect.lower.lambda + t * (rect.upper.lambda - rect.lower.lambda);
      return {std::clamp(c, rect.lower.c, rect.upper.c),
              std::clamp(lambda, rect.lower.lambda, rect.upper.lambda)};
    }
    std::array<double, 2> coords(const Hyperparameters& eta) const {
      const double wc = log_c ? std::log(rect.upper.c) - std::log(rect.lower.c)
                              : rect.upper.c - rect.lower.c;
      const double wl = rect.upper.lambda - rect.lower.lambda;
      const double s = wc > 0.0 ? ((log_c ? std::log(eta.c) - std::log(rect.lower.c)
                                          : eta.c - rect.lower.c) / wc)
                                : 0.0;
      const double t = wl > 0.0 ? (eta.lambda - rect.lower.lambda) / wl : 0.0;
      return {std::clamp(s, 0.0, 1.0), std::clamp(t, 0.0, 1.0)};
    }
  };

  const Subgrid& subgrid(const HyperRectangle& rect) {
    if (!rect.valid()) throw DomainError("hyper-rectangle corners are not ordered");
    const std::array<double, 4> key{rect.lower.c, rect.lower.lambda, rect.upper.c, rect.upper.lambda};
    auto it = memo_.find(key);
    if (it != memo_.end()) return it->second;
    const Mapping map{rect, rect.lower.c > 0.0};
    const int nc = rect.lower.c == rect.upper.c ? 1 : options_.subgrid;
    const int nl = rect.lower.lambda == rect.upper.lambda ? 1 : options_.subgrid;
    Subgrid grid;
    for (int j = 0; j < nl; ++j) {
      for (int i = 0; i < nc; ++i) {
        const double s = nc > 1 ? static_cast<double>(i) / (nc - 1) : 0.0;
        const double t = nl > 1 ? static_cast<double>(j) / (nl - 1) : 0.0;
        const Hyperparameters eta = map.at(s, t);
        grid.points.push_back(eta);
        grid.variances.push_back(evaluate_(eta).variances());
      }
    }
    if (memo_.size() > 4096) memo_.clear();
    return memo_.emplace(key, std::move(grid)).first->second;
  }

  double refine(const HyperRectangle& rect, Eigen::Index l, const Hyperparameters& start,
                double value) {
    const Mapping map{rect, rect.lower.c > 0.0};
    const bool move_c = rect.lower.c < rect.upper.c;
    const bool move_lambda = rect.lower.lambda < rect.upper.lambda;
    if (!move_c && !move_lambda) return std::max(value, evaluate_(start).variance(l));
    auto [s, t] = map.coords(start);
    double step = 1.0 / (options_.subgrid - 1);
    for (int iter = 0; iter < options_.max_iterations && step >= options_.step_tolerance; ++iter) {
      double best = value;
      std::array<double, 2> best_point{s, t};
      const std::array<std::array<double, 2>, 4> moves{{{step, 0.0}, {-step, 0.0}, {0.0, step}, {0.0, -step}}};
      for (const auto& d : moves) {
        if ((d[0] != 0.0 && !move_c) || (d[1] != 0.0 && !move_lambda)) continue;
        const double ns = std::clamp(s + d[0], 0.0, 1.0);
        const double nt = std::clamp(t + d[1], 0.0, 1.0);
        if (ns == s && nt == t) continue;
        const double v = evaluate_(map.at(ns, nt)).variance(l);
        if (v > best) {
          best = v;
          best_point = {ns, nt};
        }
      }
      if (best > value) {
        value = best;
        s = best_point[0];
        t = best_point[1];
      } else {
        step /= 2.0;
      }
    }
    return value;
  }

  PosteriorEvaluator evaluate_;
  SearchOptions options_;
  std::map<std::array<double, 4>, Subgrid> memo_;
};

/// Worst-case variance of coefficient l over `rect`.
inline double elementwise_sigma(const RegressionProblem& problem, KernelFamily family,
                                const HyperRectangle& rect, Eigen::Index l,
                                const SearchOptions& options = {}) {
  WorstCaseSearch search(problem, family, options);
  return search.elementwise(rect, l);
}

// ---------------------------------------------------------------------------
// Credible boxes

/// Box of the hyperparameter grid carrying posterior mass >= 1 - delta'.
struct CredibleSet {
  HyperRectangle rect;
  GridBox box;
  double mass = 0.0;
  double delta_prime = 0.0;
};

namespace detail {

inline void require_delta(double delta, const char* name) {
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError(std::string(name) + " must lie in (0, 1)");
}

/// Every box containing `hat` that reaches the target mass and cannot be
/// shrunk along lambda_hi without losing it. Enlarging a box only grows the
/// objectives minimized over these sets, so the others never win.
inline std::vector<GridBox> minimal_feasible_boxes(const HyperGrid& grid, const MassTable& masses,
                                                   const GridIndex& hat, double target) {
  std::vector<GridBox> out;
  const int nl = grid.lambda_count();
  for (int c_lo = 0; c_lo <= hat.c; ++c_lo) {
    for (int c_hi = hat.c; c_hi < grid.c_count(); ++c_hi) {
      for (int l_lo = 0; l_lo <= hat.lambda; ++l_lo) {
        if (masses.mass({c_lo, c_hi, l_lo, nl - 1}) < target) continue;
        int lo = hat.lambda;
        int hi = nl - 1;
        while (lo < hi) {
          const int mid = (lo + hi) / 2;
          if (masses.mass({c_lo, c_hi, l_lo, mid}) >= target) hi = mid;
          else lo = mid + 1;
        }
        out.push_back({c_lo, c_hi, l_lo, lo});
      }
    }
  }
  return out;
}

/// Per-lag maximum of the tabulated grid variances over every box in `boxes`.
/// Boxes must contain `hat`. Result is boxes.size() x n_g, row-major.
inline std::vector<double> screen_boxes(const HyperGrid& grid, const GridIndex& hat,
                                        const std::vector<GridBox>& boxes) {
  const Eigen::Index n = grid.variances({0, 0}).size();
  const int nl = grid.lambda_count();
  std::vector<double> out(boxes.size() * static_cast<std::size_t>(n));
  std::map<std::pair<int, int>, std::vector<std::size_t>> by_c_range;
  for (std::size_t k = 0; k < boxes.size(); ++k) by_c_range[{boxes[k].c_lo, boxes[k].c_hi}].push_back(k);
  MatrixXd colmax(n, nl);
  MatrixXd down(n, nl);
  MatrixXd up(n, nl);
  int current_lo = -1;
  int current_hi = -1;
  for (const auto& [range, members] : by_c_range) {
    const auto [c_lo, c_hi] = range;
    if (c_lo != current_lo) {
      current_lo = c_lo;
      current_hi = c_lo - 1;
      colmax.setConstant(-std::numeric_limits<double>::infinity());
    }
    for (int i = current_hi + 1; i <= c_hi; ++i) {
      for (int j = 0; j < nl; ++j) colmax.col(j) = colmax.col(j).cwiseMax(grid.variances({i, j}));
    }
    current_hi = c_hi;
    down.col(hat.lambda) = colmax.col(hat.lambda);
    for (int j = hat.lambda - 1; j >= 0; --j) down.col(j) = down.col(j + 1).cwiseMax(colmax.col(j));
    up.col(hat.lambda) = colmax.col(hat.lambda);
    for (int j = hat.lambda + 1; j < nl; ++j) up.col(j) = up.col(j - 1).cwiseMax(colmax.col(j));
    for (const std::size_t k : members) {
      const VectorXd best = down.col(boxes[k].lambda_lo).cwiseMax(up.col(boxes[k].lambda_hi));
      std::copy(best.data(), best.data() + n, out.begin() + static_cast<std::ptrdiff_t>(k * static_cast<std::size_t>(n)));
    }
  }
  return out;
}

/// Largest tabulated variance of lag l inside the box.
inline VarianceSeed best_grid_point(const HyperGrid& grid, const GridBox& box, Eigen::Index l) {
  VarianceSeed seed{grid.eta({box.c_lo, box.lambda_lo}), -std::numeric_limits<double>::infinity()};
  for (int i = box.c_lo; i <= box.c_hi; ++i) {
    for (int j = box.lambda_lo; j <= box.lambda_hi; ++j) {
      const double v = grid.variances({i, j})(l);
      if (v > seed.value) seed = {grid.eta({i, j}), v};
    }
  }
  return seed;
}

/// Lower-bounded branch and bound: candidates are visited in increasing order
/// of their screening value (a lower bound on the exact objective), and the
/// search stops once no remaining candidate can beat the incumbent or the
/// budget of exact evaluations is spent.
template <typename Exact>
std::pair<std::size_t, double> bound_and_prune(const std::vector<GridBox>& boxes,
                                               const std::vector<double>& screen, int budget,
                                               Exact&& exact) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (screen[a] != screen[b]) return screen[a] < screen[b];
    if (boxes[a].cells() != boxes[b].cells()) return boxes[a].cells() < boxes[b].cells();
    return boxes[a] < boxes[b];
  });
  std::size_t best = order.front();
  double best_value = std::numeric_limits<double>::infinity();
  int used = 0;
  for (const std::size_t k : order) {
    if (screen[k] >= best_value || used >= budget) break;
    const double value = exact(k);
    ++used;
    if (value < best_value) {
      best_value = value;
      best = k;
    }
  }
  return {best, best_value};
}

inline CredibleSet make_credible_set(const HyperGrid& grid, const GridBox& box, double delta_prime) {
  return {grid.rectangle(box), box, box_mass(grid, box), delta_prime};
}

}  // namespace detail

/// Credible box minimizing the robust band's total width. DI/TC minimize
/// (lambda2/lambda1)^gamma tr K(eta2); other kernels minimize the sum of
/// element-wise worst-case standard deviations. Ties go to the smaller box,
/// then to the lexicographically smaller corners.
inline CredibleSet credible_rectangle(WorstCaseSearch& search, const HyperGrid& grid,
                                      const GridIndex& hat, double delta_prime) {
  detail::require_delta(delta_prime, "delta'");
  const MassTable masses(grid);
  const std::vector<GridBox> boxes =
      detail::minimal_feasible_boxes(grid, masses, hat, 1.0 - delta_prime);
  if (boxes.empty()) {
    throw CoverageInfeasibleError("no grid box reaches the requested posterior mass; enlarge the grid");
  }
  const KernelFamily family = search.family();
  const Eigen::Index n = search.problem().order();
  if (family != KernelFamily::SS) {
    std::size_t best = 0;
    double best_value = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < boxes.size(); ++k) {
      const HyperRectangle rect = grid.rectangle(boxes[k]);
      const double l1 = rect.lower.lambda;
      const double l2 = rect.upper.lambda;
      double trace = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) trace += std::pow(l2, static_cast<double>(i));
      const double value = ordering_exponent(family, l2) * (std::log(l2) - std::log(l1)) +
                           std::log(rect.upper.c) + std::log(trace);
      const bool better =
          value < best_value ||
          (value == best_value && (boxes[k].cells() < boxes[best].cells() ||
                                   (boxes[k].cells() == boxes[best].cells() && boxes[k] < boxes[best])));
      if (better) {
        best = k;
        best_value = value;
      }
    }
    return detail::make_credible_set(grid, boxes[best], delta_prime);
  }
  if (!grid.has_variances()) throw DomainError("hyper grid lacks tabulated variances");
  const std::vector<double> per_lag = detail::screen_boxes(grid, hat, boxes);
  std::vector<double> screen(boxes.size(), 0.0);
  for (std::size_t k = 0; k < boxes.size(); ++k) {
    for (Eigen::Index l = 0; l < n; ++l) {
      screen[k] += std::sqrt(std::max(per_lag[k * static_cast<std::size_t>(n) + static_cast<std::size_t>(l)], 0.0));
    }
  }
  const std::size_t best = detail::bound_and_prune(
      boxes, screen, search.options().max_exact_candidates, [&](std::size_t k) {
        std::vector<std::optional<VarianceSeed>> seeds;
        for (Eigen::Index l = 0; l < n; ++l) seeds.emplace_back(detail::best_grid_point(grid, boxes[k], l));
        return search.elementwise_all(grid.rectangle(boxes[k]), seeds).cwiseMax(0.0).cwiseSqrt().sum();
      }).first;
  return detail::make_credible_set(grid, boxes[best], delta_prime);
}

struct MinimaxResult {
  double sigma2 = 0.0;
  CredibleSet set;
};

/// For every lag l: min over credible boxes of max_{eta in box} Sigma_ll(eta).
inline std::vector<MinimaxResult> minimax_sigma_all(WorstCaseSearch& search, const HyperGrid& grid,
                                                    const GridIndex& hat, double delta_prime) {
  detail::require_delta(delta_prime, "delta'");
  if (!grid.has_variances()) throw DomainError("hyper grid lacks tabulated variances");
  const MassTable masses(grid);
  const double target = 1.0 - delta_prime;
  const std::vector<GridBox> boxes = detail::minimal_feasible_boxes(grid, masses, hat, target);
  if (boxes.empty()) {
    throw CoverageInfeasibleError("no grid box reaches the requested posterior mass; enlarge the grid");
  }
  const auto n = static_cast<std::size_t>(search.problem().order());
  const std::vector<double> per_lag = detail::screen_boxes(grid, hat, boxes);
  std::vector<MinimaxResult> out;
  std::vector<double> screen(boxes.size());
  for (std::size_t l = 0; l < n; ++l) {
    for (std::size_t k = 0; k < boxes.size(); ++k) screen[k] = per_lag[k * n + l];
    const auto lag = static_cast<Eigen::Index>(l);
    const auto [best, value] = detail::bound_and_prune(
        boxes, screen, search.options().max_exact_candidates, [&](std::size_t k) {
          return search.elementwise(grid.rectangle(boxes[k]), lag,
                                    detail::best_grid_point(grid, boxes[k], lag));
        });
    out.push_back({value, detail::make_credible_set(grid, boxes[best], delta_prime)});
  }
  return out;
}

inline MinimaxResult minimax_sigma(WorstCaseSearch& search, const HyperGrid& grid,
                                   const GridIndex& hat, double delta_prime, Eigen::Index l) {
  detail::require_delta(delta_prime, "delta'");
  if (!grid.has_variances()) throw DomainError("hyper grid lacks tabulated variances");
  const MassTable masses(grid);
  const std::vector<GridBox> boxes = detail::minimal_feasible_boxes(grid, masses, hat, 1.0 - delta_prime);
  if (boxes.empty()) {
    throw CoverageInfeasibleError("no grid box reaches the requested posterior mass; enlarge the grid");
  }
  const auto n = static_cast<std::size_t>(search.problem().order());
  const std::vector<double> per_lag = detail::screen_boxes(grid, hat, boxes);
  std::vector<double> screen(boxes.size());
  for (std::size_t k = 0; k < boxes.size(); ++k) screen[k] = per_lag[k * n + static_cast<std::size_t>(l)];
  const auto [best, value] = detail::bound_and_prune(
      boxes, screen, search.options().max_exact_candidates, [&](std::size_t k) {
        return search.elementwise(grid.rectangle(boxes[k]), l, detail::best_grid_point(grid, boxes[k], l));
      });
  return {value, detail::make_credible_set(grid, boxes[best], delta_prime)};
}

// ---------------------------------------------------------------------------
// Robust band

struct RobustBandOptions {
  double delta = 0.1;
  double delta_prime = 0.1;
  Scaling scaling = Scaling::Practical;
  SearchOptions search;
};

struct RobustBound {
  ErrorBand band;
  /// Worst-case variances sigma_l^2.
  VectorXd sigma2;
  double mu_bar = 0.0;
  /// One box shared by all lags (DI/TC) or one box per lag (other kernels).
  std::vector<CredibleSet> sets;
};

/// |y|_S^2 with S = Phi (Phi^T Phi)^-1 Phi^T.
inline double projected_output_norm_sq(const RegressionProblem& problem) {
  const VectorXd& p = problem.phi_t_y();
  return std::max(p.dot(Eigen::LLT<MatrixXd>(problem.gram()).solve(p)), 0.0);
}

inline double scaling_factor(const RegressionProblem& problem, double delta, Scaling scaling,
                             double y_s_norm_sq) {
  const double mu = gaussian_quantile(delta);
  if (scaling == Scaling::Practical) return mu;
  return mu + 2.0 / std::sqrt(problem.noise_var()) * std::sqrt(std::max(y_s_norm_sq, 0.0));
}

/// Robust band for a fixed box, DI/TC only (uniform bound, tightened S).
inline RobustBound robust_band_for_rectangle(const RegressionProblem& problem, KernelFamily family,
                                             const CredibleSet& set, double delta, Scaling scaling) {
  const FactorPosterior worst = uniform_posterior(problem, family, set.rect);
  RobustBound out;
  out.sigma2 = worst.variances();
  double y_s = 0.0;
  if (scaling == Scaling::Theoretical) {
    // y^T Phi Sigma_bar Phi^T y / sigma^2
    const VectorXd z = worst.whitened() * problem.phi_t_y();
    y_s = z.squaredNorm() / problem.noise_var();
  }
  out.mu_bar = scaling_factor(problem, delta, scaling, y_s);
  out.band = {out.mu_bar * out.sigma2.cwiseMax(0.0).cwiseSqrt(), BandMethod::Robust, delta,
              set.delta_prime, scaling};
  out.sets = {set};
  return out;
}

/// Robust band from a tabulated hyperposterior and the estimated grid point.
/// For SS the grid must carry tabulated variances.
inline RobustBound robust_band(WorstCaseSearch& search, const HyperGrid& grid, const GridIndex& hat,
                               double delta, double delta_prime, Scaling scaling) {
  const RegressionProblem& problem = search.problem();
  const KernelFamily family = search.family();
  if (family != KernelFamily::SS) {
    const CredibleSet set = credible_rectangle(search, grid, hat, delta_prime);
    return robust_band_for_rectangle(problem, family, set, delta, scaling);
  }
  const std::vector<MinimaxResult> per_lag = minimax_sigma_all(search, grid, hat, delta_prime);
  RobustBound out;
  out.sigma2.resize(static_cast<Eigen::Index>(per_lag.size()));
  for (std::size_t l = 0; l < per_lag.size(); ++l) {
    out.sigma2(static_cast<Eigen::Index>(l)) = per_lag[l].sigma2;
    out.sets.push_back(per_lag[l].set);
  }
  const double y_s = scaling == Scaling::Theoretical ? projected_output_norm_sq(problem) : 0.0;
  out.mu_bar = scaling_factor(problem, delta, scaling, y_s);
  out.band = {out.mu_bar * out.sigma2.cwiseMax(0.0).cwiseSqrt(), BandMethod::Robust, delta,
              delta_prime, scaling};
  return out;
}

/// End-to-end robust band: tabulate the hyperposterior, estimate eta, bound.
inline RobustBound robust_band(const Dataset& data, KernelFamily family,
                               const RobustBandOptions& options, const GridSpec& spec) {
  const RegressionProblem problem(data);
  HyperposteriorOptions hp;
  hp.tabulate_variances = family == KernelFamily::SS;
  const HyperGrid grid = build_hyperposterior(problem, family, spec, hp);
  WorstCaseSearch search(problem, family, options.search);
  return robust_band(search, grid, grid.argmax_likelihood(), options.delta, options.delta_prime,
                     options.scaling);
}

// ---------------------------------------------------------------------------
// Self-check of the estimate-magnitude inequality behind the robust band

struct CauchySchwarzReport {
  VectorXd estimate_sq;   ///< g_hat_l^2
  VectorXd middle;        ///< Sigma_ll g_hat^T Sigma^-1 g_hat
  VectorXd bound;         ///< Sigma_ll |y|_S^2 / sigma^2
  double norm_direct = 0.0;    ///< g_hat^T Sigma^-1 g_hat as g_hat^T Phi^T y / sigma^2
  double norm_whitened = 0.0;  ///< y^T Phi Sigma Phi^T y / sigma^4
  bool holds = false;
};

inline CauchySchwarzReport cauchy_schwarz_report(const RegressionProblem& problem,
                                                 KernelFamily family, const Hyperparameters& eta,
                                                 double rel_tol = 1e-9) {
  const FactorPosterior post = factor_posterior(problem, family, eta);
  const double s2 = problem.noise_var();
  const VectorXd g = post.estimate();
  const VectorXd var = post.variances();
  CauchySchwarzReport r;
  r.norm_direct = g.dot(problem.phi_t_y()) / s2;
  r.norm_whitened = (post.whitened() * problem.phi_t_y()).squaredNorm() / (s2 * s2);
  const double ys = projected_output_norm_sq(problem);
  r.estimate_sq = g.array().square();
  r.middle = var * r.norm_whitened;
  r.bound = var * (ys / s2);
  const double scale = std::max({std::abs(r.norm_direct), std::abs(r.norm_whitened), 1e-300});
  r.holds = std::abs(r.norm_direct - r.norm_whitened) <= 1e-8 * scale;
  for (Eigen::Index l = 0; l < g.size(); ++l) {
    const double slack = rel_tol * std::max(r.bound(l), 1e-300);
    r.holds = r.holds && r.estimate_sq(l) <= r.middle(l) * (1.0 + rel_tol) + 1e-300 &&
              r.middle(l) <= r.bound(l) + slack;
  }
  return r;
}

inline bool cauchy_schwarz_check(const RegressionProblem& problem, KernelFamily family,
                                 const Hyperparameters& eta) {
  return cauchy_schwarz_report(problem, family, eta).holds;
}

}  // namespace kbid
