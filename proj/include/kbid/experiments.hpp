#pragma once

// Monte Carlo harness: configuration files, single trials, coverage
// aggregation and CSV emission.

#include <Eigen/Dense>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kbid/bounds.hpp"
#include "kbid/errors.hpp"
#include "kbid/estimation.hpp"
#include "kbid/hypergrid.hpp"
#include "kbid/kernels.hpp"
#include "kbid/linsys.hpp"
#include "kbid/parallel.hpp"

namespace kbid {

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ConfigNotFound : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

struct ExperimentConfig {
  std::string system = "G1";
  std::vector<double> numerator;    ///< custom systems only
  std::vector<double> denominator;  ///< custom systems only
  double noise_var = 0.1;
  int n_samples = 200;
  int n_g = 50;
  KernelFamily kernel = KernelFamily::TC;
  double delta = 0.1;
  double delta_prime = 0.1;
  Scaling scaling = Scaling::Practical;
  int runs = 100;
  std::uint64_t seed = 1;
  GridSpec grid;
  std::string out_dir = ".";
  SearchOptions search;

  TransferFunction transfer_function() const {
    if (system == "G1") return system_g1();
    if (system == "G2") return system_g2();
    if (system == "custom") return {numerator, denominator};
    throw ConfigError("unknown system '" + system + "' (expected G1, G2 or custom)");
  }

  void validate() const {
    if (n_samples < 1 || n_g < 1 || runs < 1) throw ConfigError("counts must be positive");
    if (n_samples < n_g) throw ConfigError("n_samples must be at least n_g");
    if (!(noise_var > 0.0)) throw ConfigError("noise_var must be positive");
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("delta must lie in (0, 1)");
    if (!(delta_prime > 0.0 && delta_prime < 1.0)) throw ConfigError("delta_prime must lie in (0, 1)");
    try {
      grid.validate();
      if (!transfer_function().is_stable()) throw ConfigError("system is unstable");
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + value + "'");
  }
}

inline long long parse_integer(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + value + "'");
  }
}

inline std::vector<double> parse_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(key, trim(item)));
  return out;
}

}  // namespace detail

/// Applies one `key = value` setting. Keys mirror the config file format.
inline void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_double;
  using detail::parse_integer;
  auto as_int = [&](const std::string& k, const std::string& v) {
    const long long x = parse_integer(k, v);
    if (x < 0 || x > 1'000'000'000) throw ConfigError("key '" + k + "' out of range");
    return static_cast<int>(x);
  };
  try {
    if (key == "system") cfg.system = value;
    else if (key == "numerator") cfg.numerator = detail::parse_list(key, value);
    else if (key == "denominator") cfg.denominator = detail::parse_list(key, value);
    else if (key == "noise_var") cfg.noise_var = parse_double(key, value);
    else if (key == "n_samples") cfg.n_samples = as_int(key, value);
    else if (key == "n_g") cfg.n_g = as_int(key, value);
    else if (key == "kernel") cfg.kernel = parse_kernel_family(value);
    else if (key == "delta") cfg.delta = parse_double(key, value);
    else if (key == "delta_prime") cfg.delta_prime = parse_double(key, value);
    else if (key == "scaling") cfg.scaling = parse_scaling(value);
    else if (key == "runs") cfg.runs = as_int(key, value);
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_integer(key, value));
    else if (key == "grid_c_min") cfg.grid.c_min = parse_double(key, value);
    else if (key == "grid_c_max") cfg.grid.c_max = parse_double(key, value);
    else if (key == "grid_c_count") cfg.grid.c_count = as_int(key, value);
    else if (key == "grid_lambda_min") cfg.grid.lambda_min = parse_double(key, value);
    else if (key == "grid_lambda_max") cfg.grid.lambda_max = parse_double(key, value);
    else if (key == "grid_lambda_count") cfg.grid.lambda_count = as_int(key, value);
    else if (key == "out_dir") cfg.out_dir = value;
    else throw ConfigError("unknown config key '" + key + "'");
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

/// Parses INI-style text: `key = value` lines, `#`/`;` comments, and
/// `[section]` headers, which are ignored.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig cfg = {}) {
  std::stringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto comment = line.find_first_of("#;");
    if (comment != std::string::npos) line.erase(comment);
    line = detail::trim(line);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(number) + ": expected key = value");
    }
    apply_setting(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigNotFound("config not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// seed_i = master XOR (i * 0x9E3779B97F4A7C15 mod 2^64).
inline std::uint64_t trial_seed(std::uint64_t master, std::uint64_t index) {
  return master ^ (index * 0x9E3779B97F4A7C15ULL);
}

/// Unit-Gaussian input followed by the noise, both from one generator.
inline Dataset simulate_trial_data(const ExperimentConfig& cfg, const ImpulseResponse& truth,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const VectorXd u = gaussian_vector(rng, cfg.n_samples);
  return simulate_fir(truth, u, cfg.noise_var, rng);
}

struct TrialRecord {
  std::uint64_t seed = 0;
  Hyperparameters eta_hat;
  VectorXd truth;
  VectorXd g_ls;
  VectorXd g_hat;
  ErrorBand ls;
  ErrorBand vanilla;
  ErrorBand robust;
  double mu_bar = 0.0;
  std::vector<CredibleSet> sets;

  bool contained(BandMethod method, Eigen::Index l) const {
    switch (method) {
      case BandMethod::LeastSquares: return ls.contains(g_ls, truth, l);
      case BandMethod::Vanilla: return vanilla.contains(g_hat, truth, l);
      case BandMethod::Robust: return robust.contains(g_hat, truth, l);
    }
    return false;
  }
  const CredibleSet& set_for(Eigen::Index l) const {
    return sets.size() == 1 ? sets.front() : sets[static_cast<std::size_t>(l)];
  }
};

/// All three bands for a given dataset and known truth.
inline TrialRecord bound_dataset(const ExperimentConfig& cfg, const Dataset& data,
                                 const ImpulseResponse& truth) {
  const RegressionProblem problem(data);
  TrialRecord rec;
  rec.truth = truth;
  const LeastSquaresModel ls = least_squares(problem);
  rec.g_ls = ls.g_hat;
  rec.ls = ls_band(ls, cfg.delta);

  HyperposteriorOptions hp;
  hp.tabulate_variances = cfg.kernel == KernelFamily::SS;
  const HyperGrid grid = build_hyperposterior(problem, cfg.kernel, cfg.grid, hp);
  const GridIndex hat = grid.argmax_likelihood();
  rec.eta_hat = grid.eta(hat);
  const PosteriorModel post = regularized_estimate(problem, cfg.kernel, rec.eta_hat);
  rec.g_hat = post.g_hat;
  rec.vanilla = vanilla_band(post, cfg.delta);

  WorstCaseSearch search(problem, cfg.kernel, cfg.search);
  RobustBound robust = robust_band(search, grid, hat, cfg.delta, cfg.delta_prime, cfg.scaling);
  rec.robust = std::move(robust.band);
  rec.mu_bar = robust.mu_bar;
  rec.sets = std::move(robust.sets);
  return rec;
}

inline TrialRecord run_trial(const ExperimentConfig& cfg, std::uint64_t seed) {
  const ImpulseResponse truth = impulse_response(cfg.transfer_function(), cfg.n_g);
  TrialRecord rec = bound_dataset(cfg, simulate_trial_data(cfg, truth, seed), truth);
  rec.seed = seed;
  return rec;
}

struct CoverageReport {
  int n_g = 0;
  int runs = 0;
  VectorXd ls;
  VectorXd vanilla;
  VectorXd robust;
  std::vector<TrialRecord> trials;

  const VectorXd& frequency(BandMethod method) const {
    switch (method) {
      case BandMethod::LeastSquares: return ls;
      case BandMethod::Vanilla: return vanilla;
      case BandMethod::Robust: return robust;
    }
    return ls;
  }

  /// Mean half-width over all runs and lags.
  double mean_half_width(BandMethod method) const {
    double total = 0.0;
    for (const auto& t : trials) {
      const ErrorBand& b = method == BandMethod::LeastSquares ? t.ls
                           : method == BandMethod::Vanilla    ? t.vanilla
                                                              : t.robust;
      total += b.half_width.sum();
    }
    return total / (static_cast<double>(trials.size()) * n_g);
  }
};

class TrialFailed : public Error {
 public:
  TrialFailed(std::size_t index, std::uint64_t seed, const std::string& what)
      : Error("trial " + std::to_string(index) + " (seed " + std::to_string(seed) + ") failed: " + what),
        seed_(seed) {}
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
};

inline CoverageReport aggregate(std::vector<TrialRecord> trials, int n_g) {
  CoverageReport report;
  report.n_g = n_g;
  report.runs = static_cast<int>(trials.size());
  report.ls = VectorXd::Zero(n_g);
  report.vanilla = VectorXd::Zero(n_g);
  report.robust = VectorXd::Zero(n_g);
  for (const auto& t : trials) {
    for (Eigen::Index l = 0; l < n_g; ++l) {
      report.ls(l) += t.contained(BandMethod::LeastSquares, l) ? 1.0 : 0.0;
      report.vanilla(l) += t.contained(BandMethod::Vanilla, l) ? 1.0 : 0.0;
      report.robust(l) += t.contained(BandMethod::Robust, l) ? 1.0 : 0.0;
    }
  }
  const double runs = static_cast<double>(trials.size());
  report.ls /= runs;
  report.vanilla /= runs;
  report.robust /= runs;
  report.trials = std::move(trials);
  return report;
}

inline CoverageReport run_montecarlo(const ExperimentConfig& cfg, unsigned jobs = 1) {
  cfg.validate();
  std::vector<TrialRecord> trials(static_cast<std::size_t>(cfg.runs));
  parallel_for(trials.size(), jobs, [&](std::size_t i) {
    const std::uint64_t seed = trial_seed(cfg.seed, i);
    try {
      trials[i] = run_trial(cfg, seed);
    } catch (const std::exception& e) {
      throw TrialFailed(i, seed, e.what());
    }
  });
  return aggregate(std::move(trials), cfg.n_g);
}

// ---------------------------------------------------------------------------
// CSV

/// Shortest round-trip-safe rendering (17 significant digits).
inline std::string fmt(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

inline std::string coverage_csv(const CoverageReport& r) {
  std::string out = "l,ls,vanilla,robust\n";
  for (int l = 0; l < r.n_g; ++l) {
    out += std::to_string(l) + "," + fmt(r.ls(l)) + "," + fmt(r.vanilla(l)) + "," + fmt(r.robust(l)) + "\n";
  }
  return out;
}

inline std::string trials_csv(const CoverageReport& r) {
  std::string out = "run,seed,c_hat,lambda_hat,mu_bar,mean_hw_ls,mean_hw_vanilla,mean_hw_robust\n";
  for (std::size_t i = 0; i < r.trials.size(); ++i) {
    const auto& t = r.trials[i];
    out += std::to_string(i) + "," + std::to_string(t.seed) + "," + fmt(t.eta_hat.c) + "," +
           fmt(t.eta_hat.lambda) + "," + fmt(t.mu_bar) + "," + fmt(t.ls.half_width.mean()) + "," +
           fmt(t.vanilla.half_width.mean()) + "," + fmt(t.robust.half_width.mean()) + "\n";
  }
  return out;
}

inline std::string halfwidths_csv(const CoverageReport& r) {
  std::string out =
      "run,l,g_true,g_ls,g_hat,hw_ls,hw_vanilla,hw_robust,c1,lambda1,c2,lambda2,mass\n";
  for (std::size_t i = 0; i < r.trials.size(); ++i) {
    const auto& t = r.trials[i];
    for (int l = 0; l < r.n_g; ++l) {
      const CredibleSet& s = t.set_for(l);
      out += std::to_string(i) + "," + std::to_string(l) + "," + fmt(t.truth(l)) + "," +
             fmt(t.g_ls(l)) + "," + fmt(t.g_hat(l)) + "," + fmt(t.ls.half_width(l)) + "," +
             fmt(t.vanilla.half_width(l)) + "," + fmt(t.robust.half_width(l)) + "," +
             fmt(s.rect.lower.c) + "," + fmt(s.rect.lower.lambda) + "," + fmt(s.rect.upper.c) + "," +
             fmt(s.rect.upper.lambda) + "," + fmt(s.mass) + "\n";
    }
  }
  return out;
}

inline std::string density_csv(const HyperGrid& grid) {
  std::string out = "c,lambda,density\n";
  for (int i = 0; i < grid.c_count(); ++i) {
    for (int j = 0; j < grid.lambda_count(); ++j) {
      const Hyperparameters eta = grid.eta({i, j});
      out += fmt(eta.c) + "," + fmt(eta.lambda) + "," + fmt(grid.weight({i, j})) + "\n";
    }
  }
  return out;
}

inline std::string dataset_csv(const Dataset& data) {
  std::string out = "t,u,y\n";
  for (Eigen::Index t = 0; t < data.samples(); ++t) {
    out += std::to_string(t + 1) + "," + fmt(data.u(t)) + "," + fmt(data.y(t)) + "\n";
  }
  return out;
}

inline std::string vector_csv(const std::string& name, const VectorXd& v) {
  std::string out = "l," + name + "\n";
  for (Eigen::Index l = 0; l < v.size(); ++l) out += std::to_string(l) + "," + fmt(v(l)) + "\n";
  return out;
}

inline std::string matrix_csv(const MatrixXd& m) {
  std::string out;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out += (j ? "," : "") + fmt(m(i, j));
    out += "\n";
  }
  return out;
}

/// Reads `t,u,y` records as written by dataset_csv.
inline std::pair<VectorXd, VectorXd> read_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("dataset not found: " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<double> u;
  std::vector<double> y;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const std::vector<double> row = detail::parse_list("dataset", line);
    if (row.size() != 3) throw ConfigError("dataset rows must have three columns t,u,y");
    u.push_back(row[1]);
    y.push_back(row[2]);
  }
  return {Eigen::Map<VectorXd>(u.data(), static_cast<Eigen::Index>(u.size())),
          Eigen::Map<VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()))};
}

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw Error("failed writing " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw Error("cannot rename " + tmp.string() + ": " + ec.message());
  }
}

/// Normalized hyperposterior of one simulated dataset.
inline HyperGrid emit_density_map(const ExperimentConfig& cfg, std::uint64_t seed) {
  const ImpulseResponse truth = impulse_response(cfg.transfer_function(), cfg.n_g);
  return build_hyperposterior(simulate_trial_data(cfg, truth, seed), cfg.kernel, cfg.grid);
}

/// Fraction of grid cells covered by the smallest box holding `mass`.
inline double localization_fraction(const HyperGrid& grid, double mass) {
  const MassTable table(grid);
  int best = grid.c_count() * grid.lambda_count();
  for (int c_lo = 0; c_lo < grid.c_count(); ++c_lo) {
    for (int c_hi = c_lo; c_hi < grid.c_count(); ++c_hi) {
      int l_hi = 0;
      for (int l_lo = 0; l_lo < grid.lambda_count(); ++l_lo) {
        l_hi = std::max(l_hi, l_lo);
        while (l_hi < grid.lambda_count() && table.mass({c_lo, c_hi, l_lo, l_hi}) < mass) ++l_hi;
        if (l_hi == grid.lambda_count()) break;
        best = std::min(best, GridBox{c_lo, c_hi, l_lo, l_hi}.cells());
      }
    }
  }
  return static_cast<double>(best) / static_cast<double>(grid.size());
}

}  // namespace kbid
