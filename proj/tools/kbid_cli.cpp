// kbid: command-line front end for kernel-based FIR identification with
// robust error bands.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "kbid/experiments.hpp"

namespace fs = std::filesystem;
using namespace kbid;

namespace {

/// A command-line flag that overrides one config key.
struct Override {
  std::string key;
  std::string value;
  CLI::Option* option = nullptr;
};

struct CommonArgs {
  std::string config_path;
  std::vector<Override> overrides;
};

void add_common(CLI::App& cmd, CommonArgs& args) {
  cmd.add_option("--config", args.config_path, "INI-style config file (key = value per line)");
  struct Flag {
    const char* key;
    const char* help;
  };
  static const Flag flags[] = {
      {"system", "test system: G1, G2 or custom"},
      {"numerator", "custom system numerator, comma-separated ascending powers of q^-1"},
      {"denominator", "custom system denominator (monic), comma-separated"},
      {"noise_var", "measurement noise variance sigma^2"},
      {"n_samples", "number of samples N"},
      {"n_g", "FIR length n_g"},
      {"kernel", "kernel family: DI, TC or SS"},
      {"delta", "band miss probability delta in (0,1)"},
      {"delta_prime", "hyperparameter credible-set miss probability in (0,1)"},
      {"scaling", "robust band scaling: practical or theoretical"},
      {"runs", "Monte Carlo runs"},
      {"seed", "master seed"},
      {"grid_c_min", "smallest scale c on the grid"},
      {"grid_c_max", "largest scale c on the grid"},
      {"grid_c_count", "number of log-spaced c values"},
      {"grid_lambda_min", "smallest decay lambda on the grid"},
      {"grid_lambda_max", "largest decay lambda on the grid"},
      {"grid_lambda_count", "number of linearly spaced lambda values"},
      {"out_dir", "output directory"},
  };
  args.overrides.reserve(std::size(flags));
  for (const Flag& f : flags) {
    args.overrides.push_back({f.key, {}, nullptr});
    std::string name = f.key;
    std::replace(name.begin(), name.end(), '_', '-');
    args.overrides.back().option = cmd.add_option("--" + name, args.overrides.back().value, f.help);
  }
}

ExperimentConfig resolve_config(const CommonArgs& args) {
  ExperimentConfig cfg = args.config_path.empty() ? ExperimentConfig{} : load_config(args.config_path);
  for (const Override& o : args.overrides) {
    if (o.option->count() > 0) apply_setting(cfg, o.key, o.value);
  }
  cfg.validate();
  return cfg;
}

void write_output(const ExperimentConfig& cfg, const std::string& name, const std::string& content) {
  const fs::path path = fs::path(cfg.out_dir) / name;
  write_file_atomic(path, content);
  std::cout << "wrote " << path.string() << "\n";
}

/// Measured data from `csv`, or one simulated trial of the configured system.
Dataset obtain_data(const ExperimentConfig& cfg, const std::string& csv, std::uint64_t trial,
                    std::optional<ImpulseResponse>& truth) {
  if (!csv.empty()) {
    auto [u, y] = read_dataset_csv(csv);
    return make_dataset(std::move(u), std::move(y), cfg.n_g, cfg.noise_var);
  }
  truth = impulse_response(cfg.transfer_function(), cfg.n_g);
  return simulate_trial_data(cfg, *truth, trial_seed(cfg.seed, trial));
}

void run_simulate(const ExperimentConfig& cfg, std::uint64_t trial) {
  const ImpulseResponse truth = impulse_response(cfg.transfer_function(), cfg.n_g);
  const Dataset data = simulate_trial_data(cfg, truth, trial_seed(cfg.seed, trial));
  write_output(cfg, "dataset.csv", dataset_csv(data));
  write_output(cfg, "truth.csv", vector_csv("g", truth));
}

void run_identify(const ExperimentConfig& cfg, const std::string& csv, std::uint64_t trial) {
  std::optional<ImpulseResponse> truth;
  const RegressionProblem problem(obtain_data(cfg, csv, trial, truth));
  const LeastSquaresModel ls = least_squares(problem);
  const HyperGrid grid = build_hyperposterior(problem, cfg.kernel, cfg.grid);
  const GridIndex hat = grid.argmax_likelihood();
  const Hyperparameters eta = grid.eta(hat);
  const PosteriorModel post = regularized_estimate(problem, cfg.kernel, eta);

  std::string est = "l,g_ls,g_hat,variance\n";
  for (Eigen::Index l = 0; l < post.g_hat.size(); ++l) {
    est += std::to_string(l) + "," + fmt(ls.g_hat(l)) + "," + fmt(post.g_hat(l)) + "," +
           fmt(post.sigma(l, l)) + "\n";
  }
  write_output(cfg, "estimate.csv", est);
  write_output(cfg, "covariance.csv", matrix_csv(post.sigma));
  write_output(cfg, "hyperparameters.csv",
               "kernel,c_hat,lambda_hat,log_marginal\n" + to_string(cfg.kernel) + "," + fmt(eta.c) +
                   "," + fmt(eta.lambda) + "," + fmt(grid.log_marginal(hat)) + "\n");
  std::cout << "c_hat = " << fmt(eta.c) << ", lambda_hat = " << fmt(eta.lambda) << "\n";
}

void run_bound(const ExperimentConfig& cfg, const std::string& csv, std::uint64_t trial,
               const std::string& method) {
  std::optional<ImpulseResponse> truth;
  const RegressionProblem problem(obtain_data(cfg, csv, trial, truth));
  std::string out = "l,method,estimate,half_width,lower,upper\n";
  auto append = [&](const VectorXd& estimate, const ErrorBand& band) {
    for (Eigen::Index l = 0; l < estimate.size(); ++l) {
      const double b = band.half_width(l);
      out += std::to_string(l) + "," + to_string(band.method) + "," + fmt(estimate(l)) + "," + fmt(b) +
             "," + fmt(estimate(l) - b) + "," + fmt(estimate(l) + b) + "\n";
    }
  };
  const bool all = method == "all";
  if (all || method == "ls") {
    const LeastSquaresModel ls = least_squares(problem);
    append(ls.g_hat, ls_band(ls, cfg.delta));
  }
  if (all || method == "vanilla" || method == "robust") {
    HyperposteriorOptions hp;
    hp.tabulate_variances = cfg.kernel == KernelFamily::SS && (all || method == "robust");
    const HyperGrid grid = build_hyperposterior(problem, cfg.kernel, cfg.grid, hp);
    const GridIndex hat = grid.argmax_likelihood();
    const PosteriorModel post = regularized_estimate(problem, cfg.kernel, grid.eta(hat));
    if (all || method == "vanilla") append(post.g_hat, vanilla_band(post, cfg.delta));
    if (all || method == "robust") {
      WorstCaseSearch search(problem, cfg.kernel, cfg.search);
      const RobustBound robust = robust_band(search, grid, hat, cfg.delta, cfg.delta_prime, cfg.scaling);
      append(post.g_hat, robust.band);
      std::cout << "mu_bar = " << fmt(robust.mu_bar) << "\n";
    }
  }
  write_output(cfg, "bands.csv", out);
}

void run_montecarlo_command(const ExperimentConfig& cfg, unsigned jobs) {
  const CoverageReport report = run_montecarlo(cfg, jobs);
  write_output(cfg, "coverage.csv", coverage_csv(report));
  write_output(cfg, "trials.csv", trials_csv(report));
  write_output(cfg, "halfwidths.csv", halfwidths_csv(report));
  for (const auto m : {BandMethod::LeastSquares, BandMethod::Vanilla, BandMethod::Robust}) {
    std::cout << to_string(m) << ": mean containment " << fmt(report.frequency(m).mean())
              << ", mean half-width " << fmt(report.mean_half_width(m)) << "\n";
  }
}

void run_density(const ExperimentConfig& cfg, std::uint64_t trial) {
  const HyperGrid grid = emit_density_map(cfg, trial_seed(cfg.seed, trial));
  write_output(cfg, "density.csv", density_csv(grid));
  std::cout << "smallest box holding 0.9 mass covers " << fmt(localization_fraction(grid, 0.9))
            << " of the grid\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel-based FIR identification with robust probabilistic error bands"};
  app.require_subcommand(1);

  CommonArgs sim_args, id_args, bound_args, mc_args, dens_args;
  std::uint64_t trial = 0;
  std::string data_csv;
  std::string method = "all";
  unsigned jobs = std::max(1u, std::thread::hardware_concurrency());

  auto* sim = app.add_subcommand("simulate", "simulate one dataset (dataset.csv, truth.csv)");
  add_common(*sim, sim_args);
  sim->add_option("--trial", trial, "trial index; the seed is derived from the master seed");

  auto* id = app.add_subcommand("identify",
                                "estimate g by least squares and by the kernel posterior at the "
                                "marginal-likelihood grid maximum (estimate.csv, covariance.csv, "
                                "hyperparameters.csv)");
  add_common(*id, id_args);
  id->add_option("--trial", trial, "trial index when simulating");
  id->add_option("--data", data_csv, "measured t,u,y CSV instead of simulated data");

  auto* bound = app.add_subcommand("bound", "error bands for one dataset (bands.csv)");
  add_common(*bound, bound_args);
  bound->add_option("--trial", trial, "trial index when simulating");
  bound->add_option("--data", data_csv, "measured t,u,y CSV instead of simulated data");
  bound->add_option("--method", method, "ls, vanilla, robust or all")
      ->check(CLI::IsMember({"ls", "vanilla", "robust", "all"}));

  auto* mc = app.add_subcommand("montecarlo",
                                "coverage experiment (coverage.csv, trials.csv, halfwidths.csv)");
  add_common(*mc, mc_args);
  mc->add_option("--jobs", jobs, "parallel trials")->check(CLI::PositiveNumber);

  auto* dens = app.add_subcommand("density", "hyperparameter posterior on the grid (density.csv)");
  add_common(*dens, dens_args);
  dens->add_option("--trial", trial, "trial index");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed()) run_simulate(resolve_config(sim_args), trial);
    else if (id->parsed()) run_identify(resolve_config(id_args), data_csv, trial);
    else if (bound->parsed()) run_bound(resolve_config(bound_args), data_csv, trial, method);
    else if (mc->parsed()) run_montecarlo_command(resolve_config(mc_args), jobs);
    else if (dens->parsed()) run_density(resolve_config(dens_args), trial);
  } catch (const ConfigNotFound& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
