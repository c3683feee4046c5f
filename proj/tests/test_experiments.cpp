#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "kbid/experiments.hpp"

using namespace kbid;
namespace fs = std::filesystem;

namespace {

ExperimentConfig quick_config() {
  ExperimentConfig cfg;
  cfg.system = "G1";
  cfg.noise_var = 0.1;
  cfg.n_samples = 60;
  cfg.n_g = 10;
  cfg.runs = 4;
  cfg.seed = 77;
  cfg.grid.c_count = 12;
  cfg.grid.lambda_count = 12;
  return cfg;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("kbid_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_record(const TrialRecord& a, const TrialRecord& b) {
  return a.seed == b.seed && a.eta_hat == b.eta_hat && a.g_ls == b.g_ls && a.g_hat == b.g_hat &&
         a.ls.half_width == b.ls.half_width && a.vanilla.half_width == b.vanilla.half_width &&
         a.robust.half_width == b.robust.half_width && a.mu_bar == b.mu_bar;
}

}  // namespace

TEST(Config, ParsesEveryKey) {
  const std::string text = R"(# comment line
[experiment]
system = custom
numerator = 0, 1
denominator = 1, -0.5   ; trailing comment
noise_var = 0.5
n_samples = 300
n_g = 40
kernel = ss
delta = 0.05
delta_prime = 0.2
scaling = theoretical
runs = 7
seed = 123456789
grid_c_min = 0.01
grid_c_max = 100
grid_c_count = 20
grid_lambda_min = 0.1
grid_lambda_max = 0.95
grid_lambda_count = 25
out_dir = results/a
)";
  const ExperimentConfig c = parse_config(text);
  EXPECT_EQ(c.system, "custom");
  EXPECT_EQ(c.numerator, (std::vector<double>{0, 1}));
  EXPECT_EQ(c.denominator, (std::vector<double>{1, -0.5}));
  EXPECT_EQ(c.noise_var, 0.5);
  EXPECT_EQ(c.n_samples, 300);
  EXPECT_EQ(c.n_g, 40);
  EXPECT_EQ(c.kernel, KernelFamily::SS);
  EXPECT_EQ(c.delta, 0.05);
  EXPECT_EQ(c.delta_prime, 0.2);
  EXPECT_EQ(c.scaling, Scaling::Theoretical);
  EXPECT_EQ(c.runs, 7);
  EXPECT_EQ(c.seed, 123456789u);
  EXPECT_EQ(c.grid.c_min, 0.01);
  EXPECT_EQ(c.grid.c_max, 100.0);
  EXPECT_EQ(c.grid.c_count, 20);
  EXPECT_EQ(c.grid.lambda_min, 0.1);
  EXPECT_EQ(c.grid.lambda_max, 0.95);
  EXPECT_EQ(c.grid.lambda_count, 25);
  EXPECT_EQ(c.out_dir, "results/a");
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(impulse_response(c.transfer_function(), 3), (VectorXd(3) << 0, 1, 0.5).finished());
}

TEST(Config, Defaults) {
  const ExperimentConfig c = parse_config("");
  EXPECT_EQ(c.system, "G1");
  EXPECT_EQ(c.n_samples, 200);
  EXPECT_EQ(c.n_g, 50);
  EXPECT_EQ(c.kernel, KernelFamily::TC);
  EXPECT_EQ(c.delta, 0.1);
  EXPECT_EQ(c.delta_prime, 0.1);
  EXPECT_EQ(c.scaling, Scaling::Practical);
  EXPECT_EQ(c.runs, 100);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("bogus = 1"), ConfigError);
  EXPECT_THROW(parse_config("noise_var = abc"), ConfigError);
  EXPECT_THROW(parse_config("n_g = 2.5"), ConfigError);
  EXPECT_THROW(parse_config("runs = -1"), ConfigError);
  EXPECT_THROW(parse_config("kernel = dc"), ConfigError);
  EXPECT_THROW(parse_config("scaling = loose"), ConfigError);
  EXPECT_THROW(parse_config("just words"), ConfigError);
  EXPECT_THROW(parse_config("delta = 1.5").validate(), ConfigError);
  EXPECT_THROW(parse_config("delta_prime = 0").validate(), ConfigError);
  EXPECT_THROW(parse_config("noise_var = 0").validate(), ConfigError);
  EXPECT_THROW(parse_config("n_samples = 10\nn_g = 20").validate(), ConfigError);
  EXPECT_THROW(parse_config("system = G3").validate(), ConfigError);
  EXPECT_THROW(parse_config("system = custom\nnumerator = 1\ndenominator = 1, -1.5").validate(), ConfigError);
  EXPECT_THROW(parse_config("grid_lambda_max = 1").validate(), ConfigError);
}

TEST(Config, MissingFile) {
  try {
    load_config("/nonexistent/dir/none.cfg");
    FAIL() << "expected ConfigNotFound";
  } catch (const ConfigNotFound& e) {
    EXPECT_NE(std::string(e.what()).find("config not found"), std::string::npos);
  }
}

TEST(Config, LoadFromFile) {
  const fs::path dir = scratch_dir("cfg");
  std::ofstream(dir / "a.cfg") << "runs = 3\nkernel = DI\n";
  const ExperimentConfig c = load_config(dir / "a.cfg");
  EXPECT_EQ(c.runs, 3);
  EXPECT_EQ(c.kernel, KernelFamily::DI);
  fs::remove_all(dir);
}

TEST(Seeds, TrialSeedFormula) {
  EXPECT_EQ(trial_seed(5, 0), 5u);
  EXPECT_EQ(trial_seed(5, 1), 5u ^ 0x9E3779B97F4A7C15ULL);
  EXPECT_EQ(trial_seed(0, 2), 2ULL * 0x9E3779B97F4A7C15ULL);
  EXPECT_EQ(trial_seed(0, 3), 0x9E3779B97F4A7C15ULL * 3ULL);
}

TEST(RunTrial, DeterministicUnderSeed) {
  for (const auto f : {KernelFamily::TC, KernelFamily::SS}) {
    ExperimentConfig cfg = quick_config();
    cfg.kernel = f;
    const TrialRecord a = run_trial(cfg, 99);
    const TrialRecord b = run_trial(cfg, 99);
    EXPECT_TRUE(same_record(a, b));
    EXPECT_EQ(a.truth, impulse_response(system_g1(), 10));
    EXPECT_EQ(a.sets.size(), f == KernelFamily::SS ? 10u : 1u);
    for (Eigen::Index l = 0; l < 10; ++l) {
      EXPECT_GE(a.set_for(l).mass, 0.9);
      EXPECT_GE(a.ls.half_width(l), 0.0);
      EXPECT_GE(a.robust.half_width(l), 0.0);
    }
  }
}

TEST(RunTrial, NearlyNoiseFreeBandsCollapse) {
  ExperimentConfig cfg = quick_config();
  cfg.noise_var = 1e-12;
  for (const auto f : {KernelFamily::TC, KernelFamily::SS}) {
    cfg.kernel = f;
    const TrialRecord r = run_trial(cfg, 5);
    EXPECT_LT(r.ls.half_width.maxCoeff(), 1e-4);
    EXPECT_LT(r.vanilla.half_width.maxCoeff(), 1e-4);
    EXPECT_LT(r.robust.half_width.maxCoeff(), 1e-4);
    EXPECT_LT((r.g_ls - r.truth).cwiseAbs().maxCoeff(), 1e-4);
    EXPECT_LT((r.g_hat - r.truth).cwiseAbs().maxCoeff(), 1e-4);
  }
}

TEST(RunTrial, ExactDataIsContainedByEveryBand) {
  ExperimentConfig cfg = quick_config();
  const ImpulseResponse truth = impulse_response(system_g1(), cfg.n_g);
  ExperimentConfig clean = cfg;
  clean.noise_var = 0.0;
  Dataset data = simulate_trial_data(clean, truth, 11);
  data.noise_var = 1e-12;
  for (const auto f : {KernelFamily::TC, KernelFamily::SS}) {
    cfg.kernel = f;
    const TrialRecord r = bound_dataset(cfg, data, truth);
    for (Eigen::Index l = 0; l < cfg.n_g; ++l) {
      EXPECT_TRUE(r.contained(BandMethod::LeastSquares, l)) << l;
      EXPECT_TRUE(r.contained(BandMethod::Vanilla, l)) << l;
      EXPECT_TRUE(r.contained(BandMethod::Robust, l)) << l;
    }
  }
}

TEST(MonteCarlo, SingleRunEqualsTrialIndicators) {
  ExperimentConfig cfg = quick_config();
  cfg.runs = 1;
  const CoverageReport rep = run_montecarlo(cfg);
  const TrialRecord t = run_trial(cfg, trial_seed(cfg.seed, 0));
  ASSERT_EQ(rep.trials.size(), 1u);
  EXPECT_TRUE(same_record(rep.trials[0], t));
  for (Eigen::Index l = 0; l < cfg.n_g; ++l) {
    EXPECT_EQ(rep.ls(l), t.contained(BandMethod::LeastSquares, l) ? 1.0 : 0.0);
    EXPECT_EQ(rep.vanilla(l), t.contained(BandMethod::Vanilla, l) ? 1.0 : 0.0);
    EXPECT_EQ(rep.robust(l), t.contained(BandMethod::Robust, l) ? 1.0 : 0.0);
  }
}

TEST(MonteCarlo, ReportShapeAndRanges) {
  const ExperimentConfig cfg = quick_config();
  const CoverageReport rep = run_montecarlo(cfg, 2);
  EXPECT_EQ(rep.runs, cfg.runs);
  for (const auto m : {BandMethod::LeastSquares, BandMethod::Vanilla, BandMethod::Robust}) {
    ASSERT_EQ(rep.frequency(m).size(), cfg.n_g);
    EXPECT_GE(rep.frequency(m).minCoeff(), 0.0);
    EXPECT_LE(rep.frequency(m).maxCoeff(), 1.0);
    EXPECT_GT(rep.mean_half_width(m), 0.0);
  }
  for (std::size_t i = 0; i < rep.trials.size(); ++i) EXPECT_EQ(rep.trials[i].seed, trial_seed(cfg.seed, i));
}

TEST(MonteCarlo, IndependentOfJobCount) {
  const ExperimentConfig cfg = quick_config();
  const CoverageReport a = run_montecarlo(cfg, 1);
  const CoverageReport b = run_montecarlo(cfg, 3);
  EXPECT_EQ(coverage_csv(a), coverage_csv(b));
  EXPECT_EQ(trials_csv(a), trials_csv(b));
  EXPECT_EQ(halfwidths_csv(a), halfwidths_csv(b));
}

TEST(MonteCarlo, InvalidConfigRejected) {
  ExperimentConfig cfg = quick_config();
  cfg.delta = 0.0;
  EXPECT_THROW(run_montecarlo(cfg), ConfigError);
}

TEST(MonteCarlo, TrialFailureNamesTheSeed) {
  const TrialFailed e(3, 42, "boom");
  EXPECT_EQ(e.seed(), 42u);
  EXPECT_NE(std::string(e.what()).find("seed 42"), std::string::npos);
}

TEST(Parallel, LowestFailingIndexWins) {
  std::atomic<int> calls{0};
  try {
    parallel_for(50, 4, [&](std::size_t i) {
      ++calls;
      if (i == 7 || i == 31) throw std::runtime_error(std::to_string(i));
    });
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "7");
  }
  EXPECT_EQ(calls.load(), 50);
  std::vector<int> out(100, 0);
  parallel_for(out.size(), 8, [&](std::size_t i) { out[i] = static_cast<int>(i); });
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], static_cast<int>(i));
}

TEST(Csv, FormatsRoundTrip) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0}) EXPECT_EQ(std::stod(fmt(v)), v);
  EXPECT_EQ(fmt(0.5), "0.5");
}

TEST(Csv, CoverageShape) {
  ExperimentConfig cfg = quick_config();
  cfg.runs = 2;
  const std::string csv = coverage_csv(run_montecarlo(cfg));
  std::stringstream ss(csv);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line, "l,ls,vanilla,robust");
  int rows = 0;
  while (std::getline(ss, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3);
    ++rows;
  }
  EXPECT_EQ(rows, cfg.n_g);
}

TEST(Csv, DatasetRoundTrip) {
  const ExperimentConfig cfg = quick_config();
  const Dataset d = simulate_trial_data(cfg, impulse_response(system_g2(), cfg.n_g), 3);
  const fs::path dir = scratch_dir("ds");
  write_file_atomic(dir / "d.csv", dataset_csv(d));
  const auto [u, y] = read_dataset_csv(dir / "d.csv");
  EXPECT_EQ(u, d.u);
  EXPECT_EQ(y, d.y);
  fs::remove_all(dir);
}

TEST(Csv, MatrixAndVector) {
  EXPECT_EQ(vector_csv("g", (VectorXd(2) << 1, 0.25).finished()), "l,g\n0,1\n1,0.25\n");
  EXPECT_EQ(matrix_csv((MatrixXd(2, 2) << 1, 2, 3, 4).finished()), "1,2\n3,4\n");
}

TEST(AtomicWrite, ReplacesWithoutLeftovers) {
  const fs::path dir = scratch_dir("atomic");
  const fs::path target = dir / "sub" / "out.csv";
  write_file_atomic(target, "first\n");
  write_file_atomic(target, "second\n");
  EXPECT_EQ(slurp(target), "second\n");
  int entries = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(target.parent_path())) ++entries;
  EXPECT_EQ(entries, 1);
  fs::remove_all(dir);
}

TEST(AtomicWrite, FailureLeavesNoFile) {
  const fs::path dir = scratch_dir("atomic_fail");
  // The target is an existing non-empty directory, so the rename must fail.
  fs::create_directories(dir / "blocked" / "inner");
  EXPECT_THROW(write_file_atomic(dir / "blocked", "x"), Error);
  EXPECT_FALSE(fs::exists(dir / "blocked.tmp"));
  fs::remove_all(dir);
}

TEST(Density, SingleAndEqualCells) {
  ExperimentConfig cfg = quick_config();
  cfg.grid.c_count = 1;
  cfg.grid.lambda_count = 1;
  const std::string one = density_csv(emit_density_map(cfg, 1));
  EXPECT_EQ(one.substr(one.find('\n') + 1), fmt(cfg.grid.c_min) + "," + fmt(cfg.grid.lambda_min) + ",1\n");

  HyperGrid g({1.0, 2.0}, {0.5});
  g.normalize();
  EXPECT_EQ(density_csv(g), "c,lambda,density\n1,0.5,0.5\n2,0.5,0.5\n");
}

TEST(Density, LowNoiseG1IsLocalized) {
  ExperimentConfig cfg;
  cfg.system = "G1";
  cfg.noise_var = 0.1;
  const HyperGrid g = emit_density_map(cfg, cfg.seed);
  const double frac = localization_fraction(g, 0.9);
  EXPECT_LT(frac, 0.3);
  EXPECT_GT(frac, 0.0);
}

TEST(Density, LocalizationOfUniformGrid) {
  HyperGrid g({1.0, 2.0, 3.0, 4.0}, {0.2, 0.4, 0.6, 0.8, 0.9});
  g.normalize();
  // 18 of 20 equal cells only fit in the full 4 x 5 box; 9 cells fit in 3 x 3.
  EXPECT_DOUBLE_EQ(localization_fraction(g, 0.88), 1.0);
  EXPECT_DOUBLE_EQ(localization_fraction(g, 0.44), 0.45);
}
