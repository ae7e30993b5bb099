#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "zsplit/harness.hpp"

using namespace zsplit;

namespace {

StudyConfig small_study(int paths = 4) {
  StudyConfig cfg;
  cfg.model = with_constant_intensity(presets::example1(), 2.0);
  cfg.model.horizon = 0.25;
  cfg.ref_steps = 1024;
  cfg.level_steps = {128, 256, 512};
  cfg.paths = paths;
  cfg.basis = 24;
  cfg.seed = 20240501;
  return cfg;
}

ConvergenceReport without_runtime(ConvergenceReport r) {
  r.runtime_seconds = 0.0;
  return r;
}

}  // namespace

TEST(LeastSquares, RecoversExactLine) {
  const auto fit = least_squares({-8, -7, -6, -5}, {-4.5, -4.0, -3.5, -3.0});
  ASSERT_TRUE(fit);
  EXPECT_NEAR(fit->slope, 0.5, 1e-14);
  EXPECT_NEAR(fit->intercept, -0.5, 1e-14);
  EXPECT_FALSE(least_squares({1.0}, {2.0}));
  EXPECT_FALSE(least_squares({1.0, 1.0}, {2.0, 3.0}));
}

TEST(ParallelFor, VisitsEveryIndexAndRethrows) {
  std::vector<int> hit(37, 0);
  parallel_for(37, 3, [&](int i) { hit[i] += 1; });
  for (int h : hit) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 2, [](int i) {
                 if (i == 7) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}

TEST(StudyConfig, Validation) {
  StudyConfig cfg = small_study();
  cfg.paths = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = small_study();
  cfg.level_steps = {48};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_THROW(convergence_study(cfg), std::invalid_argument);
}

TEST(ConvergenceStudy, ReferenceLevelHasZeroError) {
  StudyConfig cfg = small_study(2);
  cfg.level_steps = {cfg.ref_steps};
  const auto r = convergence_study(cfg);
  ASSERT_EQ(r.levels.size(), 1u);
  EXPECT_EQ(r.levels[0].d, 0.0);
  EXPECT_FALSE(r.slope.has_value());
}

TEST(ConvergenceStudy, DeterministicAndWorkerIndependent) {
  StudyConfig cfg = small_study();
  const auto a = convergence_study(cfg);
  const auto b = convergence_study(cfg);
  cfg.workers = 3;
  const auto c = convergence_study(cfg);
  EXPECT_EQ(without_runtime(a), without_runtime(b));
  EXPECT_EQ(without_runtime(a), without_runtime(c));
}

TEST(ConvergenceStudy, LevelsAreCoarsestFirstAndErrorsShrink) {
  const auto r = convergence_study(small_study());
  ASSERT_EQ(r.levels.size(), 3u);
  EXPECT_EQ(r.levels[0].n_steps, 128);
  EXPECT_EQ(r.levels[2].n_steps, 512);
  EXPECT_GT(r.levels[0].d, r.levels[1].d);
  EXPECT_GT(r.levels[1].d, r.levels[2].d);
  ASSERT_TRUE(r.slope);
  EXPECT_GT(*r.slope, 0.0);
  EXPECT_TRUE(r.valid);
  EXPECT_EQ(r.provenance.mu_rule, "coercive");
  EXPECT_EQ(r.provenance.paths, 4);
}

// Studies over the first k paths of one seed recover each path's mean squared
// error as k d_k^2 - (k - 1) d_{k-1}^2; the reported standard error is the
// delta-method value sd(mse) / sqrt(m) / (2 d).
TEST(ConvergenceStudy, StandardErrorFromPerPathErrors) {
  const int m = 5;
  std::vector<double> mse;
  double prev = 0.0;
  ConvergenceReport full;
  for (int k = 1; k <= m; ++k) {
    full = convergence_study(small_study(k));
    const double d = full.levels[0].d;
    mse.push_back(k * d * d - prev);
    prev = k * d * d;
  }
  const double mean = std::accumulate(mse.begin(), mse.end(), 0.0) / m;
  double ss = 0.0;
  for (double e : mse) ss += (e - mean) * (e - mean);
  const double d = std::sqrt(mean);
  EXPECT_NEAR(full.levels[0].d, d, 1e-14);
  EXPECT_NEAR(full.levels[0].d_stderr, std::sqrt(ss / (m - 1) / m) / (2 * d), 1e-9 * d);
}

TEST(ConvergenceStudy, WarnsForSinglePathAndPoorPrior) {
  const auto r = convergence_study(small_study(1));
  bool single = false, prior = false;
  for (const auto& w : r.warnings) {
    single |= w.find("single path") != std::string::npos;
    prior |= w.find("poorly resolved") != std::string::npos;
  }
  EXPECT_TRUE(single);
  EXPECT_TRUE(prior);
  EXPECT_GT(r.provenance.projection_error, 0.05);
}

TEST(ConvergenceStudy, DegeneratePathsInvalidateReport) {
  StudyConfig cfg = small_study(3);
  cfg.filter.mass_floor = 2.0;  // trips on the initial density
  const auto r = convergence_study(cfg);
  EXPECT_FALSE(r.valid);
  for (const auto& l : r.levels) {
    EXPECT_EQ(l.degenerate_paths, 3);
    EXPECT_EQ(l.valid_paths, 0);
  }
  EXPECT_FALSE(r.slope.has_value());
}

TEST(ConvergenceReport, JsonRoundTrip) {
  const auto r = convergence_study(small_study(2));
  const auto back = convergence_report_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(back, r);
}

TEST(ConvergenceReport, CsvHasOneRowPerLevel) {
  std::ostringstream empty;
  write_dkappa_csv(ConvergenceReport{}, empty);
  EXPECT_EQ(empty.str(), "kappa,d\n");
  const auto r = convergence_study(small_study(2));
  std::ostringstream os;
  write_dkappa_csv(r, os);
  const std::string s = os.str();
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 4);
  EXPECT_EQ(s.rfind("kappa,d\n0.001953125,", 0), 0u);
}

TEST(ConvergenceReport, EmitWritesBothFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "zsplit_emit_test";
  std::filesystem::remove_all(dir);
  emit_report(convergence_study(small_study(1)), dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "dkappa.csv"));
  std::filesystem::remove_all(dir);
}

TEST(StdReduction, IdenticalVariantsReplayExactly) {
  StudyConfig cfg = small_study(3);
  const auto t = std_reduction_study(cfg, {IntensityVariant::constant(1.0), IntensityVariant::constant(1.0)});
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0].per_path, t.rows[1].per_path);
  EXPECT_EQ(t.rows[0].label, "lambda=1");
}

TEST(StdReduction, StrongerSensorNarrowsPosterior) {
  StudyConfig cfg;
  cfg.model = presets::linear();
  cfg.model.sensor = Coefficient([](double x) { return 0.2 * x; }, "0.2*x");
  cfg.ref_steps = 1024;
  cfg.paths = 4;
  cfg.basis = 48;
  const auto weak = std_reduction_study(cfg, {IntensityVariant::constant(1.0)});
  cfg.model.sensor = Coefficient([](double x) { return x; }, "x");
  const auto strong = std_reduction_study(cfg, {IntensityVariant::constant(1.0)});
  EXPECT_EQ(weak.rows[0].degenerate_paths, 0);
  EXPECT_EQ(strong.rows[0].degenerate_paths, 0);
  EXPECT_LT(strong.rows[0].mean_time_avg_std, weak.rows[0].mean_time_avg_std);
}

TEST(StdReduction, RejectsNonPositiveIntensity) {
  IntensityVariant v = IntensityVariant::constant(1.0);
  v.lo = 0.0;
  EXPECT_THROW(std_reduction_study(small_study(1), {v}), std::invalid_argument);
}

TEST(OracleComparison, LinearModelFillsEveryColumn) {
  StudyConfig cfg;
  cfg.model = presets::linear();
  cfg.ref_steps = 256;
  cfg.paths = 2;
  cfg.basis = 48;
  OracleOptions opt;
  opt.particle.n_particles = 2000;
  opt.prior_samples = 500;
  const auto coarse = oracle_comparison(cfg, opt);
  cfg.ref_steps = 1024;
  const auto t = oracle_comparison(cfg, opt);
  ASSERT_EQ(t.rows.size(), 2u);
  for (std::size_t j = 0; j < t.rows.size(); ++j) {
    const auto& r = t.rows[j];
    EXPECT_TRUE(r.rmse_spectral_particle && r.particle_se && r.within_particle);
    EXPECT_TRUE(r.rmse_spectral_kalman && r.rmse_particle_kalman && r.max_rel_var_err_kalman);
    EXPECT_TRUE(r.rmse_spectral_prior && r.prior_se);
    EXPECT_LT(*r.rmse_spectral_kalman, *coarse.rows[j].rmse_spectral_kalman);
  }
  std::ostringstream os;
  write_oracle_table_csv(t, os);
  const std::string csv = os.str();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(OracleComparison, NonlinearModelHasNoKalmanColumns) {
  StudyConfig cfg = small_study(1);
  cfg.ref_steps = 64;
  cfg.level_steps.clear();
  OracleOptions opt;
  opt.particle.n_particles = 0;
  const auto t = oracle_comparison(cfg, opt);
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_FALSE(t.rows[0].rmse_spectral_kalman);
  EXPECT_FALSE(t.rows[0].rmse_spectral_particle);
}
