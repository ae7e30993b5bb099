#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "zsplit/harness.hpp"
#include "zsplit/oracle.hpp"

using namespace zsplit;

namespace {

ModelSpec blind(ModelSpec m) {
  m.sensor = Coefficient::constant(0.0);
  m.obs_b = 0.0;
  return with_constant_intensity(m, 1.0);
}

LinearModel linear(double a, double sigma, double c, double x0_var) {
  LinearModel lm;
  lm.a = a;
  lm.sigma = sigma;
  lm.c = c;
  lm.D = 1.0;
  lm.x0_mean = 0.0;
  lm.x0_var = x0_var;
  return lm;
}

PathBundle quiet_path(double horizon, int n) {
  return PathBundle::from_increments(horizon / n, std::vector<double>(n + 1, 0.0), std::vector<double>(n, 0.0),
                                     std::vector<int>(n, 0));
}

}  // namespace

TEST(LogWeight, JumpFactorForConstantIntensity) {
  ModelSpec m = with_constant_intensity(presets::linear(), 3.0);
  m.sensor = Coefficient::constant(0.0);
  const auto d = derive_coefficients(m);
  const double kappa = 0.01;
  EXPECT_NEAR(log_weight_increment(m, d, 0.7, 0.3, 1, kappa), std::log(3.0) - 2 * kappa, 1e-15);
  EXPECT_NEAR(log_weight_increment(m, d, 0.7, 0.3, 0, kappa), -2 * kappa, 1e-15);
  EXPECT_NEAR(update_log_weight(m, d, 0.7, -1.0, 0.3, 2, kappa), -1.0 + 2 * std::log(3.0) - 2 * kappa, 1e-15);
}

TEST(LogWeight, ContinuousFactor) {
  const ModelSpec m = presets::linear();  // h = x, D = 1, lambda = 1
  const auto d = derive_coefficients(m);
  const double x = 1.5, dy = 0.2, kappa = 0.01;
  EXPECT_NEAR(log_weight_increment(m, d, x, dy, 0, kappa), x * dy - 0.5 * x * x * kappa, 1e-15);
  EXPECT_NEAR(log_weight_increment(m, d, x, dy, 1, kappa), x * dy - 0.5 * x * x * kappa, 1e-15);
}

TEST(LogWeight, UninformativeModelHasUnitWeight) {
  const ModelSpec m = blind(presets::example1());
  const auto d = derive_coefficients(m);
  for (int dz : {0, 1, 3}) EXPECT_EQ(log_weight_increment(m, d, 2.5, 0.4, dz, 0.01), 0.0);
}

TEST(Propagate, UncorrelatedModelIgnoresObservation) {
  const ModelSpec m = presets::linear();
  const auto d = derive_coefficients(m);
  const double x = 2.0, kappa = 0.01, dyt = 0.05;
  EXPECT_DOUBLE_EQ(propagate_tilde(m, d, x, 0.3, dyt, kappa), x + 0.5 * x * kappa + 2.0 * dyt);
  EXPECT_DOUBLE_EQ(propagate_tilde(m, d, x, -4.0, dyt, kappa), propagate_tilde(m, d, x, 0.3, dyt, kappa));
}

TEST(Propagate, FrozenParticle) {
  ModelSpec m = presets::linear();
  m.drift = Coefficient::constant(0.0);
  m.diffusion = m.diffusion_dx = m.diffusion_dxx = Coefficient::constant(0.0);
  const auto d = derive_coefficients(m);
  EXPECT_EQ(propagate_tilde(m, d, 1.25, 0.7, -0.3, 0.1), 1.25);
}

// X' = x + (g - B1 h) kappa + B1 dY + B2 dY~ with B1 = sigma b / D = 0.8.
TEST(Propagate, CorrelatedMeanIncrement) {
  const ModelSpec m = presets::example1();
  const auto d = derive_coefficients(m);
  const double x = 1.0, dy = 0.1, kappa = 0.01;
  const double b1 = 2.0 * 0.5 / 1.25, b2 = 2.0 * std::sqrt(1 - 0.25 / 1.25);
  EXPECT_NEAR(propagate_tilde(m, d, x, dy, 0.0, kappa), x + (0.5 * x - b1 * x) * kappa + b1 * dy, 1e-15);
  EXPECT_NEAR(propagate_tilde(m, d, x, dy, 0.02, kappa) - propagate_tilde(m, d, x, dy, 0.0, kappa), b2 * 0.02, 1e-15);
}

TEST(Propagate, MonteCarloMeanIncrement) {
  ModelSpec m = presets::linear();
  m.obs_b = 0.5;
  const auto d = derive_coefficients(m);
  const double x = 1.5, dy = 0.05, kappa = 0.01;
  RandomStream rng(PathSeed{6, 0}, Stream::particles);
  const int n = 10000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double inc = propagate_tilde(m, d, x, dy, std::sqrt(kappa) * rng.normal(), kappa) - x;
    s += inc;
    s2 += inc * inc;
  }
  const double mean = s / n;
  const double se = std::sqrt((s2 / n - mean * mean) / n);
  const double b1 = 2.0 * 0.5 / 1.25;
  EXPECT_NEAR(mean, (0.5 * x - b1 * x) * kappa + b1 * dy, 3 * se);
}

TEST(WeightedMoments, ShiftInvariantAndExchangeable) {
  ParticleCloud cloud;
  cloud.states = {0.1, -2.0, 3.5, 0.7, 1.1};
  cloud.log_weights = {-1.0, 0.5, -3.0, 0.0, -0.2};
  const auto a = weighted_moments(cloud);
  for (auto& lw : cloud.log_weights) lw -= 700.0;
  const auto b = weighted_moments(cloud);
  EXPECT_NEAR(a.mean, b.mean, 1e-12);
  EXPECT_NEAR(a.std, b.std, 1e-12);
  EXPECT_NEAR(a.ess, b.ess, 1e-12);
  std::reverse(cloud.states.begin(), cloud.states.end());
  std::reverse(cloud.log_weights.begin(), cloud.log_weights.end());
  const auto c = weighted_moments(cloud);
  EXPECT_NEAR(a.mean, c.mean, 1e-12);
  EXPECT_NEAR(a.std, c.std, 1e-12);

  std::vector<double> w;
  for (double lw : {-1.0, 0.5, -3.0, 0.0, -0.2}) w.push_back(std::exp(lw));
  const double sw = std::accumulate(w.begin(), w.end(), 0.0);
  double mean = 0.0, w2 = 0.0;
  const std::vector<double> xs{0.1, -2.0, 3.5, 0.7, 1.1};
  for (int i = 0; i < 5; ++i) {
    mean += w[i] / sw * xs[i];
    w2 += (w[i] / sw) * (w[i] / sw);
  }
  EXPECT_NEAR(a.mean, mean, 1e-14);
  EXPECT_NEAR(a.ess, 1.0 / w2, 1e-12);
}

TEST(WeightedMoments, EqualWeightsGiveSampleMoments) {
  ParticleCloud cloud;
  cloud.states = {1.0, 2.0, 3.0, 4.0};
  cloud.log_weights.assign(4, 0.0);
  const auto m = weighted_moments(cloud);
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_DOUBLE_EQ(m.std, std::sqrt(1.25));
  EXPECT_DOUBLE_EQ(m.ess, 4.0);
  EXPECT_DOUBLE_EQ(m.std_error, std::sqrt(1.25 / 4));
}

TEST(ParticleFilter, RejectsTinyClouds) {
  ParticleOptions opt;
  opt.n_particles = 99;
  const auto path = simulate_path(presets::linear(), 16, PathSeed{1, 0});
  EXPECT_THROW(particle_filter(presets::linear(), path, opt, PathSeed{1, 0}), OracleError);
}

TEST(ParticleFilter, UninformativeModelIgnoresObservations) {
  const ModelSpec m = blind(presets::linear());
  ParticleOptions opt;
  opt.n_particles = 500;
  const auto p1 = simulate_path(m, 64, PathSeed{1, 0});
  const auto p2 = simulate_path(m, 64, PathSeed{2, 0});
  const auto a = particle_filter(m, p1, opt, PathSeed{9, 0});
  const auto b = particle_filter(m, p2, opt, PathSeed{9, 0});
  EXPECT_EQ(a.means, b.means);
  EXPECT_NEAR(a.ess.back(), 500.0, 1e-9);
}

TEST(ParticleFilter, ReplayIsBitIdentical) {
  const ModelSpec m = presets::example1();
  ParticleOptions opt;
  opt.n_particles = 1000;
  const auto path = simulate_path(m, 256, PathSeed{5, 5});
  const auto a = particle_filter(m, path, opt, PathSeed{5, 5});
  const auto b = particle_filter(m, path, opt, PathSeed{5, 5});
  EXPECT_EQ(a.means, b.means);
  EXPECT_EQ(a.resample_events, b.resample_events);
}

TEST(ParticleFilter, AgreesWithKalmanBucy) {
  const ModelSpec m = presets::linear();
  ParticleOptions opt;
  opt.n_particles = 20000;
  const auto path = simulate_path(m, 256, PathSeed{17, 3});
  const auto pf = particle_filter(m, path, opt, PathSeed{17, 3});
  const auto kb = kalman_bucy(m, path);
  for (int r = 0; r <= 256; r += 32) {
    EXPECT_NEAR(pf.means[r], kb.means[r], 4 * pf.std_errors[r] + 0.03) << r;
    EXPECT_NEAR(pf.stds[r] * pf.stds[r], kb.vars[r], 0.1 * kb.vars[r] + 0.02) << r;
  }
}

TEST(ParticleFilter, KalmanBucyWithinThreeStandardErrors) {
  const ModelSpec m = presets::linear();
  ParticleOptions opt;
  opt.n_particles = 10000;
  const auto path = simulate_path(m, 128, PathSeed{29, 1});
  const auto pf = particle_filter(m, path, opt, PathSeed{29, 1});
  const auto kb = kalman_bucy(m, path);
  double se2 = 0.0, err2 = 0.0;
  for (std::size_t r = 0; r < kb.means.size(); ++r) {
    err2 += (pf.means[r] - kb.means[r]) * (pf.means[r] - kb.means[r]);
    se2 += pf.std_errors[r] * pf.std_errors[r];
  }
  EXPECT_LT(std::sqrt(err2), 3 * std::sqrt(se2));
}

TEST(ParticleFilter, OneStepAgreesWithSpectralFilter) {
  ModelSpec m = presets::linear();
  m.horizon = 0.01;
  m.x0_mean = 0.5;
  m.x0_var = 1.0;
  const auto path = simulate_path(m, 1, PathSeed{23, 0});
  ParticleOptions opt;
  opt.n_particles = 200000;
  const auto pf = particle_filter(m, path, opt, PathSeed{23, 0});
  const auto setup = prepare_spectral(m, 48);
  const SplittingScheme sch(setup.space, path.kappa, setup.mu.value);
  const auto sp = run_filter(setup, sch, path);
  EXPECT_NEAR(sp.means[1], pf.means[1], 4 * pf.std_errors[1] + 0.02);
  EXPECT_NEAR(sp.stds[1], pf.stds[1], 0.05 * pf.stds[1]);
}

TEST(KalmanBucy, UnobservedVarianceGrowsLinearly) {
  const auto kb = kalman_bucy(linear(0.0, 2.0, 0.0, 1.0), quiet_path(1.0, 100));
  for (int r = 0; r <= 100; r += 10) EXPECT_NEAR(kb.vars[r], 1.0 + 4.0 * r * 0.01, 1e-12);
}

TEST(KalmanBucy, PureObservationVarianceDecay) {
  const double P0 = 2.0, c = 1.5;
  const auto kb = kalman_bucy(linear(0.0, 0.0, c, P0), quiet_path(1.0, 200));
  for (int r = 0; r <= 200; r += 20) {
    const double t = r * 0.005;
    EXPECT_NEAR(kb.vars[r], P0 / (1.0 + P0 * c * c * t), 1e-8) << t;
  }
}

// 2 a P + sigma^2 - P^2 c^2 / D = 0 with a = 0.5, sigma = 2, c = D = 1.
TEST(KalmanBucy, SteadyStateVariance) {
  const auto kb = kalman_bucy(linear(0.5, 2.0, 1.0, 1.0), quiet_path(20.0, 4000));
  EXPECT_NEAR(kb.vars.back(), (1.0 + std::sqrt(17.0)) / 2.0, 1e-9);
  EXPECT_NEAR(kb.vars.back(), 2.56, 0.005);
}

TEST(KalmanBucy, RequiresLinearModel) {
  const auto path = simulate_path(presets::example1(), 8, PathSeed{1, 0});
  EXPECT_THROW(kalman_bucy(presets::example1(), path), OracleError);
}

TEST(PriorMoments, MatchesLinearSignalMean) {
  const ModelSpec m = presets::linear();
  const auto pm = prior_moments(m, 64, 20000, 4);
  for (int r = 0; r <= 64; r += 16) {
    const double t = r * pm.kappa;
    EXPECT_NEAR(pm.means[r], 5.0 * std::exp(t / 2), 4 * pm.std_errors[r]) << t;
    EXPECT_NEAR(pm.stds[r] * pm.stds[r], std::exp(t) + 4 * (std::exp(t) - 1), 0.05 * pm.stds[r] * pm.stds[r]) << t;
  }
  EXPECT_THROW(prior_moments(m, 8, 1, 4), OracleError);
}
