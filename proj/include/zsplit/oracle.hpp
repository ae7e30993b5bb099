#pragma once

// Reference filters that share nothing with the spectral solver except the
// sampled path:
//  - a self-normalized importance (Kallianpur-Striebel) particle estimator
//    under the reference measure, with log-domain measure-change weights;
//  - the Kalman-Bucy filter for the linear uncorrelated case;
//  - plain Monte-Carlo prior moments of the signal.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "zsplit/model.hpp"
#include "zsplit/rng.hpp"
#include "zsplit/simulate.hpp"

namespace zsplit {

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One Euler step of the signal written against the observation:
///   dX = (g - B1 h) dt + B1 dY + B2 dY~,
/// `dytilde` being an independent N(0, kappa) increment.
inline double propagate_tilde(const ModelSpec& m, const DerivedCoefficients& d, double x, double dy,
                              double dytilde, double kappa) {
  const double h = m.sensor(x);
  const double b1 = d.B1(x);
  const double next = x + (m.drift(x) - b1 * h) * kappa + b1 * dy + d.B2(x) * dytilde;
  if (!std::isfinite(next)) throw OracleError("propagate_tilde: non-finite particle state from x = " + std::to_string(x));
  return next;
}

/// Log of the per-step measure-change factor
///   h D^-1 dY - 1/2 h^2 D^-1 kappa - (lambda - 1) kappa + dZ log lambda.
inline double log_weight_increment(const ModelSpec& m, const DerivedCoefficients& d, double x, double dy, int dz,
                                   double kappa) {
  const double h = m.sensor(x);
  const double lam = m.intensity(x);
  if (!(lam > 0)) throw OracleError("log_weight_increment: intensity must be positive, got " + std::to_string(lam));
  double inc = h * d.D_inv * dy - 0.5 * h * h * d.D_inv * kappa - (lam - 1.0) * kappa;
  if (dz > 0) inc += dz * std::log(lam);
  return inc;
}

inline double update_log_weight(const ModelSpec& m, const DerivedCoefficients& d, double x, double log_w, double dy,
                                int dz, double kappa) {
  return log_w + log_weight_increment(m, d, x, dy, dz, kappa);
}

struct ParticleCloud {
  std::vector<double> states;
  std::vector<double> log_weights;
  PathSeed seed_record;

  std::size_t size() const { return states.size(); }
};

struct WeightedMoments {
  double mean = 0.0;
  double std = 0.0;
  double std_error = 0.0;  // delta-method standard error of the mean
  double ess = 0.0;
};

/// Self-normalized estimates; invariant under adding a constant to all log-weights.
inline WeightedMoments weighted_moments(const ParticleCloud& cloud) {
  const auto& lw = cloud.log_weights;
  if (lw.empty()) throw OracleError("weighted_moments: empty cloud");
  const double mx = *std::max_element(lw.begin(), lw.end());
  if (!std::isfinite(mx)) throw OracleError("weighted_moments: non-finite log-weights");
  double sw = 0.0, sw2 = 0.0, swx = 0.0;
  std::vector<double> w(lw.size());
  for (std::size_t i = 0; i < lw.size(); ++i) {
    w[i] = std::exp(lw[i] - mx);
    sw += w[i];
  }
  if (!(sw > 0) || !std::isfinite(sw)) throw OracleError("weighted_moments: total weight underflow");
  for (std::size_t i = 0; i < lw.size(); ++i) {
    w[i] /= sw;
    sw2 += w[i] * w[i];
    swx += w[i] * cloud.states[i];
  }
  double var = 0.0, se2 = 0.0;
  for (std::size_t i = 0; i < lw.size(); ++i) {
    const double dx = cloud.states[i] - swx;
    var += w[i] * dx * dx;
    se2 += w[i] * w[i] * dx * dx;
  }
  return {swx, std::sqrt(var), std::sqrt(se2), 1.0 / sw2};
}

struct ParticleOptions {
  int n_particles = 10000;
  bool resample = true;
  double resample_threshold = 0.5;  // fraction of n_particles
  int resample_min_steps = 201;     // shorter runs never resample
};

struct ParticleTrajectory {
  double kappa = 0.0;
  std::vector<double> means;
  std::vector<double> stds;
  std::vector<double> std_errors;
  std::vector<double> ess;
  std::vector<int> resample_events;  // grid indices where resampling happened
};

namespace detail {

/// Multinomial resampling by inversion of sorted uniforms.
inline void resample_multinomial(ParticleCloud& cloud, RandomStream& rng) {
  const std::size_t n = cloud.size();
  const double mx = *std::max_element(cloud.log_weights.begin(), cloud.log_weights.end());
  std::vector<double> cdf(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += std::exp(cloud.log_weights[i] - mx);
    cdf[i] = acc;
  }
  // sorted uniforms via normalized exponential spacings
  std::vector<double> u(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s += rng.exponential();
    u[i] = s;
  }
  s += rng.exponential();
  std::vector<double> next(n);
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double target = u[i] / s * acc;
    while (j + 1 < n && cdf[j] < target) ++j;
    next[i] = cloud.states[j];
  }
  cloud.states = std::move(next);
  std::fill(cloud.log_weights.begin(), cloud.log_weights.end(), 0.0);
}

}  // namespace detail

/// Particle approximation of pi_t(x) and its spread at every grid point of
/// the path. Particles evolve under the reference-measure dynamics driven by
/// the observed dY and fresh independent noise; weights accumulate the
/// measure change including the jump factors.
inline ParticleTrajectory particle_filter(const ModelSpec& m, const PathBundle& path, const ParticleOptions& opt,
                                          PathSeed seed) {
  if (opt.n_particles < 100) throw OracleError("particle_filter: need at least 100 particles");
  const DerivedCoefficients d = derive_coefficients(m);
  RandomStream rng(seed, Stream::particles);
  const auto np = static_cast<std::size_t>(opt.n_particles);
  ParticleCloud cloud;
  cloud.seed_record = seed;
  cloud.states.resize(np);
  cloud.log_weights.assign(np, 0.0);
  const double sd0 = std::sqrt(std::max(0.0, m.x0_var));
  for (auto& x : cloud.states) x = m.x0_mean + sd0 * rng.normal();

  const auto n = static_cast<std::size_t>(path.n_steps) + 1;
  ParticleTrajectory tr;
  tr.kappa = path.kappa;
  tr.means.resize(n);
  tr.stds.resize(n);
  tr.std_errors.resize(n);
  tr.ess.resize(n);
  auto record = [&](std::size_t r) {
    const auto wm = weighted_moments(cloud);
    tr.means[r] = wm.mean;
    tr.stds[r] = wm.std;
    tr.std_errors[r] = wm.std_error;
    tr.ess[r] = wm.ess;
    return wm.ess;
  };
  record(0);
  const double sqk = std::sqrt(path.kappa);
  for (std::size_t r = 0; r + 1 < n; ++r) {
    const double dy = path.dy[r];
    const int dz = path.dz[r];
    for (std::size_t i = 0; i < np; ++i) {
      const double x = cloud.states[i];
      // continuous part at the left endpoint; a grid jump at t_{r+1} is
      // weighted by lambda(X_{t_{r+1}-}), the propagated state
      double lw = update_log_weight(m, d, x, cloud.log_weights[i], dy, 0, path.kappa);
      const double next = propagate_tilde(m, d, x, dy, sqk * rng.normal(), path.kappa);
      if (dz > 0) {
        const double lam = m.intensity(next);
        if (!(lam > 0)) throw OracleError("particle_filter: non-positive intensity at a jump");
        lw += dz * std::log(lam);
      }
      cloud.log_weights[i] = lw;
      cloud.states[i] = next;
    }
    // keep log-weights centred; estimates are shift invariant
    const double mx = *std::max_element(cloud.log_weights.begin(), cloud.log_weights.end());
    if (!std::isfinite(mx)) throw OracleError("particle_filter: weight underflow at step " + std::to_string(r + 1));
    for (auto& lw : cloud.log_weights) lw -= mx;
    const double ess = record(r + 1);
    if (opt.resample && path.n_steps >= opt.resample_min_steps && ess < opt.resample_threshold * static_cast<double>(np)) {
      detail::resample_multinomial(cloud, rng);
      tr.resample_events.push_back(static_cast<int>(r + 1));
    }
  }
  return tr;
}

struct KalmanTrajectory {
  double kappa = 0.0;
  std::vector<double> means;
  std::vector<double> vars;
};

/// Kalman-Bucy filter on the path grid:
///   dm = a m dt + (P c / D)(dY - c m dt)
///   dP/dt = 2 a P + sigma^2 - P^2 c^2 / D
/// The mean uses an Euler step; P, which is deterministic, uses RK4.
inline KalmanTrajectory kalman_bucy(const LinearModel& lm, const PathBundle& path) {
  const auto n = static_cast<std::size_t>(path.n_steps) + 1;
  KalmanTrajectory tr;
  tr.kappa = path.kappa;
  tr.means.resize(n);
  tr.vars.resize(n);
  double mean = lm.x0_mean, P = lm.x0_var;
  const double k = path.kappa;
  auto riccati = [&](double p) { return 2.0 * lm.a * p + lm.sigma * lm.sigma - p * p * lm.c * lm.c / lm.D; };
  tr.means[0] = mean;
  tr.vars[0] = P;
  for (std::size_t r = 0; r + 1 < n; ++r) {
    mean = mean + lm.a * mean * k + (P * lm.c / lm.D) * (path.dy[r] - lm.c * mean * k);
    const double k1 = riccati(P);
    const double k2 = riccati(P + 0.5 * k * k1);
    const double k3 = riccati(P + 0.5 * k * k2);
    const double k4 = riccati(P + k * k3);
    P = P + k / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    tr.means[r + 1] = mean;
    tr.vars[r + 1] = P;
  }
  return tr;
}

inline KalmanTrajectory kalman_bucy(const ModelSpec& m, const PathBundle& path) {
  auto lm = as_linear(m);
  if (!lm) throw OracleError("kalman_bucy: model '" + m.name + "' is not linear with b = 0 and lambda = 1");
  return kalman_bucy(*lm, path);
}

struct PriorMoments {
  double kappa = 0.0;
  std::vector<double> means;
  std::vector<double> stds;
  std::vector<double> std_errors;
};

/// Monte-Carlo mean and spread of the unconditioned signal on an n_steps grid.
inline PriorMoments prior_moments(const ModelSpec& m, int n_steps, int samples, std::uint64_t seed) {
  if (samples < 2) throw OracleError("prior_moments: need at least two samples");
  const auto n = static_cast<std::size_t>(n_steps) + 1;
  std::vector<double> s1(n, 0.0), s2(n, 0.0);
  const double kappa = m.horizon / n_steps;
  const double sqk = std::sqrt(kappa);
  const double sd0 = std::sqrt(std::max(0.0, m.x0_var));
  RandomStream rng(PathSeed{seed, 0}, Stream::prior);
  for (int j = 0; j < samples; ++j) {
    double x = m.x0_mean + sd0 * rng.normal();
    for (std::size_t r = 0; r < n; ++r) {
      s1[r] += x;
      s2[r] += x * x;
      if (r + 1 < n) x = x + m.drift(x) * kappa + m.diffusion(x) * sqk * rng.normal();
    }
  }
  PriorMoments pm;
  pm.kappa = kappa;
  pm.means.resize(n);
  pm.stds.resize(n);
  pm.std_errors.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double mean = s1[r] / samples;
    const double var = std::max(0.0, (s2[r] - samples * mean * mean) / (samples - 1));
    pm.means[r] = mean;
    pm.stds[r] = std::sqrt(var);
    pm.std_errors[r] = std::sqrt(var / samples);
  }
  return pm;
}

}  // namespace zsplit
