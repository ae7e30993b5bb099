#pragma once

// Sampled realizations of the signal X, the observation increments dY and
// the Cox jump counts dZ on a uniform grid t_r = r * kappa.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "zsplit/model.hpp"
#include "zsplit/rng.hpp"

namespace zsplit {

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PathBundle {
  double kappa = 0.0;
  int n_steps = 0;
  std::vector<double> x;         // N + 1 signal values
  std::vector<double> y;         // N + 1 cumulative observation values, y[0] = 0
  std::vector<double> dy;        // N observation increments y[r+1] - y[r]
  std::vector<int> dz;           // N jump counts over (t_r, t_{r+1}]
  std::vector<int> jump_times;   // grid index r of each jump time tau = t_r, with multiplicity
  PathSeed seed_record;

  double horizon() const { return kappa * n_steps; }
  int total_jumps() const {
    int s = 0;
    for (int k : dz) s += k;
    return s;
  }

  friend bool operator==(const PathBundle&, const PathBundle&) = default;

  /// Builds a bundle from raw increments; jump_times are recovered from dz.
  static PathBundle from_increments(double kappa, std::vector<double> x, const std::vector<double>& dy,
                                    std::vector<int> dz) {
    if (x.size() != dy.size() + 1 || dz.size() != dy.size())
      throw std::invalid_argument("PathBundle::from_increments: inconsistent lengths");
    PathBundle p;
    p.kappa = kappa;
    p.n_steps = static_cast<int>(dy.size());
    p.x = std::move(x);
    p.y.assign(dy.size() + 1, 0.0);
    p.dy.resize(dy.size());
    for (std::size_t r = 0; r < dy.size(); ++r) {
      p.y[r + 1] = p.y[r] + dy[r];
      p.dy[r] = p.y[r + 1] - p.y[r];
    }
    p.dz = std::move(dz);
    for (std::size_t r = 0; r < p.dz.size(); ++r)
      for (int k = 0; k < p.dz[r]; ++k) p.jump_times.push_back(static_cast<int>(r + 1));
    return p;
  }
};

namespace detail {

[[noreturn]] inline void non_finite(const char* what, int step, double x) {
  std::ostringstream os;
  os << "non-finite " << what << " at step " << step << " (x = " << x << ")";
  throw SimulationError(os.str());
}

}  // namespace detail

/// Euler-Maruyama signal and observation increments. The same dw drives both
/// X and Y; dv comes from a separate substream.
inline PathBundle simulate_signal_observation(const ModelSpec& m, int n_steps, PathSeed seed) {
  if (n_steps < 1) throw std::invalid_argument("simulate_signal_observation: n_steps must be >= 1");
  PathBundle p;
  p.n_steps = n_steps;
  p.kappa = m.horizon / n_steps;
  p.seed_record = seed;
  p.x.resize(static_cast<std::size_t>(n_steps) + 1);
  p.y.assign(static_cast<std::size_t>(n_steps) + 1, 0.0);
  p.dy.resize(static_cast<std::size_t>(n_steps));

  RandomStream init(seed, Stream::initial);
  RandomStream sig(seed, Stream::signal);
  RandomStream obs(seed, Stream::observation);
  const double sqk = std::sqrt(p.kappa);

  double x = m.x0_var > 0 ? init.normal(m.x0_mean, std::sqrt(m.x0_var)) : m.x0_mean;
  p.x[0] = x;
  for (int r = 0; r < n_steps; ++r) {
    const double dw = sqk * sig.normal();
    const double dv = sqk * obs.normal();
    const double g = m.drift(x), s = m.diffusion(x), h = m.sensor(x);
    if (!std::isfinite(g) || !std::isfinite(s) || !std::isfinite(h)) detail::non_finite("coefficient", r, x);
    const auto ri = static_cast<std::size_t>(r);
    p.y[ri + 1] = p.y[ri] + (h * p.kappa + m.obs_b * dw + m.obs_btilde * dv);
    p.dy[ri] = p.y[ri + 1] - p.y[ri];
    x = x + g * p.kappa + s * dw;
    if (!std::isfinite(x)) detail::non_finite("signal", r + 1, x);
    p.x[ri + 1] = x;
  }
  p.dz.assign(static_cast<std::size_t>(n_steps), 0);
  return p;
}

/// Jump counts from the intensity accumulator
///   T_i(t_r) = kappa * sum_{j=i}^{r-1} lambda(X_{t_j}),
/// the next jump being the first r with T_i(t_r) >= E, E ~ Exp(1), after which
/// the accumulator restarts at i = r with a fresh E.
///
/// `exp_source` is anything with a `double exponential()` member.
template <class ExpSource>
void simulate_jump_times(const ModelSpec& m, std::span<const double> x, double kappa, ExpSource& exp_source,
                         std::vector<int>& dz, std::vector<int>& jump_times) {
  if (x.size() < 2) throw std::invalid_argument("simulate_jump_times: need at least one step");
  const std::size_t n = x.size() - 1;
  dz.assign(n, 0);
  jump_times.clear();
  double threshold = exp_source.exponential();
  double accumulated = 0.0;
  for (std::size_t r = 1; r <= n; ++r) {
    const double lam = m.intensity(x[r - 1]);
    if (!std::isfinite(lam)) detail::non_finite("intensity", static_cast<int>(r - 1), x[r - 1]);
    accumulated += kappa * lam;
    if (accumulated >= threshold) {
      dz[r - 1] += 1;
      jump_times.push_back(static_cast<int>(r));
      accumulated = 0.0;
      threshold = exp_source.exponential();
    }
  }
}

inline void simulate_jump_times(const ModelSpec& m, PathBundle& p) {
  RandomStream ex(p.seed_record, Stream::exponential);
  simulate_jump_times(m, std::span<const double>(p.x), p.kappa, ex, p.dz, p.jump_times);
}

/// Complete path: signal, observation and jumps.
inline PathBundle simulate_path(const ModelSpec& m, int n_steps, PathSeed seed) {
  PathBundle p = simulate_signal_observation(m, n_steps, seed);
  simulate_jump_times(m, p);
  return p;
}

/// Coarse grid view of a fine path: x and the cumulative observation are
/// subsampled, jump counts summed over blocks of `factor` fine steps. Taking
/// increments from the subsampled cumulative y makes nested coarsening exact.
inline PathBundle coarsen_path(const PathBundle& fine, int factor) {
  if (factor < 1 || fine.n_steps % factor != 0)
    throw std::invalid_argument("coarsen_path: factor " + std::to_string(factor) + " does not divide " +
                                std::to_string(fine.n_steps));
  if (factor == 1) return fine;
  PathBundle c;
  c.n_steps = fine.n_steps / factor;
  c.kappa = fine.kappa * factor;
  c.seed_record = fine.seed_record;
  const auto nc = static_cast<std::size_t>(c.n_steps);
  const auto f = static_cast<std::size_t>(factor);
  c.x.resize(nc + 1);
  c.y.resize(nc + 1);
  c.dy.resize(nc);
  c.dz.assign(nc, 0);
  for (std::size_t r = 0; r <= nc; ++r) {
    c.x[r] = fine.x[r * f];
    c.y[r] = fine.y[r * f];
  }
  for (std::size_t r = 0; r < nc; ++r) {
    c.dy[r] = c.y[r + 1] - c.y[r];
    int k = 0;
    for (std::size_t j = 0; j < f; ++j) k += fine.dz[r * f + j];
    c.dz[r] = k;
  }
  c.jump_times.reserve(fine.jump_times.size());
  for (int t : fine.jump_times) c.jump_times.push_back((t + factor - 1) / factor);
  return c;
}

/// CSV dump: r, t_r, x, dy, dz. Row r carries the increments over
/// (t_{r-1}, t_r]; row 0 has zero increments.
inline void write_path_csv(const PathBundle& p, std::ostream& os) {
  os << "r,t_r,x,dy,dz\n";
  for (int r = 0; r <= p.n_steps; ++r) {
    const auto ri = static_cast<std::size_t>(r);
    const double dy = r == 0 ? 0.0 : p.dy[ri - 1];
    const int dz = r == 0 ? 0 : p.dz[ri - 1];
    os << r << ',' << detail::format_number(r * p.kappa) << ',' << detail::format_number(p.x[ri]) << ','
       << detail::format_number(dy) << ',' << dz << '\n';
  }
}

inline void write_path_csv(const PathBundle& p, const std::filesystem::path& file) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + file.string() + " for writing");
  write_path_csv(p, os);
  if (!os) throw std::runtime_error("write failed: " + file.string());
}

}  // namespace zsplit
