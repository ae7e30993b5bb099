#pragma once

// Experiment drivers: strong convergence in the stepsize, conditional-spread
// reduction from informative jumps, and cross-checks against the oracles.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "zsplit/model.hpp"
#include "zsplit/oracle.hpp"
#include "zsplit/simulate.hpp"
#include "zsplit/spectral.hpp"
#include "zsplit/zakai.hpp"

namespace zsplit {

/// Runs fn(i) for i in [0, count) on `workers` threads. Results must be
/// written to per-index slots; reductions happen afterwards in index order.
inline void parallel_for(int count, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  std::mutex error_mutex;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < count && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          failed = true;
        }
      }
    });
  pool.clear();
  if (error) std::rethrow_exception(error);
}

inline int default_workers() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

struct StudyConfig {
  ModelSpec model;
  int ref_steps = 1 << 14;         // finest grid (power of 2)
  std::vector<int> level_steps;    // coarse grids, each dividing ref_steps
  int paths = 50;
  int basis = 48;
  int quad_order = 0;              // 0: default 2n + 16
  std::optional<double> mu;        // explicit shift; wins over the policy
  MuPolicy mu_policy = MuPolicy::coercive;
  int particles = 0;
  std::uint64_t seed = 1;
  int workers = 1;
  FilterOptions filter;

  void validate() const {
    if (paths < 1) throw std::invalid_argument("study: paths must be >= 1");
    if (ref_steps < 1) throw std::invalid_argument("study: ref_steps must be >= 1");
    for (int n : level_steps)
      if (n < 1 || ref_steps % n != 0)
        throw std::invalid_argument("study: level " + std::to_string(n) + " does not divide reference " +
                                    std::to_string(ref_steps));
  }
};

/// Everything needed to run the spectral filter for one model.
struct SpectralSetup {
  DerivedCoefficients derived;
  SpectralSpace space;
  MuSelection mu;
  Projection p0;
};

inline SpectralSetup prepare_spectral(const ModelSpec& model, int basis, int quad_order = 0,
                                      std::optional<double> mu = {}, MuPolicy policy = MuPolicy::coercive) {
  SpectralSetup s;
  s.derived = derive_coefficients(model);
  s.space = assemble(model, s.derived, basis, quad_order);
  s.mu = select_mu(s.derived, s.space, mu, policy);
  s.p0 = project_gaussian(s.space, model.x0_mean, std::max(model.x0_var, 1e-300));
  return s;
}

inline FilterTrajectory run_filter(const SpectralSetup& setup, const SplittingScheme& scheme,
                                   const PathBundle& path, const FilterOptions& opt = {}) {
  return run_filter(scheme, path, make_state(setup.p0.coeffs, setup.space.moments), opt);
}

struct Provenance {
  std::string model;
  std::uint64_t seed = 0;
  int basis = 0;
  int quad_order = 0;
  double mu = 0.0;
  std::string mu_rule;
  std::string mu_warning;
  double projection_error = 0.0;  // relative L2 error of the projected initial density
  int ref_steps = 0;
  int paths = 0;
  double horizon = 0.0;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct LevelResult {
  int n_steps = 0;
  double kappa = 0.0;
  double d = 0.0;
  double d_stderr = 0.0;
  int valid_paths = 0;
  int degenerate_paths = 0;

  friend bool operator==(const LevelResult&, const LevelResult&) = default;
};

struct ConvergenceReport {
  std::vector<LevelResult> levels;  // sorted by kappa, largest first
  std::optional<double> slope;      // least squares on (log2 kappa, log2 d)
  std::optional<double> intercept;
  bool valid = true;                // false when > 10 % of paths were excluded at some level
  std::vector<std::string> warnings;
  double runtime_seconds = 0.0;
  Provenance provenance;

  friend bool operator==(const ConvergenceReport&, const ConvergenceReport&) = default;
};

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
};

inline std::optional<LineFit> least_squares(const std::vector<double>& xs, const std::vector<double>& ys) {
  const std::size_t n = xs.size();
  if (n < 2) return std::nullopt;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (!(sxx > 0)) return std::nullopt;
  const double slope = sxy / sxx;
  return LineFit{slope, my - slope * mx};
}

namespace detail {

inline Provenance provenance_of(const StudyConfig& cfg, const SpectralSetup& setup) {
  Provenance p;
  p.model = cfg.model.name;
  p.seed = cfg.seed;
  p.basis = setup.space.n;
  p.quad_order = setup.space.quad_order;
  p.mu = setup.mu.value;
  p.mu_rule = setup.mu.rule;
  p.mu_warning = setup.mu.warning.value_or("");
  p.projection_error = setup.p0.relative_error();
  p.ref_steps = cfg.ref_steps;
  p.paths = cfg.paths;
  p.horizon = cfg.model.horizon;
  return p;
}

}  // namespace detail

/// Strong error of the filter mean against the finest-grid filter on common
/// paths:
///   d(kappa_i) = ( 1/(N_i m) sum_j sum_{r=1}^{N_i} |Xhat^j(t_r) - Xhat^j_r|^2 )^{1/2}.
inline ConvergenceReport convergence_study(const StudyConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const SpectralSetup setup = prepare_spectral(cfg.model, cfg.basis, cfg.quad_order, cfg.mu, cfg.mu_policy);
  const double kappa_ref = cfg.model.horizon / cfg.ref_steps;
  const SplittingScheme ref_scheme(setup.space, kappa_ref, setup.mu.value);

  std::vector<int> levels = cfg.level_steps;
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  std::vector<SplittingScheme> schemes;
  schemes.reserve(levels.size());
  for (int n : levels) schemes.emplace_back(setup.space, cfg.model.horizon / n, setup.mu.value);

  const auto nl = levels.size();
  const auto np = static_cast<std::size_t>(cfg.paths);
  // per path, per level: mean squared difference, or NaN when excluded
  std::vector<std::vector<double>> mse(np, std::vector<double>(nl, 0.0));
  parallel_for(cfg.paths, cfg.workers, [&](int j) {
    const PathBundle fine = simulate_path(cfg.model, cfg.ref_steps, PathSeed{cfg.seed, static_cast<std::uint64_t>(j)});
    const FilterTrajectory ref = run_filter(setup, ref_scheme, fine, cfg.filter);
    for (std::size_t l = 0; l < nl; ++l) {
      const int factor = cfg.ref_steps / levels[l];
      const PathBundle coarse = coarsen_path(fine, factor);
      const FilterTrajectory tr = run_filter(setup, schemes[l], coarse, cfg.filter);
      if (ref.degenerate() || tr.degenerate()) {
        mse[static_cast<std::size_t>(j)][l] = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      double s = 0.0;
      for (int r = 1; r <= levels[l]; ++r) {
        const double diff = ref.means[static_cast<std::size_t>(r * factor)] - tr.means[static_cast<std::size_t>(r)];
        s += diff * diff;
      }
      mse[static_cast<std::size_t>(j)][l] = s / levels[l];
    }
  });

  ConvergenceReport rep;
  rep.provenance = detail::provenance_of(cfg, setup);
  if (setup.mu.warning) rep.warnings.push_back(*setup.mu.warning);
  if (!setup.p0.adequate())
    rep.warnings.push_back("initial density poorly resolved by the basis (relative L2 error " +
                           detail::format_number(setup.p0.relative_error()) + ")");
  if (cfg.paths == 1) rep.warnings.emplace_back("single path: d(kappa) estimates are noisy");
  std::vector<double> lx, ly;
  // report coarsest first
  for (std::size_t li = 0; li < nl; ++li) {
    LevelResult lr;
    lr.n_steps = levels[li];
    lr.kappa = cfg.model.horizon / levels[li];
    double s = 0.0, s2 = 0.0;
    for (std::size_t j = 0; j < np; ++j) {
      const double e = mse[j][li];
      if (std::isnan(e)) {
        ++lr.degenerate_paths;
        continue;
      }
      ++lr.valid_paths;
      s += e;
      s2 += e * e;
    }
    if (lr.valid_paths > 0) {
      const double mean = s / lr.valid_paths;
      lr.d = std::sqrt(mean);
      if (lr.valid_paths > 1 && lr.d > 0) {
        const double var = std::max(0.0, (s2 - lr.valid_paths * mean * mean) / (lr.valid_paths - 1));
        lr.d_stderr = std::sqrt(var / lr.valid_paths) / (2.0 * lr.d);
      }
    }
    if (lr.degenerate_paths * 10 > cfg.paths) {
      rep.valid = false;
      rep.warnings.push_back("level " + std::to_string(lr.n_steps) + ": " + std::to_string(lr.degenerate_paths) +
                             " of " + std::to_string(cfg.paths) + " paths degenerate");
    }
    if (lr.valid_paths > 0 && lr.d > 0) {
      lx.push_back(std::log2(lr.kappa));
      ly.push_back(std::log2(lr.d));
    }
    rep.levels.push_back(lr);
  }
  if (auto fit = least_squares(lx, ly)) {
    rep.slope = fit->slope;
    rep.intercept = fit->intercept;
  }
  rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

struct IntensityVariant {
  std::string label;
  Coefficient intensity;
  double lo = 1.0;
  double hi = 1.0;

  static IntensityVariant constant(double lambda, std::string label = {}) {
    return {label.empty() ? "lambda=" + detail::format_number(lambda) : std::move(label),
            Coefficient::constant(lambda), lambda, lambda};
  }
};

struct StdReductionRow {
  std::string label;
  double mean_time_avg_std = 0.0;       // over valid paths
  std::vector<double> per_path;         // time-averaged conditional std, NaN if degenerate
  int degenerate_paths = 0;
};

struct StdReductionTable {
  std::vector<StdReductionRow> rows;
  int steps = 0;
  Provenance provenance;
};

/// Filters every intensity variant on common signal and observation paths
/// (same substreams; jumps re-drawn from the same exponential stream) and
/// reports the time-averaged conditional standard deviation.
inline StdReductionTable std_reduction_study(const StudyConfig& cfg, const std::vector<IntensityVariant>& variants) {
  cfg.validate();
  for (const auto& v : variants)
    if (!(v.lo > 0)) throw std::invalid_argument("std_reduction_study: intensity bounds must be positive");
  std::vector<ModelSpec> models;
  std::vector<SpectralSetup> setups;
  std::vector<SplittingScheme> schemes;
  const double kappa = cfg.model.horizon / cfg.ref_steps;
  for (const auto& v : variants) {
    ModelSpec m = cfg.model;
    m.intensity = v.intensity;
    m.intensity_lo = v.lo;
    m.intensity_hi = v.hi;
    models.push_back(m);
    setups.push_back(prepare_spectral(m, cfg.basis, cfg.quad_order, cfg.mu, cfg.mu_policy));
    schemes.emplace_back(setups.back().space, kappa, setups.back().mu.value);
  }
  const auto nv = variants.size();
  const auto np = static_cast<std::size_t>(cfg.paths);
  std::vector<std::vector<double>> avg(nv, std::vector<double>(np, 0.0));
  parallel_for(cfg.paths, cfg.workers, [&](int j) {
    const PathSeed seed{cfg.seed, static_cast<std::uint64_t>(j)};
    const PathBundle base = simulate_signal_observation(cfg.model, cfg.ref_steps, seed);
    for (std::size_t v = 0; v < nv; ++v) {
      PathBundle p = base;
      simulate_jump_times(models[v], p);
      const auto tr = run_filter(setups[v], schemes[v], p, cfg.filter);
      double s = 0.0;
      for (double sd : tr.stds) s += sd;
      avg[v][static_cast<std::size_t>(j)] =
          tr.degenerate() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(tr.stds.size());
    }
  });
  StdReductionTable table;
  table.steps = cfg.ref_steps;
  if (!setups.empty()) table.provenance = detail::provenance_of(cfg, setups.front());
  for (std::size_t v = 0; v < nv; ++v) {
    StdReductionRow row;
    row.label = variants[v].label;
    row.per_path = avg[v];
    double s = 0.0;
    int valid = 0;
    for (double a : avg[v]) {
      if (std::isnan(a)) {
        ++row.degenerate_paths;
        continue;
      }
      s += a;
      ++valid;
    }
    row.mean_time_avg_std = valid > 0 ? s / valid : std::numeric_limits<double>::quiet_NaN();
    table.rows.push_back(std::move(row));
  }
  return table;
}

struct OracleRow {
  int path = 0;
  bool spectral_degenerate = false;
  std::optional<double> rmse_spectral_particle;
  std::optional<double> particle_se;              // time-RMS of the particle standard error
  std::optional<bool> within_particle;            // rmse < 3 * particle_se
  std::optional<double> rmse_spectral_kalman;
  std::optional<double> rmse_particle_kalman;
  std::optional<double> max_rel_var_err_kalman;   // spectral vs Kalman variance, t > 0.05
  std::optional<double> rmse_spectral_prior;
  std::optional<double> prior_se;
};

struct OracleTable {
  std::vector<OracleRow> rows;
  int steps = 0;
  Provenance provenance;
};

struct OracleOptions {
  ParticleOptions particle;  // n_particles = 0 disables the particle oracle
  int prior_samples = 0;     // > 0 compares against Monte-Carlo prior moments
  double variance_after = 0.05;
};

namespace detail {

inline double time_rmse(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r) s += (a[r] - b[r]) * (a[r] - b[r]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

inline double time_rms(const std::vector<double>& a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s / static_cast<double>(a.size()));
}

}  // namespace detail

/// Spectral filter against the particle oracle, the Kalman-Bucy filter (when
/// the model is linear) and prior Monte-Carlo moments, on shared paths.
inline OracleTable oracle_comparison(const StudyConfig& cfg, const OracleOptions& opt) {
  cfg.validate();
  const SpectralSetup setup = prepare_spectral(cfg.model, cfg.basis, cfg.quad_order, cfg.mu, cfg.mu_policy);
  const double kappa = cfg.model.horizon / cfg.ref_steps;
  const SplittingScheme scheme(setup.space, kappa, setup.mu.value);
  const auto linear = as_linear(cfg.model);
  std::optional<PriorMoments> prior;
  if (opt.prior_samples > 0) prior = prior_moments(cfg.model, cfg.ref_steps, opt.prior_samples, cfg.seed);

  OracleTable table;
  table.steps = cfg.ref_steps;
  table.provenance = detail::provenance_of(cfg, setup);
  table.rows.resize(static_cast<std::size_t>(cfg.paths));
  parallel_for(cfg.paths, cfg.workers, [&](int j) {
    const PathSeed seed{cfg.seed, static_cast<std::uint64_t>(j)};
    const PathBundle path = simulate_path(cfg.model, cfg.ref_steps, seed);
    const auto tr = run_filter(setup, scheme, path, cfg.filter);
    OracleRow row;
    row.path = j;
    row.spectral_degenerate = tr.degenerate();
    std::optional<ParticleTrajectory> pf;
    if (opt.particle.n_particles > 0) {
      pf = particle_filter(cfg.model, path, opt.particle, seed);
      row.rmse_spectral_particle = detail::time_rmse(tr.means, pf->means);
      row.particle_se = detail::time_rms(pf->std_errors);
      row.within_particle = *row.rmse_spectral_particle < 3.0 * *row.particle_se;
    }
    if (linear) {
      const auto kb = kalman_bucy(*linear, path);
      row.rmse_spectral_kalman = detail::time_rmse(tr.means, kb.means);
      if (pf) row.rmse_particle_kalman = detail::time_rmse(pf->means, kb.means);
      double worst = 0.0;
      for (std::size_t r = 0; r < kb.vars.size(); ++r) {
        if (static_cast<double>(r) * kappa <= opt.variance_after) continue;
        worst = std::max(worst, std::abs(tr.stds[r] * tr.stds[r] - kb.vars[r]) / kb.vars[r]);
      }
      row.max_rel_var_err_kalman = worst;
    }
    if (prior) {
      row.rmse_spectral_prior = detail::time_rmse(tr.means, prior->means);
      row.prior_se = detail::time_rms(prior->std_errors);
    }
    table.rows[static_cast<std::size_t>(j)] = row;
  });
  return table;
}

// ---- serialization -------------------------------------------------------

inline nlohmann::json to_json(const Provenance& p) {
  return {{"model", p.model},           {"seed", p.seed},
          {"basis", p.basis},           {"quad_order", p.quad_order},
          {"mu", p.mu},                 {"mu_rule", p.mu_rule},
          {"mu_warning", p.mu_warning}, {"projection_error", p.projection_error},
          {"ref_steps", p.ref_steps},   {"paths", p.paths},
          {"horizon", p.horizon}};
}

inline Provenance provenance_from_json(const nlohmann::json& j) {
  Provenance p;
  p.model = j.at("model").get<std::string>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.basis = j.at("basis").get<int>();
  p.quad_order = j.at("quad_order").get<int>();
  p.mu = j.at("mu").get<double>();
  p.mu_rule = j.at("mu_rule").get<std::string>();
  p.mu_warning = j.at("mu_warning").get<std::string>();
  p.projection_error = j.at("projection_error").get<double>();
  p.ref_steps = j.at("ref_steps").get<int>();
  p.paths = j.at("paths").get<int>();
  p.horizon = j.at("horizon").get<double>();
  return p;
}

namespace detail {

inline nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline std::optional<double> opt_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace detail

inline nlohmann::json to_json(const ConvergenceReport& r) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : r.levels)
    levels.push_back({{"n_steps", l.n_steps},
                      {"kappa", l.kappa},
                      {"d", l.d},
                      {"d_stderr", l.d_stderr},
                      {"valid_paths", l.valid_paths},
                      {"degenerate_paths", l.degenerate_paths}});
  return {{"levels", levels},
          {"slope", detail::opt_json(r.slope)},
          {"intercept", detail::opt_json(r.intercept)},
          {"valid", r.valid},
          {"warnings", r.warnings},
          {"runtime_seconds", r.runtime_seconds},
          {"provenance", to_json(r.provenance)}};
}

inline ConvergenceReport convergence_report_from_json(const nlohmann::json& j) {
  ConvergenceReport r;
  for (const auto& l : j.at("levels"))
    r.levels.push_back({l.at("n_steps").get<int>(), l.at("kappa").get<double>(), l.at("d").get<double>(),
                        l.at("d_stderr").get<double>(), l.at("valid_paths").get<int>(),
                        l.at("degenerate_paths").get<int>()});
  r.slope = detail::opt_from_json(j.at("slope"));
  r.intercept = detail::opt_from_json(j.at("intercept"));
  r.valid = j.at("valid").get<bool>();
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  r.runtime_seconds = j.at("runtime_seconds").get<double>();
  r.provenance = provenance_from_json(j.at("provenance"));
  return r;
}

/// Two-column (kappa, d) data for a log-log plot; one row per level.
inline void write_dkappa_csv(const ConvergenceReport& r, std::ostream& os) {
  os << "kappa,d\n";
  for (const auto& l : r.levels) os << detail::format_number(l.kappa) << ',' << detail::format_number(l.d) << '\n';
}

inline void write_std_table_csv(const StdReductionTable& t, std::ostream& os) {
  os << "label,mean_time_avg_std,degenerate_paths\n";
  for (const auto& row : t.rows)
    os << row.label << ',' << detail::format_number(row.mean_time_avg_std) << ',' << row.degenerate_paths << '\n';
}

inline void write_oracle_table_csv(const OracleTable& t, std::ostream& os) {
  auto f = [](const std::optional<double>& v) { return v ? detail::format_number(*v) : std::string(); };
  os << "path,spectral_degenerate,rmse_spectral_particle,particle_se,within_particle,rmse_spectral_kalman,"
        "rmse_particle_kalman,max_rel_var_err_kalman,rmse_spectral_prior,prior_se\n";
  for (const auto& r : t.rows)
    os << r.path << ',' << (r.spectral_degenerate ? 1 : 0) << ',' << f(r.rmse_spectral_particle) << ','
       << f(r.particle_se) << ',' << (r.within_particle ? (*r.within_particle ? "1" : "0") : "") << ','
       << f(r.rmse_spectral_kalman) << ',' << f(r.rmse_particle_kalman) << ',' << f(r.max_rel_var_err_kalman)
       << ',' << f(r.rmse_spectral_prior) << ',' << f(r.prior_se) << '\n';
}

enum class ReportFormat { csv, json, both };

/// Writes report.json and/or dkappa.csv into `dir`.
inline void emit_report(const ConvergenceReport& r, const std::filesystem::path& dir,
                        ReportFormat fmt = ReportFormat::both) {
  std::filesystem::create_directories(dir);
  if (fmt != ReportFormat::csv) {
    std::ofstream os(dir / "report.json", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + (dir / "report.json").string());
    os << to_json(r).dump(2) << '\n';
  }
  if (fmt != ReportFormat::json) {
    std::ofstream os(dir / "dkappa.csv", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + (dir / "dkappa.csv").string());
    write_dkappa_csv(r, os);
  }
}

}  // namespace zsplit
