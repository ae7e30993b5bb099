// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <Eigen/Eigenvalues>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "zsplit/harness.hpp"

using namespace zsplit;

namespace {

constexpr std::uint64_t kSeed = 20240501;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

StudyConfig desk_study(const ModelSpec& model) {
  StudyConfig cfg;
  cfg.model = model;
  cfg.model.horizon = 0.25;
  cfg.ref_steps = 1 << 14;
  cfg.level_steps = {1 << 8, 1 << 9, 1 << 10, 1 << 11};
  cfg.paths = 50;
  cfg.basis = 48;
  cfg.seed = kSeed;
  cfg.workers = default_workers();
  return cfg;
}

Outcome slope_criterion(const StudyConfig& cfg) {
  const auto r = convergence_study(cfg);
  std::ostringstream os;
  os << "slope " << (r.slope ? fmt(*r.slope) : "n/a") << ", valid " << (r.valid ? "yes" : "no") << ", d =";
  for (const auto& l : r.levels) os << ' ' << fmt(l.d) << " (" << l.degenerate_paths << " degenerate)";
  os << ", mu " << fmt(r.provenance.mu) << ' ' << r.provenance.mu_rule;
  const bool pass = r.valid && r.slope && *r.slope >= 0.3 && *r.slope <= 0.7;
  return {pass, os.str()};
}

Outcome criterion1() { return slope_criterion(desk_study(with_constant_intensity(presets::example1(), 2.0))); }

Outcome criterion2() { return slope_criterion(desk_study(presets::example2())); }

Outcome criterion3() {
  StudyConfig cfg;
  cfg.model = presets::linear();
  cfg.ref_steps = 1 << 12;
  cfg.paths = 20;
  cfg.basis = 48;
  cfg.seed = kSeed;
  cfg.workers = default_workers();
  OracleOptions opt;
  opt.particle.n_particles = 0;
  const auto t = oracle_comparison(cfg, opt);
  double rmse = 0.0, var_err = 0.0;
  for (const auto& r : t.rows) {
    rmse += *r.rmse_spectral_kalman / t.rows.size();
    var_err = std::max(var_err, *r.max_rel_var_err_kalman);
  }
  return {rmse < 0.05 && var_err < 0.10,
          "mean time-RMSE " + fmt(rmse) + " (< 0.05), max relative variance error " + fmt(var_err) + " (< 0.1)"};
}

Outcome criterion4() {
  StudyConfig cfg;
  cfg.model = presets::example1();
  cfg.ref_steps = 1 << 10;
  cfg.paths = 10;
  cfg.basis = 48;
  cfg.seed = kSeed;
  cfg.workers = default_workers();
  OracleOptions opt;
  opt.particle.n_particles = 20000;
  const auto t = oracle_comparison(cfg, opt);
  int within = 0;
  double worst = 0.0, se = 0.0;
  for (const auto& r : t.rows) {
    within += *r.within_particle;
    worst = std::max(worst, *r.rmse_spectral_particle);
    se = std::max(se, *r.particle_se);
  }
  return {within >= 9, std::to_string(within) + " of 10 paths within 3 SE (worst RMSE " + fmt(worst) +
                           ", largest SE " + fmt(se) + ")"};
}

Outcome criterion5() {
  StudyConfig cfg;
  cfg.model = presets::example1();
  cfg.ref_steps = 1 << 10;
  cfg.paths = 20;
  cfg.basis = 48;
  cfg.seed = kSeed;
  cfg.workers = default_workers();
  const auto& m = cfg.model;
  const auto t = std_reduction_study(
      cfg, {{"informative", m.intensity, m.intensity_lo, m.intensity_hi}, IntensityVariant::constant(1.0)});
  const double inf = t.rows[0].mean_time_avg_std, flat = t.rows[1].mean_time_avg_std;
  return {inf < flat && t.rows[0].degenerate_paths == 0 && t.rows[1].degenerate_paths == 0,
          "informative " + fmt(inf) + " vs lambda=1 " + fmt(flat)};
}

Outcome criterion6() {
  double ortho = 0.0, quad = 0.0, coerc = std::numeric_limits<double>::infinity(), implicit = 0.0;
  const std::vector<ModelSpec> models{with_constant_intensity(presets::example1(), 2.0), presets::linear(),
                                      presets::example1(), presets::example2()};
  for (int n : {16, 32, 48, 64}) {
    for (const auto& m : models) {
      const auto setup = prepare_spectral(m, n);
      const auto& s = setup.space;
      ortho = std::max(ortho, orthonormality_defect(s));
      const auto fine = assemble(m, setup.derived, n, std::min(2 * s.quad_order, kMaxQuadratureOrder));
      const double scale = std::max({s.ops.G.norm(), s.ops.Bm.norm(), s.ops.Cm.norm(), 1.0});
      quad = std::max({quad, (s.ops.G - fine.ops.G).norm() / scale, (s.ops.Bm - fine.ops.Bm).norm() / scale,
                       (s.ops.Cm - fine.ops.Cm).norm() / scale});
      const Eigen::MatrixXd K =
          -0.5 * (s.ops.G + s.ops.G.transpose()) + setup.derived.alpha * Eigen::MatrixXd::Identity(n, n);
      coerc = std::min(coerc, Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(K).eigenvalues().minCoeff());
      for (int steps : {1 << 8, 1 << 11, 1 << 14}) {
        const SplittingScheme sch(s, m.horizon / steps, setup.mu.value);
        implicit = std::max(implicit, sch.implicit_norm());
      }
    }
  }
  const bool pass = ortho < 1e-10 && quad < 1e-10 && coerc >= -1e-10 && implicit <= 1 + 1e-10;
  return {pass, "orthonormality " + fmt(ortho) + ", quadrature doubling " + fmt(quad) + ", min eig(-G + alpha I) " +
                    fmt(coerc) + ", implicit norm " + fmt(implicit)};
}

Outcome criterion7() {
  std::vector<std::string> failed;
  const ModelSpec m = presets::example1();
  const auto setup = prepare_spectral(m, 32);
  const auto fine = simulate_path(m, 1 << 10, PathSeed{kSeed, 0});
  const SplittingScheme sch(setup.space, fine.kappa, setup.mu.value);

  Eigen::VectorXd a = setup.p0.coeffs, b = 3.5 * setup.p0.coeffs;
  for (int r = 0; r < 64; ++r) {
    sch.split_step(a, fine.dy[r], fine.dz[r]);
    sch.split_step(b, fine.dy[r], fine.dz[r]);
  }
  if ((b - 3.5 * a).norm() > 1e-12 * b.norm()) failed.emplace_back("scale equivariance");

  const auto sa = conditional_stats(a, setup.space.moments), sb = conditional_stats(b, setup.space.moments);
  if (!sa || !sb || std::abs(sa->mean - sb->mean) > 1e-12 || std::abs(sa->std - sb->std) > 1e-12)
    failed.emplace_back("normalization invariance");

  const auto t1 = run_filter(setup, sch, fine), t2 = run_filter(setup, sch, fine);
  const auto again = simulate_path(m, 1 << 10, PathSeed{kSeed, 0});
  if (!(t1.means == t2.means && t1.stds == t2.stds && again == fine)) failed.emplace_back("replay");

  for (int f1 : {2, 4, 8})
    for (int f2 : {2, 4, 16}) {
      const auto two = coarsen_path(coarsen_path(fine, f1), f2), one = coarsen_path(fine, f1 * f2);
      if (!(two.dy == one.dy && two.dz == one.dz && two.x == one.x && two.jump_times == one.jump_times))
        failed.emplace_back("nesting " + std::to_string(f1) + "x" + std::to_string(f2));
    }
  for (int f : {2, 8, 64, 1024})
    if (coarsen_path(fine, f).total_jumps() != fine.total_jumps()) failed.emplace_back("jump conservation");

  std::string detail = "scale, normalization, replay, nesting, jump conservation";
  if (!failed.empty()) {
    detail = "failed:";
    for (const auto& f : failed) detail += " " + f;
  }
  return {failed.empty(), detail};
}

Outcome criterion8() {
  ModelSpec m = with_constant_intensity(presets::linear(), 2.0);
  m.horizon = 1.0;
  const int paths = 10000;
  std::vector<int> counts(paths);
  parallel_for(paths, default_workers(), [&](int j) {
    counts[j] = simulate_path(m, 1000, PathSeed{kSeed, static_cast<std::uint64_t>(j)}).total_jumps();
  });
  const double mean = std::accumulate(counts.begin(), counts.end(), 0.0) / paths;
  double ss = 0.0;
  int zero = 0;
  for (int k : counts) {
    ss += (k - mean) * (k - mean);
    zero += k == 0;
  }
  const double se = std::sqrt(ss / (paths - 1) / paths);
  const double p0 = std::exp(-2.0), p = static_cast<double>(zero) / paths;
  const double se0 = std::sqrt(p0 * (1 - p0) / paths);
  return {std::abs(mean - 2.0) <= 3 * se && std::abs(p - p0) <= 3 * se0,
          "mean count " + fmt(mean) + " (SE " + fmt(se) + "), P(0) " + fmt(p) + " vs " + fmt(p0) + " (SE " +
              fmt(se0) + ")"};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"half-order convergence, Example 1", criterion1},
      {"half-order convergence, Example 2", criterion2},
      {"Kalman-Bucy equivalence", criterion3},
      {"particle equivalence with jumps", criterion4},
      {"std reduction from informative jumps", criterion5},
      {"spectral hygiene", criterion6},
      {"linearity and determinism", criterion7},
      {"Cox simulation statistics", criterion8},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::printf("criterion %zu %s: %s: %s [%.1f s]\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first,
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
