#pragma once

// Filtering problem definition:
//
//   dX = g(X) dt + sigma(X) dw,              X_0 ~ N(x0_mean, x0_var)
//   dY = h(X) dt + b dw + b~ dv
//   Z  = Cox process with intensity lambda(X) in [varpi_1, varpi_2]
//
// plus the composite coefficients the Zakai discretization needs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "zsplit/expr.hpp"

namespace zsplit {

class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A scalar coefficient function together with a printable description.
struct Coefficient {
  std::function<double(double)> fn;
  std::string text;

  Coefficient() = default;
  Coefficient(std::function<double(double)> f, std::string t) : fn(std::move(f)), text(std::move(t)) {}
  explicit Coefficient(const Expr& e) : fn([e](double x) { return e(x); }), text(e.str()) {}
  static Coefficient constant(double v) {
    return Coefficient([v](double) { return v; }, detail::format_number(v));
  }

  double operator()(double x) const { return fn(x); }
  explicit operator bool() const { return static_cast<bool>(fn); }
};

struct ModelSpec {
  std::string name;
  Coefficient drift;          // g
  Coefficient diffusion;      // sigma
  Coefficient diffusion_dx;   // sigma'
  Coefficient diffusion_dxx;  // sigma''
  Coefficient sensor;         // h
  double obs_b = 0.0;         // correlated channel loading
  double obs_btilde = 1.0;    // independent channel loading
  Coefficient intensity;      // lambda
  double intensity_lo = 1.0;  // varpi_1
  double intensity_hi = 1.0;  // varpi_2
  double x0_mean = 0.0;
  double x0_var = 1.0;
  double horizon = 1.0;
};

/// Sample points on which coefficient bounds are checked and sup-norms taken.
struct ValidationGrid {
  double lo = -10.0;
  double hi = 10.0;
  int points = 2001;

  std::vector<double> nodes() const {
    std::vector<double> xs(static_cast<std::size_t>(points));
    if (points == 1) {
      xs[0] = lo;
      return xs;
    }
    for (int i = 0; i < points; ++i) xs[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (points - 1);
    return xs;
  }
};

struct DerivedCoefficients {
  std::function<double(double)> A;      // sigma^2 / 2
  std::function<double(double)> dA;     // sigma sigma'
  std::function<double(double)> B1;     // sigma b / D
  std::function<double(double)> B2;     // sigma sqrt(1 - b^2/D)
  std::function<double(double)> delta;  // g - A'
  double D = 1.0;
  double D_inv = 1.0;
  double alpha1 = 0.0;   // min A on the grid
  double alpha2 = 0.0;   // max A on the grid
  double varpi1 = 0.0;
  double varpi2 = 0.0;
  double delta_sup = 0.0;
  double M_bound = 0.0;  // grid estimate of |B* p|^2_D <= M |p|^2
  double alpha = 0.0;    // coercivity shift
  double beta2 = 0.0;    // coercivity constant
};

struct ValidationReport {
  double A_min = 0, A_max = 0;
  double lambda_min = 0, lambda_max = 0;
  double sensor_abs_max = 0, drift_abs_max = 0;
  double alpha1 = 0, alpha2 = 0, varpi1 = 0, varpi2 = 0;
  std::vector<std::string> flags;

  bool ok() const { return flags.empty(); }
  bool has_flag(std::string_view needle) const {
    return std::any_of(flags.begin(), flags.end(),
                       [&](const std::string& f) { return f.find(needle) != std::string::npos; });
  }
};

/// Reports coefficient ranges over the grid and flags violated bounds.
/// Never throws; callers decide what to do with the flags.
inline ValidationReport validate_assumptions(const ModelSpec& m, const ValidationGrid& grid = {}) {
  ValidationReport r;
  const auto xs = grid.nodes();
  if (xs.empty()) {
    r.flags.emplace_back("empty validation grid");
    return r;
  }
  constexpr double inf = std::numeric_limits<double>::infinity();
  r.A_min = r.lambda_min = inf;
  r.A_max = r.lambda_max = -inf;
  bool finite = true;
  for (double x : xs) {
    const double s = m.diffusion(x);
    const double A = 0.5 * s * s;
    const double lam = m.intensity(x);
    const double h = m.sensor(x);
    const double g = m.drift(x);
    finite = finite && std::isfinite(A) && std::isfinite(lam) && std::isfinite(h) && std::isfinite(g);
    r.A_min = std::min(r.A_min, A);
    r.A_max = std::max(r.A_max, A);
    r.lambda_min = std::min(r.lambda_min, lam);
    r.lambda_max = std::max(r.lambda_max, lam);
    r.sensor_abs_max = std::max(r.sensor_abs_max, std::abs(h));
    r.drift_abs_max = std::max(r.drift_abs_max, std::abs(g));
  }
  r.alpha1 = r.A_min;
  r.alpha2 = r.A_max;
  r.varpi1 = r.lambda_min;
  r.varpi2 = r.lambda_max;

  if (!finite) r.flags.emplace_back("non-finite coefficient value on grid");
  if (!(r.A_min > 0)) r.flags.emplace_back("diffusion degenerate: min A <= 0 (ellipticity violated)");
  const double D = m.obs_b * m.obs_b + m.obs_btilde * m.obs_btilde;
  if (!(D > 0)) r.flags.emplace_back("observation noise degenerate: D <= 0 (ellipticity violated)");
  if (!(r.lambda_min > 0)) r.flags.emplace_back("intensity lower bound varpi_1 <= 0 on grid");
  if (r.lambda_min < m.intensity_lo * (1 - 1e-12) || r.lambda_max > m.intensity_hi * (1 + 1e-12))
    r.flags.emplace_back("intensity leaves declared bounds [varpi_1, varpi_2] on grid");

  // A function that is still growing past the grid edge is not bounded.
  auto grows_beyond = [&](const Coefficient& f, double sup) {
    const double width = grid.hi - grid.lo;
    const double far = std::max(std::abs(f(grid.lo - width)), std::abs(f(grid.hi + width)));
    return far > sup * (1 + 1e-6) + 1e-12;
  };
  if (grows_beyond(m.sensor, r.sensor_abs_max))
    r.flags.emplace_back("unbounded sensor, boundedness violated beyond grid");
  if (grows_beyond(m.drift, r.drift_abs_max))
    r.flags.emplace_back("unbounded drift, boundedness violated beyond grid");
  return r;
}

inline DerivedCoefficients derive_coefficients(const ModelSpec& m, const ValidationGrid& grid = {}) {
  const double b = m.obs_b, bt = m.obs_btilde;
  const double D = b * b + bt * bt;
  if (!(D > 0) || !std::isfinite(D)) throw ModelError("derive_coefficients: D = b^2 + b~^2 must be positive");
  const double radicand = 1.0 - b * b / D;
  if (radicand < 0) throw ModelError("derive_coefficients: 1 - b^2/D < 0, B2 not real");
  if (!(m.intensity_lo > 0) || !(m.intensity_hi >= m.intensity_lo))
    throw ModelError("derive_coefficients: intensity bounds must satisfy 0 < varpi_1 <= varpi_2");

  DerivedCoefficients d;
  d.D = D;
  d.D_inv = 1.0 / D;
  const double root = std::sqrt(radicand);
  const double b_over_D = b / D;
  auto sigma = m.diffusion.fn;
  auto dsigma = m.diffusion_dx.fn;
  auto drift = m.drift.fn;
  d.A = [sigma](double x) { double s = sigma(x); return 0.5 * s * s; };
  d.dA = [sigma, dsigma](double x) { return sigma(x) * dsigma(x); };
  d.B1 = [sigma, b_over_D](double x) { return sigma(x) * b_over_D; };
  d.B2 = [sigma, root](double x) { return sigma(x) * root; };
  d.delta = [drift, sigma, dsigma](double x) { return drift(x) - sigma(x) * dsigma(x); };

  const auto report = validate_assumptions(m, grid);
  d.alpha1 = report.alpha1;
  d.alpha2 = report.alpha2;
  d.varpi1 = m.intensity_lo;
  d.varpi2 = m.intensity_hi;

  double delta_sup = 0.0, M = 0.0;
  for (double x : grid.nodes()) {
    delta_sup = std::max(delta_sup, std::abs(d.delta(x)));
    const double h = m.sensor(x);
    const double B1 = d.B1(x);
    // |B* p|_{V'} <= (sup|h D^-1| + sup|B1|) |p|, squared and D-weighted
    M = std::max(M, 2.0 * (h * h * d.D_inv + B1 * B1 * D));
  }
  d.delta_sup = delta_sup;
  d.M_bound = M;

  // Coercivity of -(L* - C): alpha_1 |p'|^2 - (delta p, p') + ((lambda - 1) p, p) + alpha |p|^2
  //   >= alpha_1/2 |p'|^2 + (alpha + varpi_1 - 1 - |delta|^2 / (2 alpha_1)) |p|^2.
  const double a1 = d.alpha1 > 0 ? d.alpha1 : std::numeric_limits<double>::min();
  const double slack = d.varpi1 - 1.0 - delta_sup * delta_sup / (2.0 * a1);
  d.alpha = std::max(0.0, -slack) + 1.0;
  d.beta2 = std::min(0.5 * d.alpha1, d.alpha + slack);
  return d;
}

struct MuSelection {
  double value = 0.0;
  bool overridden = false;
  std::optional<std::string> warning;
  std::string rule = "theoretical";
};

/// How the shift is chosen when no explicit value is given.
///  theoretical: max{3 alpha, 3/2 M, 3/2 (varpi_2^2 - 1)} + 1, contraction of every sub-step.
///  coercive:    3 alpha + 1, contraction of the implicit sub-step only; keeps mu kappa / 3
///               small at coarse steps for strongly informative models.
enum class MuPolicy { theoretical, coercive };

inline const char* to_string(MuPolicy p) { return p == MuPolicy::theoretical ? "theoretical" : "coercive"; }

inline std::optional<MuPolicy> parse_mu_policy(std::string_view s) {
  if (s == "theoretical" || s == "auto") return MuPolicy::theoretical;
  if (s == "coercive") return MuPolicy::coercive;
  return std::nullopt;
}

inline double theoretical_mu(const DerivedCoefficients& d) {
  return std::max({3.0 * d.alpha, 1.5 * d.M_bound, 1.5 * (d.varpi2 * d.varpi2 - 1.0)}) + 1.0;
}

inline double coercive_mu(const DerivedCoefficients& d) { return 3.0 * d.alpha + 1.0; }

/// Stabilization shift; an override wins over the policy and is checked
/// against the theoretical bound.
inline MuSelection select_mu(const DerivedCoefficients& d, std::optional<double> override_value = {},
                             MuPolicy policy = MuPolicy::theoretical) {
  if (!std::isfinite(d.alpha) || !std::isfinite(d.M_bound) || !std::isfinite(d.varpi2))
    throw ModelError("select_mu: derived constants must be finite");
  const double needed = theoretical_mu(d);
  if (override_value) {
    if (!(*override_value >= 0) || !std::isfinite(*override_value))
      throw ModelError("select_mu: override must be a finite non-negative number");
    MuSelection s{*override_value, true, std::nullopt, "override"};
    if (*override_value < needed)
      s.warning = "mu override " + detail::format_number(*override_value) + " below the stability bound " +
                  detail::format_number(needed) + "; contraction of the sub-steps is not guaranteed";
    return s;
  }
  if (policy == MuPolicy::coercive) return {coercive_mu(d), false, std::nullopt, "coercive"};
  return {needed, false, std::nullopt, "theoretical"};
}

/// Parameters of g(x) = a x, sigma const, h(x) = c x, b = 0, lambda = 1.
struct LinearModel {
  double a = 0.0;
  double sigma = 0.0;
  double c = 0.0;
  double D = 1.0;
  double x0_mean = 0.0;
  double x0_var = 0.0;
};

/// Recognizes the linear uncorrelated non-informative-jump special case.
inline std::optional<LinearModel> as_linear(const ModelSpec& m) {
  if (m.obs_b != 0.0) return std::nullopt;
  const double a = m.drift(1.0) - m.drift(0.0);
  const double c = m.sensor(1.0) - m.sensor(0.0);
  const double s = m.diffusion(0.0);
  for (double x : {-7.3, -2.0, 0.0, 0.5, 3.1, 9.7}) {
    auto close = [](double u, double v) { return std::abs(u - v) <= 1e-12 * (1.0 + std::abs(v)); };
    if (!close(m.drift(x), a * x) || !close(m.sensor(x), c * x) || !close(m.diffusion(x), s) ||
        !close(m.intensity(x), 1.0))
      return std::nullopt;
  }
  return LinearModel{a, std::abs(s), c, m.obs_btilde * m.obs_btilde, m.x0_mean, m.x0_var};
}

namespace presets {

inline Coefficient constant(double v) { return Coefficient::constant(v); }

inline Coefficient clamped_quadratic(double scale, double lo, double hi) {
  return Coefficient([=](double x) { return std::clamp(scale * x * x, lo, hi); },
                     "clamp(" + detail::format_number(scale) + "*sqr(x), " + detail::format_number(lo) +
                         ", " + detail::format_number(hi) + ")");
}

inline void set_constant_diffusion(ModelSpec& m, double sigma) {
  m.diffusion = constant(sigma);
  m.diffusion_dx = constant(0.0);
  m.diffusion_dxx = constant(0.0);
}

/// Linear signal observed through h(x) = x with correlated noise and Cox
/// intensity 3 x^2 capped into [0.5, 50].
inline ModelSpec example1() {
  ModelSpec m;
  m.name = "example1";
  m.drift = Coefficient([](double x) { return 0.5 * x; }, "0.5*x");
  set_constant_diffusion(m, 2.0);
  m.sensor = Coefficient([](double x) { return x; }, "x");
  m.obs_b = 0.5;
  m.obs_btilde = 1.0;
  m.intensity = clamped_quadratic(3.0, 0.5, 50.0);
  m.intensity_lo = 0.5;
  m.intensity_hi = 50.0;
  m.x0_mean = 5.0;
  m.x0_var = 0.01;
  m.horizon = 0.5;
  return m;
}

/// Nonlinear sin drift, h(x) = 5.5 x, intensity 3 x^2 capped into [0.1, 300].
inline ModelSpec example2() {
  ModelSpec m;
  m.name = "example2";
  m.drift = Coefficient([](double x) { return std::sin(x); }, "sin(x)");
  set_constant_diffusion(m, 2.0);
  m.sensor = Coefficient([](double x) { return 5.5 * x; }, "5.5*x");
  m.obs_b = 0.5;
  m.obs_btilde = 1.0;
  m.intensity = clamped_quadratic(3.0, 0.1, 300.0);
  m.intensity_lo = 0.1;
  m.intensity_hi = 300.0;
  m.x0_mean = 5.0;
  m.x0_var = 0.01;
  m.horizon = 0.5;
  return m;
}

/// Linear uncorrelated model with uninformative jumps; the Kalman-Bucy filter is exact.
inline ModelSpec linear() {
  ModelSpec m;
  m.name = "linear";
  m.drift = Coefficient([](double x) { return 0.5 * x; }, "0.5*x");
  set_constant_diffusion(m, 2.0);
  m.sensor = Coefficient([](double x) { return x; }, "x");
  m.obs_b = 0.0;
  m.obs_btilde = 1.0;
  m.intensity = constant(1.0);
  m.intensity_lo = 1.0;
  m.intensity_hi = 1.0;
  m.x0_mean = 5.0;
  m.x0_var = 1.0;
  m.horizon = 0.5;
  return m;
}

inline std::vector<std::string> names() { return {"example1", "example2", "linear"}; }

inline std::optional<ModelSpec> by_name(std::string_view name) {
  if (name == "example1") return example1();
  if (name == "example2") return example2();
  if (name == "linear") return linear();
  return std::nullopt;
}

}  // namespace presets

/// Replaces the intensity with the constant lambda (bounds collapse to lambda).
inline ModelSpec with_constant_intensity(ModelSpec m, double lambda) {
  if (!(lambda > 0)) throw ModelError("constant intensity must be positive");
  m.intensity = Coefficient::constant(lambda);
  m.intensity_lo = m.intensity_hi = lambda;
  return m;
}

}  // namespace zsplit
