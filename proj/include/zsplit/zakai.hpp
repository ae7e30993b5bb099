#pragma once

// Semi-discrete splitting-up scheme for the shifted Zakai equation. One step
// from t_r to t_{r+1} applies, in this order:
//
//   observation (explicit Euler-Maruyama):  c <- (1 - s) c + dY Bm c
//   parabolic   (backward Euler):           ((1 + s) I - kappa G) c_new = c
//   jump        (forward Euler):            c <- (1 - s) c + dZ Cm c
//
// with s = mu kappa / 3.

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "zsplit/simulate.hpp"
#include "zsplit/spectral.hpp"

namespace zsplit {

class SchemeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DensityState {
  Eigen::VectorXd c;
  int t_index = 0;
  double mass = 0.0;  // m0 . c

  bool finite() const { return c.allFinite(); }
};

struct ConditionalStats {
  double mean = 0.0;
  double std = 0.0;
};

/// Normalized mean and standard deviation of p = sum c_i e_i; nullopt when
/// the mass (p, 1) is at or below `mass_floor` or not finite.
inline std::optional<ConditionalStats> conditional_stats(const Eigen::VectorXd& c, const MomentVectors& mom,
                                                         double mass_floor = 0.0) {
  const double mass = mom.m0.dot(c);
  if (!std::isfinite(mass) || !(mass > mass_floor)) return std::nullopt;
  const double mean = mom.m1.dot(c) / mass;
  const double second = mom.m2.dot(c) / mass;
  if (!std::isfinite(mean) || !std::isfinite(second)) return std::nullopt;
  return ConditionalStats{mean, std::sqrt(std::max(0.0, second - mean * mean))};
}

inline std::optional<ConditionalStats> conditional_stats(const DensityState& state, const SpectralSpace& space,
                                                         double mass_floor = 0.0) {
  return conditional_stats(state.c, space.moments, mass_floor);
}

/// Sub-step operators for a fixed (kappa, mu). Holds one dense LU
/// factorization of the implicit matrix, shared read-only by all paths.
class SplittingScheme {
 public:
  SplittingScheme(OperatorMatrices ops, double kappa, double mu) : ops_(std::move(ops)), kappa_(kappa), mu_(mu) {
    const auto n = ops_.G.rows();
    if (ops_.G.cols() != n || ops_.Bm.rows() != n || ops_.Bm.cols() != n || ops_.Cm.rows() != n ||
        ops_.Cm.cols() != n)
      throw SchemeError("SplittingScheme: operator matrices must be square and of equal size");
    if (!(kappa >= 0) || !std::isfinite(kappa)) throw SchemeError("SplittingScheme: kappa must be >= 0");
    if (!(mu >= 0) || !std::isfinite(mu)) throw SchemeError("SplittingScheme: mu must be >= 0");
    shift_ = mu * kappa / 3.0;
    if (shift_ >= 1.0)
      throw SchemeError("SplittingScheme: mu * kappa / 3 = " + detail::format_number(shift_) +
                        " >= 1 flips the sign of the explicit sub-steps; reduce kappa or mu");
    lhs_ = (1.0 + shift_) * Eigen::MatrixXd::Identity(n, n) - kappa * ops_.G;
    lu_.compute(lhs_);
    rcond_ = lu_.rcond();
    if (!(rcond_ > 1e-13))
      throw SchemeError("SplittingScheme: implicit matrix singular or ill-conditioned (rcond estimate " +
                        detail::format_number(rcond_) + "); check the mu override");
    const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(lhs_).singularValues();
    implicit_norm_ = 1.0 / sv(sv.size() - 1);
  }

  SplittingScheme(const SpectralSpace& space, double kappa, double mu) : SplittingScheme(space.ops, kappa, mu) {
    moments_ = space.moments;
  }

  double kappa() const { return kappa_; }
  double mu() const { return mu_; }
  int size() const { return static_cast<int>(ops_.G.rows()); }
  const OperatorMatrices& operators() const { return ops_; }
  const MomentVectors& moments() const { return moments_; }

  /// Spectral norm of the implicit solve map ((1 + s) I - kappa G)^{-1}.
  double implicit_norm() const { return implicit_norm_; }
  double rcond() const { return rcond_; }

  /// Deterministic factor (1 - s)^2 / (1 + s) every step applies on top of the
  /// filtering dynamics.
  double shift_factor() const { return (1.0 - shift_) * (1.0 - shift_) / (1.0 + shift_); }

  void step_observation(Eigen::VectorXd& c, double dy) const {
    c = (1.0 - shift_) * c + dy * (ops_.Bm * c);
  }

  void step_implicit(Eigen::VectorXd& c) const {
#ifndef NDEBUG
    const Eigen::VectorXd rhs = c;
#endif
    c = lu_.solve(c);
#ifndef NDEBUG
    const double res = (lhs_ * c - rhs).norm();
    if (res > 1e-10 * std::max(rhs.norm(), 1e-300)) throw SchemeError("step_implicit: residual check failed");
#endif
  }

  void step_jump(Eigen::VectorXd& c, int dz) const {
    if (dz < 0) throw SchemeError("step_jump: negative jump count");
    if (dz == 0) {
      c *= (1.0 - shift_);
      return;
    }
    c = (1.0 - shift_) * c + static_cast<double>(dz) * (ops_.Cm * c);
  }

  /// Jump o implicit o observation.
  void split_step(Eigen::VectorXd& c, double dy, int dz) const {
    step_observation(c, dy);
    step_implicit(c);
    step_jump(c, dz);
  }

  void split_step(DensityState& s, double dy, int dz) const {
    split_step(s.c, dy, dz);
    s.t_index += 1;
    if (moments_.m0.size() == s.c.size()) s.mass = moments_.m0.dot(s.c);
  }

 private:
  OperatorMatrices ops_;
  MomentVectors moments_;
  double kappa_;
  double mu_;
  double shift_ = 0.0;
  Eigen::MatrixXd lhs_;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
  double rcond_ = 0.0;
  double implicit_norm_ = 0.0;
};

struct FilterOptions {
  double mass_floor = 1e-12;  // relative to the initial mass, after removing the known shift decay
};

struct FilterTrajectory {
  double kappa = 0.0;
  std::vector<double> means;
  std::vector<double> stds;
  std::vector<double> masses;
  std::optional<int> degenerate_from;  // first index where the mass guard tripped
  double min_mass = 0.0;               // smallest shift-corrected mass seen
  int negative_mass_events = 0;

  bool degenerate() const { return degenerate_from.has_value(); }
  std::size_t size() const { return means.size(); }
};

inline DensityState make_state(const Eigen::VectorXd& c, const MomentVectors& mom) {
  return DensityState{c, 0, mom.m0.dot(c)};
}

/// Runs the scheme over the whole path and records normalized statistics at
/// every grid point.
inline FilterTrajectory run_filter(const SplittingScheme& scheme, const PathBundle& path, DensityState p0,
                                   const FilterOptions& opt = {}) {
  if (std::abs(path.kappa - scheme.kappa()) > 1e-12 * std::max(1.0, std::abs(path.kappa)))
    throw SchemeError("run_filter: path kappa " + detail::format_number(path.kappa) + " != scheme kappa " +
                      detail::format_number(scheme.kappa()));
  if (p0.c.size() != scheme.size()) throw SchemeError("run_filter: initial state has wrong dimension");
  const MomentVectors& mom = scheme.moments();
  const auto n = static_cast<std::size_t>(path.n_steps) + 1;

  FilterTrajectory tr;
  tr.kappa = path.kappa;
  tr.means.resize(n);
  tr.stds.resize(n);
  tr.masses.resize(n);

  const double initial_mass = mom.m0.dot(p0.c);
  if (!(initial_mass > 0)) throw SchemeError("run_filter: initial density has non-positive mass");
  const double floor_rel = opt.mass_floor;
  const double decay = scheme.shift_factor();
  double shift = 1.0;
  tr.min_mass = 1.0;

  ConditionalStats last{};
  auto record = [&](std::size_t r, const Eigen::VectorXd& c) {
    const double mass = mom.m0.dot(c);
    tr.masses[r] = mass;
    const double rel = mass / (initial_mass * shift);
    if (std::isfinite(rel)) tr.min_mass = std::min(tr.min_mass, rel);
    if (mass < 0) ++tr.negative_mass_events;
    if (!tr.degenerate_from) {
      auto st = conditional_stats(c, mom, floor_rel * initial_mass * shift);
      if (st) {
        last = *st;
      } else {
        tr.degenerate_from = static_cast<int>(r);
      }
    }
    tr.means[r] = last.mean;
    tr.stds[r] = last.std;
  };

  Eigen::VectorXd c = p0.c;
  record(0, c);
  for (std::size_t r = 0; r + 1 < n; ++r) {
    scheme.split_step(c, path.dy[r], path.dz[r]);
    shift *= decay;
    record(r + 1, c);
  }
  return tr;
}

inline void write_trajectory_csv(const FilterTrajectory& tr, std::ostream& os) {
  os << "t,mean,std,mass\n";
  for (std::size_t r = 0; r < tr.size(); ++r)
    os << detail::format_number(static_cast<double>(r) * tr.kappa) << ',' << detail::format_number(tr.means[r])
       << ',' << detail::format_number(tr.stds[r]) << ',' << detail::format_number(tr.masses[r]) << '\n';
}

inline nlohmann::json to_json(const FilterTrajectory& tr) {
  nlohmann::json j;
  j["kappa"] = tr.kappa;
  j["means"] = tr.means;
  j["stds"] = tr.stds;
  j["masses"] = tr.masses;
  j["degenerate_from"] = tr.degenerate_from ? nlohmann::json(*tr.degenerate_from) : nlohmann::json(nullptr);
  j["min_mass"] = tr.min_mass;
  j["negative_mass_events"] = tr.negative_mass_events;
  return j;
}

}  // namespace zsplit
