#pragma once

// Hermite Galerkin space and the matrices of the discretized Zakai operators.
//
// All operators are assembled in weak form against the orthonormal basis:
//   G[i][j]  = -(A e_j', e_i') + (delta e_j, e_i') - ((lambda - 1) e_j, e_i)   (L* - C)
//   Bm[i][j] =  (h D^-1 e_j, e_i) + (B1 e_j, e_i')                            (B*)
//   Cm[i][j] =  ((lambda - 1) e_j, e_i)                                         (C)

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <utility>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "zsplit/hermite.hpp"
#include "zsplit/model.hpp"

namespace zsplit {

class AssemblyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operator matrices driving the three sub-steps.
struct OperatorMatrices {
  Eigen::MatrixXd G;   // L* - C
  Eigen::MatrixXd Bm;  // B*
  Eigen::MatrixXd Cm;  // C
};

/// Moment functionals: (p, 1), (p, x), (p, x^2) for p = sum c_i e_i.
struct MomentVectors {
  Eigen::VectorXd m0, m1, m2;
};

struct SpectralSpace {
  int n = 0;
  int quad_order = 0;
  int quad_nodes = 0;  // nodes of the adaptive assembly rule
  OperatorMatrices ops;
  MomentVectors moments;
  Eigen::MatrixXd mass;  // (e_j, e_i); identity up to quadrature error
  double M_spectral = 0.0;  // D * |Bm|_2^2, the Galerkin estimate of M

  HermiteBasis basis() const { return HermiteBasis(n); }
};

inline int default_quadrature_order(int n) { return std::min(2 * n + 16, kMaxQuadratureOrder); }
inline int minimum_quadrature_order(int n) { return n + 1; }

namespace detail {

inline void check_finite(const Eigen::MatrixXd& M, const char* name) {
  for (Eigen::Index j = 0; j < M.cols(); ++j)
    for (Eigen::Index i = 0; i < M.rows(); ++i)
      if (!std::isfinite(M(i, j))) {
        std::ostringstream os;
        os << "assemble: non-finite entry in " << name << " at (" << i << ", " << j << ")";
        throw AssemblyError(os.str());
      }
}

/// int x^p e_k(x) dx for p = 0, 1, 2, exact: e_k(x) exp(x^2/4) is a polynomial,
/// integrated against exp(-x^2/4) with the rule rescaled by x = sqrt(2) u.
inline MomentVectors exact_moments(const HermiteBasis& basis) {
  const int n = basis.size();
  const QuadratureRule rule = gauss_hermite(std::min(n / 2 + 4, kMaxQuadratureOrder));
  MomentVectors m;
  m.m0 = m.m1 = m.m2 = Eigen::VectorXd::Zero(n);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    const double x = std::sqrt(2.0) * rule.nodes[i];
    const double w = std::sqrt(2.0) * rule.weights[i] * std::exp(x * x / 4);
    basis.evaluate(x, v);
    for (int k = 0; k < n; ++k) {
      const double e = w * v[static_cast<std::size_t>(k)];
      m.m0(k) += e;
      m.m1(k) += e * x;
      m.m2(k) += e * x * x;
    }
  }
  return m;
}

/// Gauss-Legendre nodes and weights on [-1, 1] (Golub-Welsch).
inline std::pair<std::vector<double>, std::vector<double>> gauss_legendre(int points) {
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(points);
  Eigen::VectorXd sub(points - 1);
  for (int k = 1; k < points; ++k) sub(k - 1) = k / std::sqrt(4.0 * k * k - 1.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  std::vector<double> t(static_cast<std::size_t>(points)), w(t.size());
  for (int i = 0; i < points; ++i) {
    t[static_cast<std::size_t>(i)] = es.eigenvalues()(i);
    w[static_cast<std::size_t>(i)] = 2.0 * es.eigenvectors()(0, i) * es.eigenvectors()(0, i);
  }
  return {t, w};
}

/// Contributions of one interval to the mass, C, G and B* matrices.
struct PanelSums {
  Eigen::MatrixXd mass, Cm, G, Bm;

  double distance(const PanelSums& o) const {
    return std::max({(mass - o.mass).cwiseAbs().maxCoeff(), (Cm - o.Cm).cwiseAbs().maxCoeff(),
                     (G - o.G).cwiseAbs().maxCoeff(), (Bm - o.Bm).cwiseAbs().maxCoeff()});
  }
  double magnitude() const {
    return std::max({mass.cwiseAbs().maxCoeff(), Cm.cwiseAbs().maxCoeff(), G.cwiseAbs().maxCoeff(),
                     Bm.cwiseAbs().maxCoeff()});
  }
  PanelSums& operator+=(const PanelSums& o) {
    mass += o.mass;
    Cm += o.Cm;
    G += o.G;
    Bm += o.Bm;
    return *this;
  }
};

class PanelIntegrator {
 public:
  PanelIntegrator(const ModelSpec& model, const DerivedCoefficients& derived, int n, int points)
      : model_(model), derived_(derived), basis_(n), rule_(gauss_legendre(points)) {}

  PanelSums operator()(double a, double b) const {
    const int n = basis_.size();
    const int q = static_cast<int>(rule_.first.size());
    Eigen::MatrixXd E(n, q), dE(n, q);
    Eigen::VectorXd w(q), wA(q), wDelta(q), wLam(q), wH(q), wB1(q);
    std::vector<double> v(static_cast<std::size_t>(n)), d(v.size());
    const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
    for (int k = 0; k < q; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      const double x = mid + half * rule_.first[ku];
      const double W = half * rule_.second[ku];
      basis_.evaluate(x, v, d);
      for (int i = 0; i < n; ++i) {
        E(i, k) = v[static_cast<std::size_t>(i)];
        dE(i, k) = d[static_cast<std::size_t>(i)];
      }
      w(k) = W;
      wA(k) = W * derived_.A(x);
      wDelta(k) = W * derived_.delta(x);
      wLam(k) = W * (model_.intensity(x) - 1.0);
      wH(k) = W * model_.sensor(x) * derived_.D_inv;
      wB1(k) = W * derived_.B1(x);
    }
    PanelSums s;
    s.mass = E * w.asDiagonal() * E.transpose();
    s.Cm = E * wLam.asDiagonal() * E.transpose();
    s.G = -(dE * wA.asDiagonal() * dE.transpose()) + dE * wDelta.asDiagonal() * E.transpose() - s.Cm;
    s.Bm = E * wH.asDiagonal() * E.transpose() + dE * wB1.asDiagonal() * E.transpose();
    return s;
  }

  int nodes_used = 0;

  /// Bisects until both halves reproduce the whole to the absolute `tol`, so
  /// kinks in the coefficients end up in tiny intervals.
  PanelSums adaptive(double a, double b, const PanelSums& whole, double tol, int depth) {
    const double m = 0.5 * (a + b);
    PanelSums left = (*this)(a, m), right = (*this)(m, b);
    nodes_used += 2 * static_cast<int>(rule_.first.size());
    PanelSums both = left;
    both += right;
    if (depth == 0 || both.distance(whole) <= tol) return both;
    PanelSums l = adaptive(a, m, left, tol, depth - 1);
    l += adaptive(m, b, right, tol, depth - 1);
    return l;
  }

 private:
  const ModelSpec& model_;
  const DerivedCoefficients& derived_;
  HermiteBasis basis_;
  std::pair<std::vector<double>, std::vector<double>> rule_;
};

}  // namespace detail

/// Half-width of the assembly interval: beyond it every e_i e_j is below
/// exp(-100) relative to its peak.
inline double assembly_half_width(int n) { return std::sqrt(4.0 * n + 2.0) + 10.0; }

/// Assembles all Galerkin matrices with an adaptive composite Gauss-Legendre
/// rule on [-L, L]: unit panels of order / 4 points (order defaults to
/// 2n + 16), bisected until each panel agrees with its halves to 1e-14 of the
/// largest panel entry, so clamped (kinked) coefficients are integrated as
/// accurately as smooth ones.
inline SpectralSpace assemble(const ModelSpec& model, const DerivedCoefficients& derived, int n,
                              int quad_order = 0) {
  if (quad_order == 0) quad_order = default_quadrature_order(n);
  if (quad_order < minimum_quadrature_order(n) || quad_order > kMaxQuadratureOrder)
    throw AssemblyError("assemble: quadrature order " + std::to_string(quad_order) + " outside [" +
                        std::to_string(minimum_quadrature_order(n)) + ", " + std::to_string(kMaxQuadratureOrder) +
                        "] for n = " + std::to_string(n));
  HermiteBasis basis(n);

  SpectralSpace s;
  s.n = n;
  s.quad_order = quad_order;

  detail::PanelIntegrator integrate(model, derived, n, std::max(quad_order / 4, 4));
  const double L = assembly_half_width(n);
  const int panels = 2 * static_cast<int>(std::ceil(L));
  const double width = 2.0 * L / panels;
  std::vector<detail::PanelSums> coarse;
  double scale = 1.0;
  for (int k = 0; k < panels; ++k) {
    coarse.push_back(integrate(-L + k * width, -L + (k + 1) * width));
    scale = std::max(scale, coarse.back().magnitude());
  }
  detail::PanelSums total;
  for (int k = 0; k < panels; ++k) {
    const double a = -L + k * width;
    const auto part = integrate.adaptive(a, a + width, coarse[static_cast<std::size_t>(k)], 1e-14 * scale, 30);
    if (k == 0)
      total = part;
    else
      total += part;
  }
  s.quad_nodes = integrate.nodes_used;
  s.mass = total.mass;
  s.ops.Cm = total.Cm;
  s.ops.G = total.G;
  s.ops.Bm = total.Bm;
  s.moments = detail::exact_moments(basis);

  detail::check_finite(s.ops.G, "G");
  detail::check_finite(s.ops.Bm, "Bm");
  detail::check_finite(s.ops.Cm, "Cm");

  const double bnorm = Eigen::JacobiSVD<Eigen::MatrixXd>(s.ops.Bm).singularValues()(0);
  s.M_spectral = derived.D * bnorm * bnorm;
  return s;
}

/// Stabilization shift using the larger of the grid and Galerkin M estimates.
inline MuSelection select_mu(const DerivedCoefficients& derived, const SpectralSpace& space,
                             std::optional<double> override_value = {}, MuPolicy policy = MuPolicy::theoretical) {
  DerivedCoefficients d = derived;
  d.M_bound = std::max(d.M_bound, space.M_spectral);
  return select_mu(d, override_value, policy);
}

struct Projection {
  Eigen::VectorXd coeffs;
  double l2_error = 0.0;       // |p0 - sum c_i e_i|
  double l2_norm = 0.0;        // |p0|
  double relative_error() const { return l2_norm > 0 ? l2_error / l2_norm : 0.0; }
  bool adequate(double tolerance = 0.05) const { return relative_error() < tolerance; }
};

/// Galerkin coefficients of the N(mean, var) density. The inner products are
/// Gauss-Hermite expectations E[e_i(mean + sqrt(var) Z)], which resolve
/// narrow densities the assembly rule would undersample; the L2 residual
/// follows from Bessel's identity.
inline Projection project_gaussian(const HermiteBasis& basis, double mean, double var, int order = 0) {
  if (!(var > 0)) throw std::invalid_argument("project_gaussian: variance must be positive");
  const int n = basis.size();
  if (order == 0) order = kMaxQuadratureOrder;
  const QuadratureRule rule = gauss_hermite(order);
  const double sd = std::sqrt(var);
  const double norm = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Projection p;
  p.coeffs = Eigen::VectorXd::Zero(n);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int k = 0; k < rule.order(); ++k) {
    const auto ku = static_cast<std::size_t>(k);
    const double wk = rule.weights[ku] * norm;
    if (wk == 0.0) continue;
    basis.evaluate(mean + sd * rule.nodes[ku], v);
    for (int i = 0; i < n; ++i) p.coeffs(i) += wk * v[static_cast<std::size_t>(i)];
  }
  const double norm2 = 1.0 / (2.0 * std::sqrt(std::numbers::pi * var));
  p.l2_norm = std::sqrt(norm2);
  p.l2_error = std::sqrt(std::max(0.0, norm2 - p.coeffs.squaredNorm()));
  return p;
}

inline Projection project_gaussian(const SpectralSpace& space, double mean, double var) {
  return project_gaussian(space.basis(), mean, var);
}

/// Largest deviation of the assembled mass matrix from the identity.
inline double orthonormality_defect(const SpectralSpace& s) {
  return (s.mass - Eigen::MatrixXd::Identity(s.n, s.n)).cwiseAbs().maxCoeff();
}

/// Writes G, Bm, Cm and the moment vectors as CSV files into `dir`.
inline void dump_matrices(const SpectralSpace& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& name, const Eigen::MatrixXd& M) {
    std::ofstream os(dir / name, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + (dir / name).string());
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
      for (Eigen::Index j = 0; j < M.cols(); ++j) {
        if (j) os << ',';
        os << detail::format_number(M(i, j));
      }
      os << '\n';
    }
  };
  write("G.csv", s.ops.G);
  write("Bm.csv", s.ops.Bm);
  write("Cm.csv", s.ops.Cm);
  Eigen::MatrixXd mom(s.n, 3);
  mom << s.moments.m0, s.moments.m1, s.moments.m2;
  write("moments.csv", mom);
}

}  // namespace zsplit
