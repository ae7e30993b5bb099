#pragma once

// Orthonormal Hermite functions
//
//   e_k(x) = sqrt(phi(x) / k!) He_k(x),   phi(x) = (2 pi)^{-1/2} exp(-x^2/2),
//
// (0-based k; He_k the probabilists' Hermite polynomials) and Gauss-Hermite
// quadrature for the weight exp(-x^2/2).

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace zsplit {

inline constexpr int kMaxBasis = 200;
inline constexpr int kMaxQuadratureOrder = 400;

class HermiteBasis {
 public:
  explicit HermiteBasis(int n) : n_(n) {
    if (n < 1 || n > kMaxBasis)
      throw std::invalid_argument("HermiteBasis: dimension " + std::to_string(n) + " outside [1, " +
                                  std::to_string(kMaxBasis) + "]");
  }

  int size() const { return n_; }

  /// Values e_0..e_{n-1} at x, via the normalized three-term recurrence
  ///   e_k = (x e_{k-1} - sqrt(k-1) e_{k-2}) / sqrt(k),
  /// which never forms He_k(x) itself.
  void evaluate(double x, std::span<double> values) const {
    values[0] = std::pow(2.0 * std::numbers::pi, -0.25) * std::exp(-0.25 * x * x);
    if (n_ > 1) values[1] = x * values[0];
    for (int k = 2; k < n_; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      values[ku] = (x * values[ku - 1] - std::sqrt(k - 1.0) * values[ku - 2]) / std::sqrt(static_cast<double>(k));
    }
  }

  /// Values and derivatives; e_k' = -x/2 e_k + sqrt(k) e_{k-1}.
  void evaluate(double x, std::span<double> values, std::span<double> derivs) const {
    evaluate(x, values);
    derivs[0] = -0.5 * x * values[0];
    for (int k = 1; k < n_; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      derivs[ku] = -0.5 * x * values[ku] + std::sqrt(static_cast<double>(k)) * values[ku - 1];
    }
  }

  double value(int k, double x) const {
    std::vector<double> v(static_cast<std::size_t>(n_));
    evaluate(x, v);
    return v.at(static_cast<std::size_t>(k));
  }

 private:
  int n_;
};

/// Nodes and weights with sum_i w_i q(x_i) = int q(x) exp(-x^2/2) dx exact for
/// polynomials q of degree <= 2 order - 1. `scaled_weights` are
/// w_i exp(x_i^2 / 2), for integrating f(x) dx directly.
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
  std::vector<double> scaled_weights;

  int order() const { return static_cast<int>(nodes.size()); }

  template <class F>
  double integrate_weighted(F&& q) const {
    double s = 0.0;
    for (std::size_t i = 0; i < nodes.size(); ++i) s += weights[i] * q(nodes[i]);
    return s;
  }

  template <class F>
  double integrate(F&& f) const {
    double s = 0.0;
    for (std::size_t i = 0; i < nodes.size(); ++i) s += scaled_weights[i] * f(nodes[i]);
    return s;
  }
};

/// Built from the exp(-t^2) rule (Golub-Welsch, then Newton polishing on the
/// normalized Hermite functions) by the substitution x = sqrt(2) t.
inline QuadratureRule gauss_hermite(int order) {
  if (order < 1) throw std::invalid_argument("gauss_hermite: order must be >= 1");
  if (order > kMaxQuadratureOrder)
    throw std::invalid_argument("gauss_hermite: order " + std::to_string(order) + " exceeds " +
                                std::to_string(kMaxQuadratureOrder));
  const int n = order;
  const auto nu = static_cast<std::size_t>(n);

  std::vector<double> t(nu);
  if (n == 1) {
    t[0] = 0.0;
  } else {
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd sub(n - 1);
    for (int k = 1; k < n; ++k) sub(k - 1) = std::sqrt(0.5 * k);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
    es.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);
    for (int i = 0; i < n; ++i) t[static_cast<std::size_t>(i)] = es.eigenvalues()(i);
  }

  // psi_k(t) = H_k(t) exp(-t^2/2) / sqrt(2^k k! sqrt(pi)), orthonormal on R.
  std::vector<double> psi(nu + 1);
  auto eval_psi = [&](double x) {
    psi[0] = std::pow(std::numbers::pi, -0.25) * std::exp(-0.5 * x * x);
    if (n >= 1) psi[1] = std::sqrt(2.0) * x * psi[0];
    for (int k = 2; k <= n; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      psi[ku] = std::sqrt(2.0 / k) * x * psi[ku - 1] - std::sqrt((k - 1.0) / k) * psi[ku - 2];
    }
  };

  QuadratureRule rule;
  rule.nodes.resize(nu);
  rule.weights.resize(nu);
  rule.scaled_weights.resize(nu);
  for (std::size_t i = 0; i < nu; ++i) {
    double x = t[i];
    for (int it = 0; it < 4; ++it) {
      eval_psi(x);
      const double dpsi = std::sqrt(2.0 * n) * psi[nu - 1] - x * psi[nu];
      if (dpsi == 0.0) break;
      const double step = psi[nu] / dpsi;
      x -= step;
      if (std::abs(step) <= 1e-16 * (1.0 + std::abs(x))) break;
    }
    eval_psi(x);
    // Christoffel numbers: w e^{t^2} = 1 / sum_{k<n} psi_k(t)^2
    double s = 0.0;
    for (std::size_t k = 0; k < nu; ++k) s += psi[k] * psi[k];
    const double w_scaled_t = 1.0 / s;
    rule.nodes[i] = std::sqrt(2.0) * x;
    rule.scaled_weights[i] = std::sqrt(2.0) * w_scaled_t;
    rule.weights[i] = std::sqrt(2.0) * w_scaled_t * std::exp(-x * x);
  }
  // symmetrize against residual roundoff of the eigen solver
  for (std::size_t i = 0, j = nu - 1; i < j; ++i, --j) {
    const double xn = 0.5 * (rule.nodes[j] - rule.nodes[i]);
    rule.nodes[i] = -xn;
    rule.nodes[j] = xn;
    const double w = 0.5 * (rule.weights[i] + rule.weights[j]);
    const double ws = 0.5 * (rule.scaled_weights[i] + rule.scaled_weights[j]);
    rule.weights[i] = rule.weights[j] = w;
    rule.scaled_weights[i] = rule.scaled_weights[j] = ws;
  }
  if (n % 2 == 1) rule.nodes[nu / 2] = 0.0;
  return rule;
}

}  // namespace zsplit
