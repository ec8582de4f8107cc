#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <vector>

#include "mhthfa/errors.hpp"

namespace mhthfa {

/// Gauss-Legendre nodes and weights on [-1, 1].
struct GaussLegendreRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

namespace detail {

inline GaussLegendreRule compute_gauss_legendre(int n) {
  GaussLegendreRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  const int half = (n + 1) / 2;
  for (int i = 0; i < half; ++i) {
    // Tricomi initial guess, then Newton on P_n.
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0;
      double p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = pk;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    double p0 = 1.0;
    double p1 = x;
    for (int k = 2; k <= n; ++k) {
      const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = pk;
    }
    dp = n * (x * p1 - p0) / (x * x - 1.0);
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    rule.nodes[i] = -x;
    rule.nodes[n - 1 - i] = x;
    rule.weights[i] = w;
    rule.weights[n - 1 - i] = w;
  }
  if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
  return rule;
}

}  // namespace detail

/// Cached rule; references stay valid for the life of the process.
inline const GaussLegendreRule& gauss_legendre(int n) {
  if (n < 1) throw DomainError("gauss_legendre: node count must be positive");
  static std::mutex mutex;
  static std::map<int, GaussLegendreRule> cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, detail::compute_gauss_legendre(n)).first;
  return it->second;
}

/// Controls a 1-D integral over [lower, upper]; upper may be +infinity.
struct QuadratureSpec {
  int node_count = 64;
  double lower = 0.0;
  double upper = std::numeric_limits<double>::infinity();
  double relative_tolerance = 1e-10;
  int max_node_count = 8192;

  void validate() const {
    if (node_count < 2) throw DomainError("QuadratureSpec: node_count must be >= 2");
    if (!(relative_tolerance > 0.0)) throw DomainError("QuadratureSpec: relative_tolerance must be positive");
    if (std::isfinite(upper) && !(lower < upper)) throw DomainError("QuadratureSpec: lower must be < upper");
  }
};

/// Fixed-rule Gauss-Legendre on the finite interval [a, b].
template <typename F>
double integrate_fixed(F&& f, double a, double b, int nodes) {
  const auto& rule = gauss_legendre(nodes);
  const double half = 0.5 * (b - a);
  const double mid = 0.5 * (b + a);
  double sum = 0.0;
  for (int i = 0; i < nodes; ++i) sum += rule.weights[i] * f(mid + half * rule.nodes[i]);
  return half * sum;
}

/// Gauss-Legendre with node doubling until two successive estimates agree to the relative
/// tolerance. A half-infinite range is mapped through x = lower + s / (1 - s).
template <typename F>
double integrate(F&& f, const QuadratureSpec& spec) {
  spec.validate();
  auto estimate = [&](int n) {
    if (std::isfinite(spec.upper)) return integrate_fixed(f, spec.lower, spec.upper, n);
    return integrate_fixed(
        [&](double s) {
          const double one_minus = 1.0 - s;
          return f(spec.lower + s / one_minus) / (one_minus * one_minus);
        },
        0.0, 1.0, n);
  };
  int n = spec.node_count;
  double previous = estimate(n);
  while (2 * n <= spec.max_node_count) {
    n *= 2;
    const double current = estimate(n);
    if (std::abs(current - previous) <= spec.relative_tolerance * std::abs(current)) return current;
    previous = current;
  }
  return previous;
}

}  // namespace mhthfa
