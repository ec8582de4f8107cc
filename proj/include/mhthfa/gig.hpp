#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "mhthfa/errors.hpp"
#include "mhthfa/quadrature.hpp"
#include "mhthfa/special_math.hpp"

namespace mhthfa {

/// Generalized inverse Gaussian law, density proportional to
/// w^(lambda-1) exp{-(psi w + chi / w) / 2} on w > 0.
struct GigParams {
  double psi = 1.0;
  double chi = 1.0;
  double lambda = 1.0;

  void validate() const {
    if (!(psi > 0.0) || !std::isfinite(psi)) throw DomainError("GigParams: psi must be positive");
    if (!(chi > 0.0) || !std::isfinite(chi)) throw DomainError("GigParams: chi must be positive");
    if (!std::isfinite(lambda)) throw DomainError("GigParams: lambda must be finite");
  }
};

inline double gig_log_normalizer(const GigParams& g) {
  // log of (psi/chi)^(lambda/2) / (2 K_lambda(sqrt(psi chi)))
  return 0.5 * g.lambda * std::log(g.psi / g.chi) - kLog2 - log_bessel_k(g.lambda, std::sqrt(g.psi * g.chi));
}

inline double gig_log_density(double w, const GigParams& g) {
  g.validate();
  if (!(w > 0.0)) throw DomainError("gig_log_density: w must be positive");
  return gig_log_normalizer(g) + (g.lambda - 1.0) * std::log(w) - 0.5 * (g.psi * w + g.chi / w);
}

inline double gig_mode(const GigParams& g) {
  g.validate();
  const double l1 = g.lambda - 1.0;
  return (l1 + std::sqrt(l1 * l1 + g.psi * g.chi)) / g.psi;
}

/// log E[W^t] = (t/2) log(chi/psi) + log K_{lambda+t}(s) - log K_lambda(s), s = sqrt(psi chi).
inline double gig_log_moment(const GigParams& g, double t) {
  g.validate();
  if (t == 0.0) return 0.0;
  const double s = std::sqrt(g.psi * g.chi);
  return 0.5 * t * std::log(g.chi / g.psi) + log_bessel_k_scaled(g.lambda + t, s) - log_bessel_k_scaled(g.lambda, s);
}

inline double gig_moment(const GigParams& g, double t) { return std::exp(gig_log_moment(g, t)); }

inline double gig_expected_log(const GigParams& g) {
  g.validate();
  return d_log_bessel_k_dorder(g.lambda, std::sqrt(g.psi * g.chi)) + 0.5 * std::log(g.chi / g.psi);
}

/// Node layout for expectations under a GIG law, in t = log w.
struct GigGridOptions {
  double panel_sigmas = 4.0;  // panel width in units of the narrowest reference scale
  int nodes_per_panel = 12;
  double log_drop = 40.0;  // each reference law is covered until its density falls by e^-log_drop
  int max_panels = 400;
};

/// sum_j exp(log_weight[j]) g(exp(t[j])) approximates E[g(W)] for W ~ base.
struct GigGrid {
  std::vector<double> t;
  std::vector<double> log_weight;
};

namespace detail {

// Unnormalized log density of T = log W: lambda t - (psi e^t + chi e^-t) / 2, shifted up by sqrt(psi chi).
inline double gig_log_kernel_t(const GigParams& g, double t) {
  const double u = 0.5 * (t - 0.5 * std::log(g.chi / g.psi));
  const double sh = std::sinh(u);
  return g.lambda * t - 2.0 * std::sqrt(g.psi * g.chi) * sh * sh;
}

inline double gig_log_kernel_t_slope(const GigParams& g, double t) {
  return g.lambda - 0.5 * (g.psi * std::exp(t) - g.chi * std::exp(-t));
}

struct GigSpan {
  double lower, upper, sigma;
};

inline GigSpan gig_span(const GigParams& g, double drop) {
  const double root = std::sqrt(g.lambda * g.lambda + g.psi * g.chi);
  // mode of T, written to avoid cancellation for negative lambda
  const double w = g.lambda >= 0.0 ? (g.lambda + root) / g.psi : g.chi / (root - g.lambda);
  const double tm = std::log(w);
  const double sigma = 1.0 / std::sqrt(0.5 * (g.psi * w + g.chi / w));
  const double top = gig_log_kernel_t(g, tm);
  auto reach = [&](double direction) {
    double d = sigma * std::sqrt(2.0 * drop);
    for (int iter = 0; iter < 60; ++iter) {
      const double h = gig_log_kernel_t(g, tm + direction * d) - top + drop;
      const double dh = direction * gig_log_kernel_t_slope(g, tm + direction * d);
      if (!(dh < 0.0)) {
        d *= 2.0;
        continue;
      }
      const double next = d - h / dh;
      const double clipped = next > 0.0 ? next : 0.5 * d;
      if (std::abs(clipped - d) < 1e-10 * (1.0 + d)) {
        d = clipped;
        break;
      }
      d = std::min(clipped, 200.0);
    }
    return d;
  };
  return {tm - reach(-1.0), tm + reach(1.0), sigma};
}

}  // namespace detail

inline GigGrid make_gig_grid(const GigParams& base, const std::vector<GigParams>& references,
                             const GigGridOptions& opt = {}) {
  base.validate();
  detail::GigSpan span = detail::gig_span(base, opt.log_drop);
  for (const auto& r : references) {
    r.validate();
    const detail::GigSpan s = detail::gig_span(r, opt.log_drop);
    span.lower = std::min(span.lower, s.lower);
    span.upper = std::max(span.upper, s.upper);
    span.sigma = std::min(span.sigma, s.sigma);
  }
  const double width = span.upper - span.lower;
  const int panels =
      std::clamp(static_cast<int>(std::ceil(width / (opt.panel_sigmas * span.sigma))), 1, opt.max_panels);
  const auto& rule = gauss_legendre(opt.nodes_per_panel);
  const double half = 0.5 * width / panels;
  // log of the integral of exp(kernel) over t
  const double log_norm = kLog2 + log_bessel_k_scaled(base.lambda, std::sqrt(base.psi * base.chi)) -
                          0.5 * base.lambda * std::log(base.psi / base.chi);
  GigGrid grid;
  grid.t.reserve(static_cast<std::size_t>(panels) * opt.nodes_per_panel);
  grid.log_weight.reserve(grid.t.capacity());
  for (int k = 0; k < panels; ++k) {
    const double mid = span.lower + (2 * k + 1) * half;
    for (int i = 0; i < opt.nodes_per_panel; ++i) {
      const double t = mid + half * rule.nodes[i];
      grid.t.push_back(t);
      grid.log_weight.push_back(std::log(half * rule.weights[i]) + detail::gig_log_kernel_t(base, t) - log_norm);
    }
  }
  return grid;
}

/// log sum_i exp(v[i]); -inf for an empty or all -inf input.
inline double log_sum_exp(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

namespace detail {

// Ratio-of-uniforms sampler of Hoermann and Leydold (2014) for the standardized law
// x^(p-1) exp{-beta (x + 1/x) / 2}, p >= 0.
template <typename Rng>
double sample_standard_gig(double p, double beta, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double two_d_beta = 2.0 / beta;
  auto log_kernel = [&](double x) { return (p - 1.0) * std::log(x) - (x + 1.0 / x) / two_d_beta; };

  if (beta > 1.0 || p > 1.0) {
    // mode shift with a bounding rectangle from Cardano's formula
    const double mode = (std::sqrt((p - 1.0) * (p - 1.0) + beta * beta) + (p - 1.0)) / beta;
    auto sqrt_ratio = [&](double x) {
      return std::exp(0.5 * (p - 1.0) * std::log(x / mode) + (mode + 1.0 / mode - x - 1.0 / x) / (2.0 * two_d_beta));
    };
    const double c1 = (-two_d_beta * (p + 1.0) - mode) / 3.0;
    const double c2 = two_d_beta * (p - 1.0) * mode - 1.0;
    const double c3 = std::sqrt(-std::min(c2 / 3.0 - c1 * c1, 0.0));
    const double c4 = c1 * (2.0 * c1 * c1 - c2) + mode;
    const double c5 = std::acos(std::clamp(-c4 / 2.0 / (c3 * c3 * c3), -1.0, 1.0)) / 3.0;
    const double x_m = 2.0 * c3 * std::cos(c5 + 4.0 * std::numbers::pi / 3.0) - c1;
    const double x_p = std::max(2.0 * c3 * std::cos(c5) - c1, x_m);
    const double u_m = (x_m - mode) * sqrt_ratio(x_m);
    const double u_p = (x_p - mode) * sqrt_ratio(x_p);
    while (true) {
      const double u = unif(rng);
      const double v = unif(rng);
      const double x = ((u_p - u_m) * u + u_m) / v + mode;
      if (x <= 0.0) continue;
      if (v <= sqrt_ratio(x)) return x;
    }
  }

  const double mode = beta / (std::sqrt((1.0 - p) * (1.0 - p) + beta * beta) + (1.0 - p));
  if (beta <= std::min(0.5, 2.0 / 3.0 * std::sqrt(1.0 - p))) {
    // dominating density made of three pieces: constant, power, exponential
    const double x0 = beta / (1.0 - p);
    const double xs = std::max(x0, two_d_beta);
    const double k1 = std::exp(log_kernel(mode));
    const double a1 = k1 * x0;
    double k2 = 0.0;
    double a2 = 0.0;
    double x0_pow = 1.0;
    if (x0 < two_d_beta) {
      k2 = std::exp(-beta);
      if (p > 0.0) {
        x0_pow = std::pow(x0, p);
        a2 = k2 * (std::pow(two_d_beta, p) - x0_pow) / p;
      } else {
        a2 = k2 * std::log(two_d_beta / beta);
      }
    }
    const double k3 = std::pow(xs, p - 1.0);
    const double a3 = 2.0 * k3 * std::exp(-xs / two_d_beta) / beta;
    const double total = a1 + a2 + a3;
    while (true) {
      const double u = unif(rng);
      double v = unif(rng) * total;
      double x = 0.0;
      double bound = 0.0;
      if (v <= a1) {
        x = x0 * v / a1;
        bound = k1;
      } else if (v <= a1 + a2) {
        v -= a1;
        x = p > 0.0 ? std::pow(x0_pow + v * p / k2, 1.0 / p) : beta * std::exp(v * std::exp(beta));
        bound = k2 * std::pow(x, p - 1.0);
      } else {
        v -= a1 + a2;
        x = -two_d_beta * std::log(std::exp(-xs / two_d_beta) - v / (k3 * two_d_beta));
        bound = k3 * std::exp(-x / two_d_beta);
      }
      if (x > 0.0 && u * bound < std::exp(log_kernel(x))) return x;
    }
  }

  // ratio of uniforms without mode shift
  const double x_p = (1.0 + p + std::sqrt((1.0 + p) * (1.0 + p) + beta * beta)) / beta;
  const double v_p = std::exp(0.5 * log_kernel(mode));
  const double u_p = x_p * std::exp(0.5 * log_kernel(x_p));
  while (true) {
    const double u = unif(rng) * u_p;
    const double v = unif(rng) * v_p;
    const double x = u / v;
    if (x > 0.0 && v < std::exp(0.5 * log_kernel(x))) return x;
  }
}

}  // namespace detail

/// One GIG draw; the caller owns the generator.
template <typename Rng>
double gig_sample(const GigParams& g, Rng& rng) {
  g.validate();
  const double alpha = std::sqrt(g.psi / g.chi);
  const double beta = std::sqrt(g.psi * g.chi);
  double x = detail::sample_standard_gig(std::abs(g.lambda), beta, rng);
  if (g.lambda < 0.0) x = 1.0 / x;
  return x / alpha;
}

}  // namespace mhthfa
