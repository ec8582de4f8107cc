#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "mhthfa/errors.hpp"
#include "mhthfa/quadrature.hpp"
#include "mhthfa/types.hpp"

namespace mhthfa {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;
inline constexpr double kLog2 = 0.69314718055994530942;

namespace detail {

// 1/Gamma(z) = sum_{k>=1} c[k-1] z^k, accurate for |z| <= 1/2.
inline constexpr std::array<double, 26> kRecipGammaSeries = {
    1.0,
    0.5772156649015329,
    -0.6558780715202538,
    -0.0420026350340952,
    0.1665386113822915,
    -0.0421977345555443,
    -0.0096219715278770,
    0.0072189432466630,
    -0.0011651675918591,
    -0.0002152416741149,
    0.0001280502823882,
    -0.0000201348547807,
    -0.0000012504934821,
    0.0000011330272320,
    -0.0000002056338417,
    0.0000000061160950,
    0.0000000050020075,
    -0.0000000011812746,
    0.0000000001043427,
    0.0000000000077823,
    -0.0000000000036968,
    0.0000000000005100,
    -0.0000000000000206,
    -0.0000000000000054,
    0.0000000000000014,
    0.0000000000000001};

struct LogBesselPair {
  double log_k;  // log K_mu(x), or log(e^x K_mu(x)) when scaled
  double ratio;  // K_{mu+1}(x) / K_mu(x)
};

// Temme's series, |mu| <= 1/2, 0 < x < 2.
inline LogBesselPair bessel_k_temme(double mu, double x) {
  constexpr double eps = 1e-17;
  double gam1 = 0.0;
  double gam2 = 0.0;
  double mu_pow = 1.0;
  for (std::size_t k = 0; k < kRecipGammaSeries.size(); ++k) {
    if (k % 2 == 0) {
      gam2 += kRecipGammaSeries[k] * mu_pow;
    } else {
      gam1 -= kRecipGammaSeries[k] * mu_pow;
      mu_pow *= mu * mu;
    }
  }
  const double gampl = gam2 - mu * gam1;
  const double gammi = gam2 + mu * gam1;

  const double x2 = 0.5 * x;
  const double pimu = std::numbers::pi * mu;
  const double fact = std::abs(pimu) < 1e-15 ? 1.0 : pimu / std::sin(pimu);
  const double d = -std::log(x2);
  double e = mu * d;
  const double fact2 = std::abs(e) < 1e-15 ? 1.0 : std::sinh(e) / e;
  double ff = fact * (gam1 * std::cosh(e) + gam2 * fact2 * d);
  double sum = ff;
  e = std::exp(e);
  double p = 0.5 * e / gampl;
  double q = 0.5 / (e * gammi);
  double c = 1.0;
  const double dd = x2 * x2;
  double sum1 = p;
  for (int i = 1; i < 500; ++i) {
    ff = (i * ff + p + q) / (i * static_cast<double>(i) - mu * mu);
    c *= dd / i;
    p /= (i - mu);
    q /= (i + mu);
    const double del = c * ff;
    sum += del;
    sum1 += c * (p - i * ff);
    if (std::abs(del) < std::abs(sum) * eps) break;
  }
  return {std::log(sum), sum1 * (2.0 / x) / sum};
}

// Steed's continued fraction, |mu| <= 1/2, x >= 2.
inline LogBesselPair bessel_k_steed(double mu, double x, bool scaled = false) {
  constexpr double eps = 1e-17;
  double b = 2.0 * (1.0 + x);
  double d = 1.0 / b;
  double h = d;
  double delh = d;
  double q1 = 0.0;
  double q2 = 1.0;
  const double a1 = 0.25 - mu * mu;
  double q = a1;
  double c = a1;
  double a = -a1;
  double s = 1.0 + q * delh;
  for (int i = 1; i < 100000; ++i) {
    a -= 2 * i;
    c = -a * c / (i + 1.0);
    const double qnew = (q1 - b * q2) / a;
    q1 = q2;
    q2 = qnew;
    q += c * qnew;
    b += 2.0;
    d = 1.0 / (b + a * d);
    delh = (b * d - 1.0) * delh;
    h += delh;
    const double dels = q * delh;
    s += dels;
    if (std::abs(dels / s) < eps) break;
  }
  h *= a1;
  const double log_k = 0.5 * std::log(std::numbers::pi / (2.0 * x)) - (scaled ? 0.0 : x) - std::log(s);
  return {log_k, (mu + x + 0.5 - h) / x};
}

// log K_nu(x) and K_{nu+1}/K_nu for nu >= 0 by upward ratio recurrence.
inline LogBesselPair log_bessel_k_nonneg(double nu, double x, bool scaled = false) {
  const double nl = std::round(nu);
  const double mu = nu - nl;
  LogBesselPair base = x < 2.0 ? bessel_k_temme(mu, x) : bessel_k_steed(mu, x, scaled);
  if (scaled && x < 2.0) base.log_k += x;
  double log_k = base.log_k;
  double ratio = base.ratio;
  const int steps = static_cast<int>(nl);
  for (int i = 1; i <= steps; ++i) {
    log_k += std::log(ratio);
    ratio = 2.0 * (mu + i) / x + 1.0 / ratio;
  }
  return {log_k, ratio};
}

inline void check_bessel_args(double order, double x, const char* who) {
  if (!(x > 0.0) || !std::isfinite(x)) throw DomainError(std::string(who) + ": x must be positive and finite");
  if (!std::isfinite(order)) throw DomainError(std::string(who) + ": order must be finite");
}

}  // namespace detail

/// log K_order(x); finite wherever K itself over- or underflows.
inline double log_bessel_k(double order, double x) {
  detail::check_bessel_args(order, x, "log_bessel_k");
  return detail::log_bessel_k_nonneg(std::abs(order), x).log_k;
}

/// log(e^x K_order(x)), free of the rounding that log K carries for large x.
inline double log_bessel_k_scaled(double order, double x) {
  detail::check_bessel_args(order, x, "log_bessel_k_scaled");
  return detail::log_bessel_k_nonneg(std::abs(order), x, true).log_k;
}

inline double bessel_k(double order, double x) {
  const double lk = log_bessel_k(order, x);
  if (lk > std::log(std::numeric_limits<double>::max()))
    throw OverflowError("bessel_k: result overflows; use log_bessel_k");
  if (lk < std::log(std::numeric_limits<double>::min()))
    throw OverflowError("bessel_k: result underflows; use log_bessel_k");
  return std::exp(lk);
}

/// log(K_{order+shift}(x) / K_order(x)).
inline double log_bessel_k_ratio(double order, double shift, double x) {
  return log_bessel_k_scaled(order + shift, x) - log_bessel_k_scaled(order, x);
}

/// d/dnu log K_nu(x) at nu = order, central difference with h = max(1e-5, 1e-5 |order|).
inline double d_log_bessel_k_dorder(double order, double x) {
  detail::check_bessel_args(order, x, "d_log_bessel_k_dorder");
  if (order == 0.0) return 0.0;
  const double h = std::max(1e-5, 1e-5 * std::abs(order));
  return (log_bessel_k_scaled(order + h, x) - log_bessel_k_scaled(order - h, x)) / (2.0 * h);
}

/// d/dx log K_nu(x) = nu/x - K_{nu+1}(x)/K_nu(x).
inline double d_log_bessel_k_dx(double order, double x) {
  detail::check_bessel_args(order, x, "d_log_bessel_k_dx");
  if (order >= 0.0) return order / x - detail::log_bessel_k_nonneg(order, x).ratio;
  // K_{nu+1} = K_{-nu-1} for nu < 0
  return order / x - std::exp(log_bessel_k_ratio(order, 1.0, x));
}

inline double std_normal_log_pdf(double x) { return -0.5 * x * x - kLogSqrt2Pi; }

inline double std_normal_cdf(double x) {
  if (std::isnan(x)) throw DomainError("std_normal_cdf: NaN argument");
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

/// log Phi(x) with full relative accuracy in both tails.
inline double log_std_normal_cdf(double x) {
  if (std::isnan(x)) throw DomainError("log_std_normal_cdf: NaN argument");
  if (x > 5.0) return std::log1p(-0.5 * std::erfc(x / std::numbers::sqrt2));
  if (x > -37.0) return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2));
  if (x == -std::numeric_limits<double>::infinity()) return x;
  // Mills-ratio asymptotic series
  const double z2 = 1.0 / (x * x);
  double term = 1.0;
  double series = 1.0;
  for (int k = 1; k <= 6; ++k) {
    term *= -(2.0 * k - 1.0) * z2;
    series += term;
  }
  return std_normal_log_pdf(x) - std::log(-x) + std::log(series);
}

/// phi(x) / Phi(x).
inline double inverse_mills(double x) { return std::exp(std_normal_log_pdf(x) - log_std_normal_cdf(x)); }

namespace detail {

struct ConcavePoint {
  double f = 0.0;
  double df = 0.0;
  double d2f = -1.0;
};

inline constexpr int kPanelNodes = 12;
inline constexpr double kLogDrop = 37.0;
inline constexpr double kMaxReach = 9.0;

// log of the integral of exp(f) over (-inf, upper] for f with f'' <= -1.
// eval(z, with_derivatives) returns f(z) and, on request, f'(z), f''(z).
template <typename Eval>
double log_integrate_concave(Eval&& eval, double upper) {
  ConcavePoint cur = eval(upper, true);
  double z = upper;
  if (cur.df < 0.0) {
    double lo = -std::numeric_limits<double>::infinity();
    double hi = upper;
    for (int iter = 0; iter < 60; ++iter) {
      if (cur.df > 0.0) lo = z;
      else if (cur.df < 0.0) hi = z;
      else break;
      const double step = -cur.df / cur.d2f;
      if (std::abs(step) < 1e-13 * (1.0 + std::abs(z))) break;
      double next = z + step;
      if (!(next > lo && next < hi)) next = std::isfinite(lo) ? 0.5 * (lo + hi) : hi - 1.0;
      z = next;
      cur = eval(z, true);
    }
  }
  const double fmax = cur.f;
  double h = 1.0 / std::sqrt(std::max(-cur.d2f, 1.0));
  if (z >= upper && cur.df > 0.0) h = std::min(h, 1.0 / cur.df);

  const auto& rule = gauss_legendre(kPanelNodes);
  double sum = 0.0;
  auto panel = [&](double a, double b) {
    const double half = 0.5 * (b - a);
    const double mid = 0.5 * (b + a);
    double s = 0.0;
    for (int i = 0; i < kPanelNodes; ++i) s += rule.weights[i] * std::exp(eval(mid + half * rule.nodes[i], false).f - fmax);
    sum += half * s;
  };
  // Geometric panels z - [0, h], [h, 2h], [2h, 4h], ... until the integrand has dropped by e^-37.
  auto sweep = [&](double direction, double room) {
    double inner = 0.0;
    double outer = std::min(h, room);
    while (true) {
      if (direction > 0.0) panel(z + inner, z + outer);
      else panel(z - outer, z - inner);
      if (outer >= room || outer >= kMaxReach) break;
      if (eval(z + direction * outer, false).f < fmax - kLogDrop) break;
      inner = outer;
      outer = std::min(2.0 * outer, room);
    }
  };
  sweep(-1.0, std::numeric_limits<double>::infinity());
  if (upper - z > 0.0) sweep(1.0, upper - z);
  return fmax + std::log(sum);
}

// Genz's bivariate upper orthant P(Z1 > h, Z2 > k), absolute error near 1e-15.
inline double bvn_upper_genz(double h, double k, double r) {
  const double two_pi = 2.0 * std::numbers::pi;
  const int n = std::abs(r) < 0.3 ? 6 : (std::abs(r) < 0.75 ? 12 : 20);
  const auto& rule = gauss_legendre(n);
  double hk = h * k;
  double bvn = 0.0;
  if (std::abs(r) < 0.925) {
    const double hs = 0.5 * (h * h + k * k);
    const double asr = std::asin(r);
    for (int i = 0; i < n; ++i) {
      const double sn = std::sin(0.5 * asr * (1.0 + rule.nodes[i]));
      bvn += rule.weights[i] * std::exp((sn * hk - hs) / (1.0 - sn * sn));
    }
    return std::clamp(bvn * asr / (2.0 * two_pi) + std_normal_cdf(-h) * std_normal_cdf(-k), 0.0, 1.0);
  }
  if (r < 0.0) {
    k = -k;
    hk = -hk;
  }
  if (std::abs(r) < 1.0) {
    const double as = (1.0 - r) * (1.0 + r);
    double a = std::sqrt(as);
    const double bs = (h - k) * (h - k);
    const double c = (4.0 - hk) / 8.0;
    const double d = (12.0 - hk) / 16.0;
    bvn = a * std::exp(-0.5 * (bs / as + hk)) * (1.0 - c * (bs - as) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as * as / 5.0);
    if (hk > -160.0) {
      const double b = std::sqrt(bs);
      bvn -= std::exp(-0.5 * hk) * std::sqrt(two_pi) * std_normal_cdf(-b / a) * b *
             (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
    }
    a *= 0.5;
    for (int i = 0; i < n; ++i) {
      const double xs = std::pow(a * (rule.nodes[i] + 1.0), 2);
      const double rs = std::sqrt(1.0 - xs);
      bvn += a * rule.weights[i] *
             (std::exp(-bs / (2.0 * xs) - hk / (1.0 + rs)) / rs - std::exp(-0.5 * (bs / xs + hk)) * (1.0 + c * xs * (1.0 + d * xs)));
    }
    bvn = -bvn / two_pi;
  }
  if (r > 0.0) return std::clamp(bvn + std_normal_cdf(-std::max(h, k)), 0.0, 1.0);
  if (h >= k) return std::clamp(-bvn, 0.0, 1.0);
  const double band = h < 0.0 ? std_normal_cdf(k) - std_normal_cdf(h) : std_normal_cdf(-h) - std_normal_cdf(-k);
  return std::clamp(band - bvn, 0.0, 1.0);
}

// log P(Z1 <= y1, Z2 <= y2) for unit variances and correlation rho.
inline double log_bvn_std(double y1, double y2, double rho) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  if (y1 == -inf || y2 == -inf) return -inf;
  if (y1 == inf) return log_std_normal_cdf(y2);
  if (y2 == inf) return log_std_normal_cdf(y1);
  if (std::abs(rho) < 1e-15) return log_std_normal_cdf(y1) + log_std_normal_cdf(y2);
  const double s = std::sqrt((1.0 - rho) * (1.0 + rho));
  if (s < 1e-9) {
    if (rho > 0.0) return log_std_normal_cdf(std::min(y1, y2));
    const double p = std_normal_cdf(y1) - std_normal_cdf(-y2);
    return p > 0.0 ? std::log(p) : -inf;
  }
  // the closed form is accurate in absolute terms, so it is used only away from the far tail
  const double direct = bvn_upper_genz(-y1, -y2, rho);
  if (direct > 1e-5) return std::log(direct);
  const double outer = std::min(y1, y2);
  const double inner = std::max(y1, y2);
  const double slope = rho / s;
  auto eval = [&](double z, bool with_derivatives) {
    const double c = (inner - rho * z) / s;
    const double lp = log_std_normal_cdf(c);
    ConcavePoint pt;
    pt.f = std_normal_log_pdf(z) + lp;
    if (with_derivatives) {
      const double m = std::exp(std_normal_log_pdf(c) - lp);
      pt.df = -z - slope * m;
      pt.d2f = -1.0 - slope * slope * m * (c + m);
    }
    return pt;
  };
  return log_integrate_concave(eval, outer);
}

// Gauss-Kronrod 7/15 on [a, b], splitting the worst interval until the error estimate is below tol.
template <typename F>
double integrate_kronrod(F&& f, double a, double b, double tol) {
  static constexpr std::array<double, 8> xk = {
      0.991455371120812639206854697526329, 0.949107912342758524526189684047851, 0.864864423359769072789712788640926,
      0.741531185599394439863864773280788, 0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
      0.207784955007898467600689403773245, 0.0};
  static constexpr std::array<double, 8> wk = {
      0.022935322010529224963732008058970, 0.063092092629978553290700663189204, 0.104790010322250183839876322541518,
      0.140653259715525918745189590510238, 0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
      0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
  static constexpr std::array<double, 4> wg = {0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
                                               0.381830050505118944950369775488975, 0.417959183673469387755102040816327};
  struct Piece {
    double a, b, value, error;
  };
  auto rule = [&](double lo, double hi) {
    const double half = 0.5 * (hi - lo);
    const double mid = 0.5 * (hi + lo);
    std::array<double, 15> fx;
    fx[14] = f(mid);
    double k = wk[7] * fx[14];
    double g = wg[3] * fx[14];
    for (int i = 0; i < 7; ++i) {
      fx[2 * i] = f(mid - half * xk[i]);
      fx[2 * i + 1] = f(mid + half * xk[i]);
      const double sum = fx[2 * i] + fx[2 * i + 1];
      k += wk[i] * sum;
      if (i % 2 == 1) g += wg[i / 2] * sum;
    }
    // QUADPACK's estimate: the raw Kronrod-Gauss gap scaled against the spread of f
    const double mean = 0.5 * k;
    double spread = wk[7] * std::abs(fx[14] - mean);
    for (int i = 0; i < 7; ++i) spread += wk[i] * (std::abs(fx[2 * i] - mean) + std::abs(fx[2 * i + 1] - mean));
    double error = std::abs(half * (k - g));
    spread *= std::abs(half);
    if (spread > 0.0 && error > 0.0) error = spread * std::min(1.0, std::pow(200.0 * error / spread, 1.5));
    return Piece{lo, hi, half * k, error};
  };
  std::vector<Piece> pieces{rule(a, b)};
  for (int split = 0; split < 100; ++split) {
    double total = 0.0;
    std::size_t worst = 0;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      total += pieces[i].error;
      if (pieces[i].error > pieces[worst].error) worst = i;
    }
    if (total <= tol) break;
    const Piece p = pieces[worst];
    const double mid = 0.5 * (p.a + p.b);
    pieces[worst] = rule(p.a, mid);
    pieces.push_back(rule(mid, p.b));
  }
  double value = 0.0;
  for (const Piece& p : pieces) value += p.value;
  return value;
}

// Genz's trivariate P(Z <= h) for a correlation matrix given by r12, r13, r23, absolute error near 1e-14.
// Plackett's identity moves r12, r13 to zero along arcsine paths from Phi(h1) P(Z2 <= h2, Z3 <= h3).
inline double tvn_genz(std::array<double, 3> h, double r12, double r13, double r23) {
  // the strongest correlation stays fixed as r23
  if (std::abs(r12) > std::abs(r23) && std::abs(r12) >= std::abs(r13)) {
    std::swap(h[0], h[2]);
    std::swap(r12, r23);
  } else if (std::abs(r13) > std::abs(r23)) {
    std::swap(h[0], h[1]);
    std::swap(r13, r23);
  }
  const double bvn23 = bvn_upper_genz(-h[1], -h[2], r23);
  double p = std_normal_cdf(h[0]) * bvn23;
  const double a12 = std::asin(r12);
  const double a13 = std::asin(r13);
  if (a12 == 0.0 && a13 == 0.0) return std::clamp(p, 0.0, 1.0);
  // density of the (i, j) pair at correlation sin(x a) times the conditional CDF of the third variable
  auto pair_term = [&](double ba, double bb, double bc, double ra, double rb, double r, double rr) {
    const double dt = rr * (rr - (ra - rb) * (ra - rb) - 2.0 * ra * rb * (1.0 - r));
    if (!(dt > 0.0)) return 0.0;
    const double bt = (bc * rr + ba * (r * rb - ra) + bb * (r * ra - rb)) / std::sqrt(dt);
    const double ft = (ba - r * bb) * (ba - r * bb) / rr + bb * bb;
    if (bt <= -10.0 || ft >= 100.0) return 0.0;
    const double e = std::exp(-0.5 * ft);
    return bt < 10.0 ? e * std_normal_cdf(bt) : e;
  };
  auto sin_cos2 = [](double x, double& s, double& c2) {
    const double ee = std::pow(0.5 * std::numbers::pi - std::abs(x), 2);
    if (ee < 5e-5) {
      s = std::copysign(1.0 - ee * (1.0 - ee / 12.0) / 2.0, x);
      c2 = ee * (1.0 - ee * (1.0 - 2.0 * ee / 15.0) / 3.0);
    } else {
      s = std::sin(x);
      c2 = 1.0 - s * s;
    }
  };
  auto integrand = [&](double x) {
    double out = 0.0;
    double s12, c12, s13, c13;
    sin_cos2(a12 * x, s12, c12);
    sin_cos2(a13 * x, s13, c13);
    if (a12 != 0.0) out += a12 * pair_term(h[0], h[1], h[2], s13, r23, s12, c12);
    if (a13 != 0.0) out += a13 * pair_term(h[0], h[2], h[1], s12, r23, s13, c13);
    return out;
  };
  p += integrate_kronrod(integrand, 0.0, 1.0, 1e-13) / (2.0 * std::numbers::pi);
  return std::clamp(p, 0.0, 1.0);
}

struct BvnDerivatives {
  double log_p;
  double g1, g2;  // gradient of log P
  double h11, h12, h22;  // Hessian of log P
};

// log P(Z1 <= v1, Z2 <= v2) with derivatives in (v1, v2), unit variances, correlation rho.
inline BvnDerivatives log_bvn_std_derivatives(double v1, double v2, double rho) {
  BvnDerivatives out{};
  out.log_p = log_bvn_std(v1, v2, rho);
  const double s = std::max(std::sqrt((1.0 - rho) * (1.0 + rho)), 1e-9);
  const double c1 = (v2 - rho * v1) / s;
  const double c2 = (v1 - rho * v2) / s;
  const double lphi1 = std_normal_log_pdf(v1);
  const double lphi2 = std_normal_log_pdf(v2);
  out.g1 = std::exp(lphi1 + log_std_normal_cdf(c1) - out.log_p);
  out.g2 = std::exp(lphi2 + log_std_normal_cdf(c2) - out.log_p);
  const double joint = std::exp(lphi1 + std_normal_log_pdf(c1) - out.log_p) / s;
  out.h11 = -v1 * out.g1 - rho * joint - out.g1 * out.g1;
  out.h22 = -v2 * out.g2 - rho * joint - out.g2 * out.g2;
  out.h12 = joint - out.g1 * out.g2;
  return out;
}

}  // namespace detail

/// Orthant probabilities P(Z <= u) for Z ~ N_r(0, covariance), r <= 3, with the
/// covariance factorization done once so repeated evaluations only pay for the integral.
class GaussianOrthant {
 public:
  explicit GaussianOrthant(const Matrix& covariance) {
    if (covariance.rows() != covariance.cols())
      throw DimensionMismatch("GaussianOrthant: covariance must be square");
    r_ = static_cast<int>(covariance.rows());
    if (r_ > 3) throw UnsupportedDimension("GaussianOrthant: dimension above 3 is not supported");
    if (!covariance.allFinite()) throw DomainError("GaussianOrthant: covariance has non-finite entries");
    if ((covariance - covariance.transpose()).cwiseAbs().maxCoeff() >
        1e-10 * std::max(1.0, covariance.cwiseAbs().maxCoeff()))
      throw NonSpdError("GaussianOrthant: covariance is not symmetric");
    if (r_ == 0) return;
    Eigen::LLT<Matrix> llt(covariance);
    if (llt.info() != Eigen::Success) throw NonSpdError("GaussianOrthant: covariance is not positive definite");
    cov_ = covariance;
    scale_ = covariance.diagonal().cwiseSqrt();
    corr_ = scale_.cwiseInverse().asDiagonal() * covariance * scale_.cwiseInverse().asDiagonal();
    if (r_ == 3) {
      for (int j = 0; j < 3; ++j) {
        const int k = (j + 1) % 3;
        const int l = (j + 2) % 3;
        Conditional& c = cond_[j];
        c.k = std::min(k, l);
        c.l = std::max(k, l);
        c.beta_k = corr_(c.k, j);
        c.beta_l = corr_(c.l, j);
        const double s11 = 1.0 - c.beta_k * c.beta_k;
        const double s22 = 1.0 - c.beta_l * c.beta_l;
        const double s12 = corr_(c.k, c.l) - c.beta_k * c.beta_l;
        c.sd_k = std::sqrt(std::max(s11, 0.0));
        c.sd_l = std::sqrt(std::max(s22, 0.0));
        c.rho = std::clamp(s12 / (c.sd_k * c.sd_l), -1.0, 1.0);
      }
    }
  }

  int dim() const { return r_; }
  const Matrix& covariance() const { return cov_; }

  double log_cdf(const Vector& upper) const {
    if (upper.size() != r_) throw DimensionMismatch("GaussianOrthant: upper has wrong length");
    constexpr double inf = std::numeric_limits<double>::infinity();
    if (r_ == 0) return 0.0;
    bool any_pos_inf = false;
    for (int i = 0; i < r_; ++i) {
      if (std::isnan(upper[i])) throw DomainError("GaussianOrthant: NaN bound");
      if (upper[i] == -inf) return -inf;
      if (upper[i] == inf) any_pos_inf = true;
    }
    if (any_pos_inf) return log_cdf_marginal(upper);
    const Vector y = upper.cwiseQuotient(scale_);
    if (r_ == 1) return log_std_normal_cdf(y[0]);
    if (r_ == 2) return detail::log_bvn_std(y[0], y[1], corr_(0, 1));
    return log_tvn_std(y);
  }

  double cdf(const Vector& upper) const { return std::exp(log_cdf(upper)); }

 private:
  struct Conditional {
    int k = 0, l = 0;
    double beta_k = 0.0, beta_l = 0.0;
    double sd_k = 1.0, sd_l = 1.0;
    double rho = 0.0;
  };

  double log_cdf_marginal(const Vector& upper) const {
    std::vector<int> keep;
    for (int i = 0; i < r_; ++i)
      if (std::isfinite(upper[i])) keep.push_back(i);
    const int m = static_cast<int>(keep.size());
    Matrix sub(m, m);
    Vector u(m);
    for (int a = 0; a < m; ++a) {
      u[a] = upper[keep[a]];
      for (int b = 0; b < m; ++b) sub(a, b) = cov_(keep[a], keep[b]);
    }
    return GaussianOrthant(sub).log_cdf(u);
  }

  // Outer integral over the coordinate with the smallest standardized bound.
  double log_tvn_std(const Vector& y) const {
    int j = 0;
    for (int i = 1; i < 3; ++i)
      if (y[i] < y[j]) j = i;
    const Conditional& c = cond_[j];
    const double yk = y[c.k];
    const double yl = y[c.l];
    if (c.sd_k < 1e-9 || c.sd_l < 1e-9)
      throw NonSpdError("GaussianOrthant: covariance is numerically singular");
    const double direct = detail::tvn_genz({y[0], y[1], y[2]}, corr_(0, 1), corr_(0, 2), corr_(1, 2));
    if (direct > 1e-5) return std::log(direct);
    const double tk = -c.beta_k / c.sd_k;
    const double tl = -c.beta_l / c.sd_l;
    auto eval = [&](double z, bool with_derivatives) {
      const double v1 = (yk - c.beta_k * z) / c.sd_k;
      const double v2 = (yl - c.beta_l * z) / c.sd_l;
      detail::ConcavePoint pt;
      if (!with_derivatives) {
        pt.f = std_normal_log_pdf(z) + detail::log_bvn_std(v1, v2, c.rho);
        return pt;
      }
      const detail::BvnDerivatives d = detail::log_bvn_std_derivatives(v1, v2, c.rho);
      pt.f = std_normal_log_pdf(z) + d.log_p;
      pt.df = -z + tk * d.g1 + tl * d.g2;
      pt.d2f = -1.0 + tk * tk * d.h11 + 2.0 * tk * tl * d.h12 + tl * tl * d.h22;
      pt.d2f = std::min(pt.d2f, -1.0);
      return pt;
    };
    return detail::log_integrate_concave(eval, y[j]);
  }

  int r_ = 0;
  Matrix cov_;
  Vector scale_;
  Matrix corr_;
  std::array<Conditional, 3> cond_{};
};

/// log P(Z <= upper) for Z ~ N_r(0, covariance), 0 <= r <= 3.
inline double log_mvn_orthant_cdf(const Vector& upper, const Matrix& covariance) {
  return GaussianOrthant(covariance).log_cdf(upper);
}

inline double mvn_orthant_cdf(const Vector& upper, const Matrix& covariance) {
  return std::exp(log_mvn_orthant_cdf(upper, covariance));
}

}  // namespace mhthfa
