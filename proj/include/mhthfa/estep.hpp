#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mhthfa/errors.hpp"
#include "mhthfa/gig.hpp"
#include "mhthfa/hthfa.hpp"
#include "mhthfa/types.hpp"

namespace mhthfa {

/// Conditional expectations for one observation under one component.
/// a = E[W|x], b = E[1/W|x], c = E[log W|x], s1 = E[U/W|x], s2 = E[UU'/W|x],
/// s3 = E[V/W|x], s4 = E[VV'/W|x], s5 = E[VU'/W|x] (U the rescaled factors).
struct ObservationExpectations {
  double log_density = 0.0;
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  Vector s1;
  Matrix s2;
  Vector s3;
  Matrix s4;
  Matrix s5;
};

struct VMoments {
  Vector s3;
  Matrix s4;
};

struct UMoments {
  Vector s1;
  Matrix s2;
  Matrix s5;
};

/// Factor moments given the W and V moments, from U | x, v, w ~ N(C(d + Lambda(v - a_lambda)), wC).
inline UMoments expected_u_moments(const Vector& x, const FactorComponent& c, const DerivedComponent& dc,
                                   const Vector& s3, const Matrix& s4, double b) {
  const Vector d = dc.BtDinv * (x - c.mu);
  const Vector e = d - c.Lambda * dc.a_lambda;
  const Vector ls3 = c.Lambda * s3;
  UMoments out;
  out.s1 = dc.C * (b * e + ls3);
  Matrix inner = b * e * e.transpose() + e * ls3.transpose() + ls3 * e.transpose() +
                 c.Lambda * s4 * c.Lambda.transpose();
  out.s2 = dc.C * inner * dc.C + dc.C;
  out.s2 = (0.5 * (out.s2 + out.s2.transpose())).eval();
  out.s5 = (s3 * e.transpose() + s4 * c.Lambda.transpose()) * dc.C;
  return out;
}

/// All expectations on one fixed node layout; the log density comes from the same nodes.
inline ObservationExpectations component_expectations(const Vector& x, const FactorComponent& c,
                                                      const DerivedComponent& dc, const GigGridOptions& opt = {}) {
  const HthLaw& law = *dc.law;
  const HthPoint pt = law.point(x);
  const GigGrid grid = law.posterior_grid(pt, opt);
  const TruncatedNormalOrthant& tn = law.truncated_normal();
  const Index r = law.r();
  const std::size_t m = grid.t.size();
  std::vector<double> ell(m);
  std::vector<TruncatedNormalOrthant::Moments> mom(m);
  for (std::size_t j = 0; j < m; ++j) {
    const double w = pt.rho * std::exp(grid.t[j]);
    mom[j] = tn.moments(pt.k, w);
    ell[j] = grid.log_weight[j] + mom[j].log_prob;
  }
  const double log_h = log_sum_exp(ell);
  if (!std::isfinite(log_h)) throw DegenerateLikelihood("component_expectations: posterior of W has no mass");
  ObservationExpectations out;
  out.log_density = law.log_symmetric_part(pt) + log_h;
  out.s3 = Vector::Zero(r);
  out.s4 = Matrix::Zero(r, r);
  const double log_rho = std::log(pt.rho);
  for (std::size_t j = 0; j < m; ++j) {
    const double pj = std::exp(ell[j] - log_h);
    if (pj == 0.0) continue;
    const double w = pt.rho * std::exp(grid.t[j]);
    out.a += pj * w;
    out.b += pj / w;
    out.c += pj * (log_rho + grid.t[j]);
    out.s3 += (pj / w) * mom[j].mean;
    out.s4 += (pj / w) * mom[j].second;
  }
  out.s4 = (0.5 * (out.s4 + out.s4.transpose())).eval();
  UMoments u = expected_u_moments(x, c, dc, out.s3, out.s4, out.b);
  out.s1 = std::move(u.s1);
  out.s2 = std::move(u.s2);
  out.s5 = std::move(u.s5);
  return out;
}

namespace detail {

// Halve the panel width until every entry agrees with the previous level.
template <typename F>
Vector refine_vector(F&& compute, double tolerance = 1e-9) {
  GigGridOptions opt;
  Vector previous = compute(opt);
  for (int level = 0; level < 6; ++level) {
    opt.panel_sigmas *= 0.5;
    Vector current = compute(opt);
    const double scale = std::max(1.0, current.cwiseAbs().maxCoeff());
    if ((current - previous).cwiseAbs().maxCoeff() <= tolerance * scale) return current;
    previous = std::move(current);
  }
  return previous;
}

inline double log_orthant_expectation(const HthLaw& law, const HthPoint& pt, double shift,
                                      const GigGridOptions& opt) {
  const GigGrid grid = law.posterior_grid(pt, opt, shift);
  std::vector<double> terms(grid.t.size());
  for (std::size_t j = 0; j < grid.t.size(); ++j)
    terms[j] = grid.log_weight[j] + law.truncated_normal().log_prob(pt.y, std::exp(grid.t[j]));
  return log_sum_exp(terms);
}

}  // namespace detail

struct WMoments {
  double a;  // E[W | x]
  double b;  // E[1/W | x]
};

/// Bessel ratio at sqrt(omega (omega + delta)) times a ratio of orthant expectations with shifted index.
inline WMoments expected_w_and_inv(const Vector& x, const DerivedComponent& dc) {
  const HthLaw& law = *dc.law;
  const HthPoint pt = law.point(x);
  const double nu = law.lambda() - 0.5 * static_cast<double>(law.p());
  const Vector h = detail::refine_vector([&](const GigGridOptions& opt) {
    return Vector{{detail::log_orthant_expectation(law, pt, 0.0, opt),
                   detail::log_orthant_expectation(law, pt, 1.0, opt),
                   detail::log_orthant_expectation(law, pt, -1.0, opt)}};
  });
  if (!h.allFinite()) throw DegenerateLikelihood("expected_w_and_inv: orthant expectation underflows");
  const double up = log_bessel_k_ratio(nu, 1.0, pt.gamma) + h[1] - h[0];
  const double down = log_bessel_k_ratio(nu, -1.0, pt.gamma) + h[2] - h[0];
  return {pt.rho * std::exp(up), std::exp(down) / pt.rho};
}

inline double expected_log_w(const Vector& x, const FactorComponent& c, const DerivedComponent& dc) {
  return detail::refine_vector([&](const GigGridOptions& opt) {
    return Vector::Constant(1, component_expectations(x, c, dc, opt).c);
  })[0];
}

inline VMoments expected_v_moments(const Vector& x, const FactorComponent& c, const DerivedComponent& dc) {
  const Index r = c.r();
  const Vector packed = detail::refine_vector([&](const GigGridOptions& opt) {
    const ObservationExpectations e = component_expectations(x, c, dc, opt);
    Vector v(r + r * r);
    v.head(r) = e.s3;
    v.tail(r * r) = e.s4.reshaped();
    return v;
  });
  return {packed.head(r), packed.tail(r * r).reshaped(r, r)};
}

}  // namespace mhthfa
