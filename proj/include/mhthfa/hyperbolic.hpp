#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "mhthfa/errors.hpp"
#include "mhthfa/gig.hpp"
#include "mhthfa/special_math.hpp"
#include "mhthfa/types.hpp"

namespace mhthfa {

/// Arguments of the symmetric hyperbolic law: mu + sqrt(W) Z, Z ~ N(0, sigma), W ~ GIG(psi, chi, lambda).
struct SymHypParams {
  Vector mu;
  Matrix sigma;
  double lambda = 1.0;
  double psi = 1.0;
  double chi = 1.0;

  GigParams mixing() const { return {psi, chi, lambda}; }
};

/// Skew-normal law with location mu, scale sigma and skewness matrix skew (p x r).
struct SkewNormalParams {
  Vector mu;
  Matrix sigma;
  Matrix skew;
};

namespace detail {

inline Eigen::LLT<Matrix> spd_factor(const Matrix& m, const char* who) {
  if (m.rows() != m.cols()) throw DimensionMismatch(std::string(who) + ": matrix must be square");
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success || !m.allFinite())
    throw NonSpdError(std::string(who) + ": matrix is not positive definite");
  return llt;
}

inline double log_det(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

}  // namespace detail

inline double mahalanobis_sq(const Vector& x, const Vector& mu, const Matrix& sigma) {
  if (x.size() != mu.size() || sigma.rows() != x.size())
    throw DimensionMismatch("mahalanobis_sq: dimensions disagree");
  const auto llt = detail::spd_factor(sigma, "mahalanobis_sq");
  const Vector z = llt.matrixL().solve(x - mu);
  return z.squaredNorm();
}

/// log h_p(x) from the Bessel closed form, given delta = (x-mu)' sigma^-1 (x-mu) and log|sigma|.
inline double sym_hyp_log_density_from_delta(double delta, double log_det_sigma, int p, double lambda, double psi,
                                             double chi) {
  const double lp = lambda - 0.5 * p;
  const double outer = std::sqrt(psi * (chi + delta));
  const double inner = std::sqrt(chi * psi);
  // outer - inner, without cancellation
  const double gap = psi * delta / (outer + inner);
  return 0.5 * lp * std::log1p(delta / chi) + 0.5 * lp * std::log(chi / psi) + 0.5 * lambda * std::log(psi / chi) +
         log_bessel_k_scaled(lp, outer) - log_bessel_k_scaled(lambda, inner) - gap - p * kLogSqrt2Pi -
         0.5 * log_det_sigma;
}

inline double sym_hyp_log_density(const Vector& x, const SymHypParams& params) {
  params.mixing().validate();
  if (x.size() != params.mu.size() || params.sigma.rows() != x.size())
    throw DimensionMismatch("sym_hyp_log_density: dimensions disagree");
  const auto llt = detail::spd_factor(params.sigma, "sym_hyp_log_density");
  const double delta = llt.matrixL().solve(x - params.mu).squaredNorm();
  return sym_hyp_log_density_from_delta(delta, detail::log_det(llt), static_cast<int>(x.size()), params.lambda,
                                        params.psi, params.chi);
}

/// log E[Phi_r(y / sqrt(W) | cov)] over W ~ GIG(mixing), on a caller-supplied grid.
inline double log_gig_orthant_expectation(const Vector& y, const GaussianOrthant& orthant, const GigGrid& grid) {
  std::vector<double> terms(grid.t.size());
  for (std::size_t j = 0; j < grid.t.size(); ++j)
    terms[j] = grid.log_weight[j] + orthant.log_cdf(y * std::exp(-0.5 * grid.t[j]));
  return log_sum_exp(terms);
}

/// Reference laws that bracket the W-posterior tilted by Phi_r(y / sqrt(W)).
inline std::vector<GigParams> orthant_tilt_references(const GigParams& base, const Vector& y, const Matrix& cov) {
  const double extra = y.size() == 0 ? 0.0 : y.dot(cov.llt().solve(y));
  if (extra > 1e-12 * base.chi) return {GigParams{base.psi, base.chi + extra, base.lambda}};
  return {};
}

namespace detail {

// Repeats a grid computation with halved panel widths until two results agree.
template <typename F>
double refine_over_grids(F&& compute, double relative_tolerance = 1e-8) {
  GigGridOptions opt;
  opt.panel_sigmas = 4.0;
  double previous = compute(opt);
  for (int level = 0; level < 6; ++level) {
    opt.panel_sigmas *= 0.5;
    const double current = compute(opt);
    if (std::abs(current - previous) <= relative_tolerance * std::max(std::abs(current), 1.0)) return current;
    previous = current;
  }
  return previous;
}

}  // namespace detail

/// log H_r(x) for the symmetric hyperbolic law, r <= 3.
inline double log_sym_hyp_cdf(const Vector& x, const SymHypParams& params) {
  if (x.size() > 3) throw UnsupportedDimension("sym_hyp_cdf: dimension above 3 is not supported");
  if (x.size() != params.mu.size() || params.sigma.rows() != x.size())
    throw DimensionMismatch("sym_hyp_cdf: dimensions disagree");
  const GigParams mix = params.mixing();
  mix.validate();
  const GaussianOrthant orthant(params.sigma);
  const Vector y = x - params.mu;
  if (!y.allFinite()) {
    for (Index i = 0; i < y.size(); ++i)
      if (y[i] == -std::numeric_limits<double>::infinity()) return y[i];
  }
  Vector y_finite = y;
  for (Index i = 0; i < y.size(); ++i)
    if (!std::isfinite(y[i])) y_finite[i] = 0.0;
  const auto refs = orthant_tilt_references(mix, y_finite, params.sigma);
  return detail::refine_over_grids(
      [&](const GigGridOptions& opt) { return log_gig_orthant_expectation(y, orthant, make_gig_grid(mix, refs, opt)); });
}

inline double sym_hyp_cdf(const Vector& x, const SymHypParams& params) {
  return std::exp(log_sym_hyp_cdf(x, params));
}

/// log of 2^r phi_p(y | mu, Omega) Phi_r(skew' Omega^-1 (y - mu) | Delta), Omega = sigma + skew skew'.
inline double skew_normal_log_density(const Vector& y, const SkewNormalParams& params) {
  const Index p = y.size();
  const Index r = params.skew.cols();
  if (params.mu.size() != p || params.sigma.rows() != p || params.skew.rows() != p)
    throw DimensionMismatch("skew_normal_log_density: dimensions disagree");
  if (r > 3) throw UnsupportedDimension("skew_normal_log_density: skewness dimension above 3");
  const Matrix omega = params.sigma + params.skew * params.skew.transpose();
  const auto llt = detail::spd_factor(omega, "skew_normal_log_density");
  const Vector diff = y - params.mu;
  const Matrix omega_inv_skew = llt.solve(params.skew);
  const Matrix delta = Matrix::Identity(r, r) - params.skew.transpose() * omega_inv_skew;
  const double quad = diff.dot(llt.solve(diff));
  const double log_phi = -0.5 * quad - p * kLogSqrt2Pi - 0.5 * detail::log_det(llt);
  if (r == 0) return log_phi;
  const GaussianOrthant orthant(delta);
  return r * kLog2 + log_phi + orthant.log_cdf(omega_inv_skew.transpose() * diff);
}

/// c + phi(c)/Phi(c) and 1 + c (c + phi(c)/Phi(c)) without cancellation for c << 0.
/// These are E[V]/s and E[V^2]/s^2 for V ~ N(c s, s^2) restricted to V >= 0.
struct TruncatedMoments1 {
  double first;
  double second;
};

inline TruncatedMoments1 truncated_standard_moments(double c) {
  if (c > -5.0) {
    const double m = inverse_mills(c);
    const double t = c + m;
    return {t, 1.0 + c * t};
  }
  // Laplace continued fraction of the Mills ratio, x = -c
  const double x = -c;
  double u = 0.0;
  for (int j = 120; j >= 2; --j) u = j / (x + u);
  const double t = 1.0 / (x + u);
  return {t, u * t};
}

/// Moments of V ~ N(m, w Delta) restricted to the positive orthant, r <= 3.
class TruncatedNormalOrthant {
 public:
  struct Moments {
    double log_prob = 0.0;  // log P(V >= 0)
    Vector mean;
    Matrix second;  // E[V V']
  };

  explicit TruncatedNormalOrthant(const Matrix& delta) : orthant_(delta), delta_(delta) {
    r_ = static_cast<int>(delta.rows());
    if (r_ < 1) throw UnsupportedDimension("TruncatedNormalOrthant: dimension must be at least 1");
    if (r_ == 1) return;
    for (int i = 0; i < r_; ++i) {
      std::vector<int> rest;
      for (int k = 0; k < r_; ++k)
        if (k != i) rest.push_back(k);
      Single s;
      s.rest = rest;
      const int m = r_ - 1;
      s.beta = Vector(m);
      Matrix cond(m, m);
      for (int a = 0; a < m; ++a) {
        s.beta[a] = delta(rest[a], i) / delta(i, i);
        for (int b = 0; b < m; ++b) cond(a, b) = delta(rest[a], rest[b]) - delta(rest[a], i) * delta(i, rest[b]) / delta(i, i);
      }
      s.orthant.emplace(cond);
      single_.push_back(std::move(s));
    }
    for (int k = 0; k < r_; ++k) {
      for (int q = k + 1; q < r_; ++q) {
        Pair pr;
        pr.k = k;
        pr.q = q;
        const double dkk = delta(k, k), dqq = delta(q, q), dkq = delta(k, q);
        pr.det = dkk * dqq - dkq * dkq;
        if (r_ == 3) {
          pr.l = 3 - k - q;
          const double dlk = delta(pr.l, k), dlq = delta(pr.l, q);
          pr.gk = (dlk * dqq - dlq * dkq) / pr.det;
          pr.gq = (dlq * dkk - dlk * dkq) / pr.det;
          pr.cond_var = delta(pr.l, pr.l) - (pr.gk * dlk + pr.gq * dlq);
        }
        pairs_.push_back(pr);
      }
    }
  }

  int dim() const { return r_; }

  double log_prob(const Vector& m, double w) const { return orthant_.log_cdf(m / std::sqrt(w)); }

  Moments moments(const Vector& m, double w) const {
    Moments out;
    if (r_ == 1) {
      const double s = std::sqrt(w * delta_(0, 0));
      const double c = m[0] / s;
      const TruncatedMoments1 t = truncated_standard_moments(c);
      out.log_prob = log_std_normal_cdf(c);
      out.mean = Vector::Constant(1, s * t.first);
      out.second = Matrix::Constant(1, 1, s * s * t.second);
      return out;
    }
    const double rw = std::sqrt(w);
    out.log_prob = orthant_.log_cdf(m / rw);
    const Matrix sig = w * delta_;
    const Vector a = -m;  // lower bounds of X = V - m
    Vector f(r_);
    for (int i = 0; i < r_; ++i) {
      const Single& s = single_[i];
      const double log_phi = std_normal_log_pdf(a[i] / std::sqrt(sig(i, i))) - 0.5 * std::log(sig(i, i));
      Vector upper(r_ - 1);
      for (int j = 0; j < r_ - 1; ++j) upper[j] = (s.beta[j] * a[i] - a[s.rest[j]]) / rw;
      f[i] = std::exp(log_phi + s.orthant->log_cdf(upper) - out.log_prob);
    }
    Matrix fpair = Matrix::Zero(r_, r_);
    for (const Pair& pr : pairs_) {
      const double skk = sig(pr.k, pr.k), sqq = sig(pr.q, pr.q), skq = sig(pr.k, pr.q);
      const double det = w * w * pr.det;
      const double quad = (sqq * a[pr.k] * a[pr.k] - 2.0 * skq * a[pr.k] * a[pr.q] + skk * a[pr.q] * a[pr.q]) / det;
      double log_val = -0.5 * quad - 2.0 * kLogSqrt2Pi - 0.5 * std::log(det);
      if (r_ == 3) {
        const double mean_l = pr.gk * a[pr.k] + pr.gq * a[pr.q];
        log_val += log_std_normal_cdf((mean_l - a[pr.l]) / std::sqrt(w * pr.cond_var));
      }
      fpair(pr.k, pr.q) = fpair(pr.q, pr.k) = std::exp(log_val - out.log_prob);
    }
    const Vector ex = sig * f;
    Matrix exx = sig;
    for (int i = 0; i < r_; ++i) {
      for (int j = i; j < r_; ++j) {
        double acc = 0.0;
        for (int k = 0; k < r_; ++k) {
          acc += sig(i, k) * sig(j, k) * a[k] * f[k] / sig(k, k);
          double inner = 0.0;
          for (int q = 0; q < r_; ++q) {
            if (q == k) continue;
            inner += (sig(j, q) - sig(k, q) * sig(j, k) / sig(k, k)) * fpair(k, q);
          }
          acc += sig(i, k) * inner;
        }
        exx(i, j) += acc;
        exx(j, i) = exx(i, j);
      }
    }
    out.mean = m + ex;
    out.second = exx + m * ex.transpose() + ex * m.transpose() + m * m.transpose();
    out.second = (0.5 * (out.second + out.second.transpose())).eval();
    return out;
  }

 private:
  struct Single {
    std::vector<int> rest;
    Vector beta;
    std::optional<GaussianOrthant> orthant;
  };
  struct Pair {
    int k = 0, q = 0, l = 0;
    double det = 1.0;
    double gk = 0.0, gq = 0.0, cond_var = 1.0;
  };

  GaussianOrthant orthant_;
  Matrix delta_;
  int r_ = 0;
  std::vector<Single> single_;
  std::vector<Pair> pairs_;
};

/// Mean and second moment of the symmetric hyperbolic law restricted to the positive orthant.
struct OrthantMoments {
  Vector mean;
  Matrix second_moment;
};

inline OrthantMoments trunc_hyp_orthant_moments(const SymHypParams& params) {
  const Index r = params.mu.size();
  if (r > 3) throw UnsupportedDimension("trunc_hyp_orthant_moments: dimension above 3 is not supported");
  if (r < 1 || params.sigma.rows() != r || params.sigma.cols() != r)
    throw DimensionMismatch("trunc_hyp_orthant_moments: dimensions disagree");
  const GigParams mix = params.mixing();
  mix.validate();
  const TruncatedNormalOrthant tn(params.sigma);
  const auto refs = orthant_tilt_references(mix, -params.mu, params.sigma);

  OrthantMoments result;
  auto compute = [&](const GigGridOptions& opt) {
    const GigGrid grid = make_gig_grid(mix, refs, opt);
    const std::size_t n = grid.t.size();
    std::vector<double> log_terms(n);
    std::vector<TruncatedNormalOrthant::Moments> mom(n);
    for (std::size_t j = 0; j < n; ++j) {
      mom[j] = tn.moments(params.mu, std::exp(grid.t[j]));
      log_terms[j] = grid.log_weight[j] + mom[j].log_prob;
    }
    const double log_total = log_sum_exp(log_terms);
    if (!(log_total > std::log(1e-300)))
      throw DegenerateTruncation("trunc_hyp_orthant_moments: orthant probability below 1e-300");
    result.mean = Vector::Zero(r);
    result.second_moment = Matrix::Zero(r, r);
    for (std::size_t j = 0; j < n; ++j) {
      const double wgt = std::exp(log_terms[j] - log_total);
      if (wgt == 0.0) continue;
      result.mean += wgt * mom[j].mean;
      result.second_moment += wgt * mom[j].second;
    }
    return result.second_moment.trace() + result.mean.sum();
  };
  detail::refine_over_grids(compute);
  return result;
}

}  // namespace mhthfa
