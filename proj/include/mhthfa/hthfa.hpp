#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mhthfa/errors.hpp"
#include "mhthfa/gig.hpp"
#include "mhthfa/hyperbolic.hpp"
#include "mhthfa/special_math.hpp"
#include "mhthfa/types.hpp"

namespace mhthfa {

/// HTH law: mu + sqrt(W) Y with Y skew-normal(0, sigma, skew) and W ~ GIG(omega, omega, lambda).
struct HthParams {
  Vector mu;
  Matrix sigma;
  Matrix skew;  // p x r
  double lambda = 1.0;
  double omega = 1.0;
};

/// One factor-analysis component in loading form (B is p x q, D the diagonal of the noise).
struct FactorComponentParams {
  Vector mu;
  Matrix B;
  Vector D;
  Matrix Lambda;  // q x r
  double omega = 1.0;
  double lambda = 1.0;
};

/// The same component with the rescaled loadings B_tilde = B A^(-1/2) that the fitter works with.
struct FactorComponent {
  Vector mu;
  Matrix B_tilde;
  Vector D;
  Matrix Lambda;
  double omega = 1.0;
  double lambda = 1.0;

  Index p() const { return mu.size(); }
  Index q() const { return B_tilde.cols(); }
  Index r() const { return Lambda.cols(); }
};

/// Outcome of the dimension checks on (p, q, r).
struct ConstraintReport {
  bool ok = true;
  std::string message;
  explicit operator bool() const { return ok; }
};

inline ConstraintReport check_constraints(Index p, Index q, Index r) {
  std::ostringstream msg;
  if (q < 1) msg << "q >= 1 violated (q = " << q << "); ";
  if (!(q < p)) msg << "q < p violated (q = " << q << ", p = " << p << "); ";
  if (!((p - q) * (p - q) > p + q))
    msg << "(p-q)^2 > p+q violated (" << (p - q) * (p - q) << " > " << p + q << " is false); ";
  if (r < 1) msg << "1 <= r violated (r = " << r << "); ";
  if (r > q) msg << "r <= q violated (r = " << r << ", q = " << q << "); ";
  ConstraintReport report;
  report.message = msg.str();
  report.ok = report.message.empty();
  if (!report.ok) report.message.resize(report.message.size() - 2);
  return report;
}

/// a_lambda entry: sqrt(2/pi) K_{lambda+1/2}(omega) / K_lambda(omega).
inline double skew_offset(double lambda, double omega) {
  return std::sqrt(2.0 / std::numbers::pi) * std::exp(log_bessel_k_ratio(lambda, 0.5, omega));
}

/// d a_lambda / d lambda (one entry).
inline double skew_offset_dlambda(double lambda, double omega) {
  return skew_offset(lambda, omega) *
         (d_log_bessel_k_dorder(lambda + 0.5, omega) - d_log_bessel_k_dorder(lambda, omega));
}

/// A = I_q + [1 - a'a K_{lambda+1}(omega)/K_lambda(omega)] Lambda Lambda'.
inline Matrix factor_scale_matrix(const Matrix& Lambda, double lambda, double omega) {
  const Index q = Lambda.rows();
  const Index r = Lambda.cols();
  const double a = skew_offset(lambda, omega);
  const double bracket = 1.0 - r * a * a * std::exp(log_bessel_k_ratio(lambda, 1.0, omega));
  return Matrix::Identity(q, q) + bracket * Lambda * Lambda.transpose();
}

namespace detail {

// Symmetric square root and its inverse of an SPD matrix; nullopt when not SPD.
inline std::optional<std::pair<Matrix, Matrix>> sym_sqrt(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()));
  if (es.info() != Eigen::Success) return std::nullopt;
  const Vector ev = es.eigenvalues();
  if (!(ev.minCoeff() > 1e-12 * std::max(1.0, ev.maxCoeff()))) return std::nullopt;
  const Matrix& v = es.eigenvectors();
  return std::make_pair(Matrix(v * ev.cwiseSqrt().asDiagonal() * v.transpose()),
                        Matrix(v * ev.cwiseSqrt().cwiseInverse().asDiagonal() * v.transpose()));
}

}  // namespace detail

inline FactorComponent to_tilde_form(const FactorComponentParams& c) {
  const Matrix a = factor_scale_matrix(c.Lambda, c.lambda, c.omega);
  const auto roots = detail::sym_sqrt(a);
  if (!roots) throw NonSpdError("derive_component: A is not positive definite");
  return {c.mu, c.B * roots->second, c.D, c.Lambda, c.omega, c.lambda};
}

/// Loading form; nullopt when A is not SPD for the current (Lambda, omega, lambda).
inline std::optional<FactorComponentParams> to_loading_form(const FactorComponent& c) {
  const Matrix a = factor_scale_matrix(c.Lambda, c.lambda, c.omega);
  const auto roots = detail::sym_sqrt(a);
  if (!roots) return std::nullopt;
  return FactorComponentParams{c.mu, c.B_tilde * roots->first, c.D, c.Lambda, c.omega, c.lambda};
}

/// Per-observation pieces of the HTH density: x enters through delta and k only.
struct HthPoint {
  double delta;  // (x - loc)' Omega^-1 (x - loc)
  Vector k;      // skew' Omega^-1 (x - loc)
  double gamma;  // sqrt(omega (omega + delta))
  double rho;    // sqrt((omega + delta) / omega)
  Vector y;      // k / sqrt(rho)
};

/// Marginal HTH law with its factorizations cached; shared by the density and the E-step.
class HthLaw {
 public:
  HthLaw(const Vector& loc, const Matrix& sigma, const Matrix& skew, double lambda, double omega)
      : loc_(loc), skew_(skew), lambda_(lambda), omega_(omega) {
    p_ = loc.size();
    r_ = skew.cols();
    if (sigma.rows() != p_ || sigma.cols() != p_ || skew.rows() != p_)
      throw DimensionMismatch("HthLaw: dimensions disagree");
    if (r_ < 1) throw UnsupportedDimension("HthLaw: skewness dimension must be at least 1");
    if (r_ > 3) throw UnsupportedDimension("HthLaw: skewness dimension above 3 is not supported");
    if (!(omega > 0.0) || !std::isfinite(omega)) throw DomainError("HthLaw: omega must be positive");
    if (!std::isfinite(lambda)) throw DomainError("HthLaw: lambda must be finite");
    omega_mat_ = sigma + skew * skew.transpose();
    llt_ = detail::spd_factor(omega_mat_, "HthLaw (Omega)");
    log_det_omega_ = detail::log_det(llt_);
    omega_inv_skew_ = llt_.solve(skew);
    delta_mat_ = Matrix::Identity(r_, r_) - skew.transpose() * omega_inv_skew_;
    delta_mat_ = (0.5 * (delta_mat_ + delta_mat_.transpose())).eval();
    delta_llt_ = detail::spd_factor(delta_mat_, "HthLaw (Delta)");
    tn_.emplace(delta_mat_);
  }

  Index p() const { return p_; }
  Index r() const { return r_; }
  double lambda() const { return lambda_; }
  double omega() const { return omega_; }
  const Vector& location() const { return loc_; }
  const Matrix& skew() const { return skew_; }
  const Matrix& omega_matrix() const { return omega_mat_; }
  const Matrix& delta_matrix() const { return delta_mat_; }
  const TruncatedNormalOrthant& truncated_normal() const { return *tn_; }

  HthPoint point(const Vector& x) const {
    if (x.size() != p_) throw DimensionMismatch("HthLaw: observation has wrong length");
    HthPoint pt;
    const Vector diff = x - loc_;
    pt.delta = llt_.matrixL().solve(diff).squaredNorm();
    pt.k = omega_inv_skew_.transpose() * diff;
    pt.gamma = std::sqrt(omega_ * (omega_ + pt.delta));
    pt.rho = std::sqrt((omega_ + pt.delta) / omega_);
    pt.y = pt.k / std::sqrt(pt.rho);
    return pt;
  }

  /// log of r log 2 + log h_p(x | loc, Omega, lambda, omega, omega), the symmetric part.
  double log_symmetric_part(const HthPoint& pt) const {
    return r_ * kLog2 +
           sym_hyp_log_density_from_delta(pt.delta, log_det_omega_, static_cast<int>(p_), lambda_, omega_, omega_);
  }

  /// Law of S = W / rho given x is GIG(gamma, gamma, lambda - p/2) tilted by Phi_r(y / sqrt(S) | Delta).
  GigParams scaled_posterior_base(const HthPoint& pt) const {
    return {pt.gamma, pt.gamma, lambda_ - 0.5 * static_cast<double>(p_)};
  }

  /// Grid for the scaled posterior with the GIG index shifted by lambda_shift.
  GigGrid posterior_grid(const HthPoint& pt, const GigGridOptions& opt, double lambda_shift = 0.0) const {
    GigParams base = scaled_posterior_base(pt);
    base.lambda += lambda_shift;
    std::vector<GigParams> refs;
    const double extra = pt.y.dot(delta_llt_.solve(pt.y));
    if (extra > 1e-12 * base.chi) refs.push_back({base.psi, base.chi + extra, base.lambda});
    return make_gig_grid(base, refs, opt);
  }

  /// log H_r(y | 0, Delta, lambda - p/2, gamma, gamma) on a given grid.
  double log_skew_part(const HthPoint& pt, const GigGrid& grid) const {
    std::vector<double> terms(grid.t.size());
    for (std::size_t j = 0; j < grid.t.size(); ++j)
      terms[j] = grid.log_weight[j] + tn_->log_prob(pt.y, std::exp(grid.t[j]));
    return log_sum_exp(terms);
  }

  /// Density with a fixed node layout (the fitter's path).
  double log_density(const Vector& x, const GigGridOptions& opt) const {
    const HthPoint pt = point(x);
    return log_symmetric_part(pt) + log_skew_part(pt, posterior_grid(pt, opt));
  }

  /// Density with panel refinement until successive values agree to 1e-8.
  double log_density(const Vector& x) const {
    const HthPoint pt = point(x);
    const double sym = log_symmetric_part(pt);
    const double skew_part = detail::refine_over_grids(
        [&](const GigGridOptions& opt) { return log_skew_part(pt, posterior_grid(pt, opt)); }, 1e-10);
    return sym + skew_part;
  }

 private:
  Vector loc_;
  Matrix skew_;
  double lambda_, omega_;
  Index p_ = 0, r_ = 0;
  Matrix omega_mat_;
  Eigen::LLT<Matrix> llt_;
  double log_det_omega_ = 0.0;
  Matrix omega_inv_skew_;
  Matrix delta_mat_;
  Eigen::LLT<Matrix> delta_llt_;
  std::optional<TruncatedNormalOrthant> tn_;
};

inline double hth_log_density(const Vector& x, const HthParams& params) {
  return HthLaw(params.mu, params.sigma, params.skew, params.lambda, params.omega).log_density(x);
}

/// Everything the density, E-step and sampler need from one component.
struct DerivedComponent {
  Matrix A;                 // q x q
  bool A_spd = false;
  Vector a_lambda;          // r
  Matrix B_tilde;           // p x q
  Matrix sigma;             // B_tilde B_tilde' + D
  Matrix alpha;             // B_tilde Lambda
  Matrix omega_mat;         // sigma + alpha alpha'
  Matrix delta_mat;         // I_r - alpha' Omega^-1 alpha
  Vector r_vec;             // mu - alpha a_lambda
  Matrix C;                 // (I_q + B_tilde' D^-1 B_tilde)^-1
  Matrix BtDinv;            // B_tilde' D^-1
  std::optional<HthLaw> law;
};

inline DerivedComponent derive_component(const FactorComponent& c) {
  const Index p = c.p(), q = c.q(), r = c.r();
  if (c.B_tilde.rows() != p || c.D.size() != p || c.Lambda.rows() != q)
    throw DimensionMismatch("derive_component: dimensions disagree");
  if (!(c.D.minCoeff() > 0.0)) throw DomainError("derive_component: D must be strictly positive");
  DerivedComponent dc;
  dc.A = factor_scale_matrix(c.Lambda, c.lambda, c.omega);
  dc.A_spd = detail::sym_sqrt(dc.A).has_value();
  dc.a_lambda = Vector::Constant(r, skew_offset(c.lambda, c.omega));
  dc.B_tilde = c.B_tilde;
  dc.sigma = c.B_tilde * c.B_tilde.transpose();
  dc.sigma.diagonal() += c.D;
  dc.alpha = c.B_tilde * c.Lambda;
  dc.r_vec = c.mu - dc.alpha * dc.a_lambda;
  dc.BtDinv = c.B_tilde.transpose() * c.D.cwiseInverse().asDiagonal();
  const Matrix m = Matrix::Identity(q, q) + dc.BtDinv * c.B_tilde;
  dc.C = m.llt().solve(Matrix::Identity(q, q));
  dc.law.emplace(dc.r_vec, dc.sigma, dc.alpha, c.lambda, c.omega);
  dc.omega_mat = dc.law->omega_matrix();
  dc.delta_mat = dc.law->delta_matrix();
  return dc;
}

inline DerivedComponent derive_component(const FactorComponentParams& c) { return derive_component(to_tilde_form(c)); }

inline double hthfa_log_density(const Vector& x, const DerivedComponent& dc) { return dc.law->log_density(x); }

/// Samples, with the latent draws kept on request.
struct HthfaSample {
  Matrix X;  // n x p
  std::optional<Vector> w;
  std::optional<Matrix> v;  // n x r
  std::optional<Matrix> u;  // n x q
};

template <typename Rng>
HthfaSample sample_hthfa(const FactorComponent& c, Index n, Rng& rng, bool record_latents = false) {
  const Index p = c.p(), q = c.q(), r = c.r();
  const Vector a = Vector::Constant(r, skew_offset(c.lambda, c.omega));
  const GigParams mix{c.omega, c.omega, c.lambda};
  std::normal_distribution<double> n01;
  HthfaSample out;
  out.X.resize(n, p);
  if (record_latents) {
    out.w = Vector(n);
    out.v = Matrix(n, r);
    out.u = Matrix(n, q);
  }
  const Vector sd_noise = c.D.cwiseSqrt();
  Vector v(r), u(q), e(p);
  for (Index i = 0; i < n; ++i) {
    const double w = gig_sample(mix, rng);
    const double sw = std::sqrt(w);
    for (Index j = 0; j < r; ++j) v[j] = sw * std::abs(n01(rng));
    for (Index j = 0; j < q; ++j) u[j] = sw * n01(rng);
    u += c.Lambda * (v - a);
    for (Index j = 0; j < p; ++j) e[j] = sw * sd_noise[j] * n01(rng);
    out.X.row(i) = (c.mu + c.B_tilde * u + e).transpose();
    if (record_latents) {
      (*out.w)[i] = w;
      out.v->row(i) = v.transpose();
      out.u->row(i) = u.transpose();
    }
  }
  return out;
}

}  // namespace mhthfa
