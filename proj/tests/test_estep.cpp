#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "mhthfa/estep.hpp"

using namespace mhthfa;
using boost::math::quadrature::gauss_kronrod;

namespace {

FactorComponent make_component(Index p, Index q, Index r, std::uint64_t seed, double lambda = 1.5,
                               double omega = 2.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> unif(0.4, 1.2);
  FactorComponent c;
  c.mu = Vector(p);
  c.B_tilde = Matrix(p, q);
  c.D = Vector(p);
  c.Lambda = Matrix(q, r);
  for (Index i = 0; i < p; ++i) {
    c.mu[i] = n01(rng);
    c.D[i] = unif(rng);
    for (Index j = 0; j < q; ++j) c.B_tilde(i, j) = n01(rng);
  }
  for (Index i = 0; i < q; ++i)
    for (Index j = 0; j < r; ++j) c.Lambda(i, j) = n01(rng);
  c.lambda = lambda;
  c.omega = omega;
  return c;
}

double log_normal_pdf(const Vector& x, const Vector& mu, const Matrix& cov) {
  const Eigen::LLT<Matrix> llt(cov);
  const Vector d = x - mu;
  return -0.5 * d.dot(llt.solve(d)) - 0.5 * x.size() * std::log(2 * std::numbers::pi) -
         llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

// Straight-line recomputation of delta and k from the defining matrices.
struct Straight {
  double delta;
  Vector k;
  Matrix Delta;
};

Straight straight(const Vector& x, const FactorComponent& c) {
  const Index r = c.r();
  const double a = std::sqrt(2.0 / std::numbers::pi) * bessel_k(c.lambda + 0.5, c.omega) / bessel_k(c.lambda, c.omega);
  const Matrix alpha = c.B_tilde * c.Lambda;
  const Matrix sigma = c.B_tilde * c.B_tilde.transpose() + Matrix(c.D.asDiagonal());
  const Matrix omega = sigma + alpha * alpha.transpose();
  const Matrix oinv = omega.inverse();
  const Vector diff = x - (c.mu - alpha * Vector::Constant(r, a));
  return {diff.dot(oinv * diff), alpha.transpose() * oinv * diff,
          Matrix::Identity(r, r) - alpha.transpose() * oinv * alpha};
}

// E[g(W) | x] by adaptive Kronrod in log w against w^(nu-1) exp{-(omega w + (omega+delta)/w)/2} Phi_r(k/sqrt(w)|Delta)
template <typename G>
double w_posterior_mean(const Vector& x, const FactorComponent& c, G&& g) {
  const Straight s = straight(x, c);
  const double nu = c.lambda - 0.5 * x.size();
  auto log_kernel = [&](double t) {
    const double w = std::exp(t);
    return nu * t - 0.5 * (c.omega * w + (c.omega + s.delta) / w) + log_mvn_orthant_cdf(s.k / std::sqrt(w), s.Delta);
  };
  double top = -std::numeric_limits<double>::infinity();
  for (double t = -15.0; t <= 15.0; t += 0.1) top = std::max(top, log_kernel(t));
  auto integral = [&](auto&& h) {
    return gauss_kronrod<double, 61>::integrate([&](double t) { return h(std::exp(t)) * std::exp(log_kernel(t) - top); },
                                                -25.0, 25.0, 12, 1e-12);
  };
  return integral(g) / integral([](double) { return 1.0; });
}

bool is_psd(const Matrix& m, double tol = 1e-10) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()));
  return es.eigenvalues().minCoeff() >= -tol * std::max(1.0, m.cwiseAbs().maxCoeff());
}

}  // namespace

TEST(EStep, FusedLogDensityMatchesModelDensity) {
  for (Index r : {1, 2, 3}) {
    const FactorComponent c = make_component(7, 3, r, 10 + r);
    const DerivedComponent dc = derive_component(c);
    std::mt19937_64 rng(3);
    const HthfaSample s = sample_hthfa(c, 10, rng);
    for (Index i = 0; i < 10; ++i) {
      const Vector x = s.X.row(i).transpose();
      EXPECT_NEAR(component_expectations(x, c, dc).log_density, hthfa_log_density(x, dc), 1e-8);
    }
  }
}

TEST(EStep, WeightMomentsMatchClosedForm) {
  for (Index r : {1, 2, 3}) {
    const FactorComponent c = make_component(6, 3, r, 20 + r, -0.8, 0.7);
    const DerivedComponent dc = derive_component(c);
    std::mt19937_64 rng(4);
    const HthfaSample s = sample_hthfa(c, 8, rng);
    for (Index i = 0; i < 8; ++i) {
      const Vector x = s.X.row(i).transpose();
      const ObservationExpectations e = component_expectations(x, c, dc);
      const WMoments w = expected_w_and_inv(x, dc);
      EXPECT_NEAR(e.a, w.a, 1e-8 * w.a);
      EXPECT_NEAR(e.b, w.b, 1e-8 * w.b);
      EXPECT_GE(w.a * w.b, 1.0);
    }
  }
}

TEST(EStep, WeightMomentsMatchQuadratureOracle) {
  // 25 random (x, theta) pairs with p = 4, r = 1, plus r = 2 and 3 at p = 6
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> lam(-3.0, 3.0), om(0.2, 5.0);
  for (int trial = 0; trial < 31; ++trial) {
    const Index r = trial < 25 ? 1 : (trial < 28 ? 2 : 3);
    const Index p = r == 1 ? 4 : 6;
    const FactorComponent c = make_component(p, r == 1 ? 1 : 3, r, 500 + trial, lam(rng), om(rng));
    const DerivedComponent dc = derive_component(c);
    Vector x(p);
    for (Index i = 0; i < p; ++i) x[i] = c.mu[i] + 2.0 * n01(rng);
    const ObservationExpectations e = component_expectations(x, c, dc);
    const double a = w_posterior_mean(x, c, [](double w) { return w; });
    const double b = w_posterior_mean(x, c, [](double w) { return 1.0 / w; });
    const double lw = w_posterior_mean(x, c, [](double w) { return std::log(w); });
    EXPECT_NEAR(e.a, a, 1e-6 * a) << trial;
    EXPECT_NEAR(e.b, b, 1e-6 * b) << trial;
    EXPECT_NEAR(e.c, lw, 1e-6 * std::max(1.0, std::abs(lw))) << trial;
    EXPECT_NEAR(expected_log_w(x, c, dc), lw, 1e-6 * std::max(1.0, std::abs(lw))) << trial;
  }
}

TEST(EStep, ZeroSkewReducesToGigPosterior) {
  FactorComponent c = make_component(5, 2, 1, 7, 0.6, 1.4);
  c.Lambda.setZero();
  const DerivedComponent dc = derive_component(c);
  const Vector x = c.mu + Vector::LinSpaced(5, -1.0, 1.5);
  const double delta = mahalanobis_sq(x, c.mu, dc.sigma);
  const GigParams post{c.omega, c.omega + delta, c.lambda - 2.5};
  const WMoments w = expected_w_and_inv(x, dc);
  EXPECT_NEAR(w.a, gig_moment(post, 1.0), 1e-10 * w.a);
  EXPECT_NEAR(w.b, gig_moment(post, -1.0), 1e-10 * w.b);
  const ObservationExpectations e = component_expectations(x, c, dc);
  EXPECT_NEAR(e.a, gig_moment(post, 1.0), 1e-9 * w.a);
  EXPECT_NEAR(e.c, gig_expected_log(post), 1e-8);
}

TEST(EStep, ExpectedLogWAtCentreIsGigLogMoment) {
  FactorComponent c = make_component(4, 1, 1, 8, 2.5, 0.9);
  c.Lambda.setZero();
  const DerivedComponent dc = derive_component(c);
  EXPECT_NEAR(expected_log_w(c.mu, c, dc), gig_expected_log({c.omega, c.omega, c.lambda - 2.0}), 1e-8);
}

TEST(EStep, ExpectedLogWIncreasesWithDistance) {
  FactorComponent c = make_component(5, 2, 1, 9, -0.5, 1.1);
  c.Lambda.setZero();
  const DerivedComponent dc = derive_component(c);
  const Vector dir = Vector::Ones(5).normalized();
  double previous = -std::numeric_limits<double>::infinity();
  for (double t = 0.0; t <= 20.0; t += 0.5) {
    const double v = expected_log_w(c.mu + t * dir, c, dc);
    EXPECT_GT(v, previous);
    previous = v;
  }
}

TEST(EStep, TruncationMomentsMatchNestedQuadrature) {
  // r = 1: integrate v/w and v^2/w against the joint posterior of (w, v) built from the latent structure
  for (int trial = 0; trial < 5; ++trial) {
    const FactorComponent c = make_component(4, 1, 1, 60 + trial, 1.0 - trial * 0.6, 0.5 + trial);
    const DerivedComponent dc = derive_component(c);
    std::mt19937_64 rng(trial);
    const Vector x = sample_hthfa(c, 1, rng).X.row(0).transpose();
    const GigParams mix{c.omega, c.omega, c.lambda};
    auto joint = [&](auto&& g) {
      const double m = std::log(gig_mode(mix));
      return gauss_kronrod<double, 61>::integrate(
          [&](double t) {
            const double w = std::exp(t);
            const double sw = std::sqrt(w);
            const double inner = gauss_kronrod<double, 31>::integrate(
                [&](double v) {
                  return g(w, v) * 2.0 * std::exp(std_normal_log_pdf(v / sw) - std::log(sw) +
                                                  log_normal_pdf(x, dc.r_vec + dc.alpha.col(0) * v, w * dc.sigma));
                },
                0.0, 40.0 * sw, 10, 1e-12);
            return inner * std::exp(gig_log_density(w, mix) + t);
          },
          m - 25.0, m + 25.0, 10, 1e-11);
    };
    const double norm = joint([](double, double) { return 1.0; });
    const double s3 = joint([](double w, double v) { return v / w; }) / norm;
    const double s4 = joint([](double w, double v) { return v * v / w; }) / norm;
    const VMoments vm = expected_v_moments(x, c, dc);
    EXPECT_NEAR(vm.s3[0], s3, 1e-6 * std::abs(s3)) << trial;
    EXPECT_NEAR(vm.s4(0, 0), s4, 1e-6 * std::abs(s4)) << trial;
    EXPECT_NEAR(component_expectations(x, c, dc).log_density, std::log(norm), 1e-7) << trial;
  }
}

TEST(EStep, AllMomentsMatchLatentMonteCarlo) {
  // prior draws of (w, v, u) weighted by N(x | mu + B u, w D); checks the centring of V | x as well
  for (Index r : {1, 2}) {
    const FactorComponent c = make_component(4, 2, r, 80 + r, 1.2, 1.5);
    const DerivedComponent dc = derive_component(c);
    std::mt19937_64 rng(2024 + r);
    const Vector x = sample_hthfa(c, 1, rng).X.row(0).transpose();
    const Index n = 1000000;
    const HthfaSample s = sample_hthfa(c, n, rng, true);
    const Index q = c.q();
    std::vector<double> logw(n);
    double top = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i) {
      const double w = (*s.w)[i];
      const Vector resid = x - c.mu - c.B_tilde * s.u->row(i).transpose();
      double lw = 0.0;
      for (Index j = 0; j < 4; ++j) lw += -0.5 * resid[j] * resid[j] / (w * c.D[j]) - 0.5 * std::log(w * c.D[j]);
      logw[i] = lw;
      top = std::max(top, lw);
    }
    double total = 0.0, total_sq = 0.0, ea = 0.0, eb = 0.0;
    Vector s1 = Vector::Zero(q), s3 = Vector::Zero(r);
    Matrix s2 = Matrix::Zero(q, q), s4 = Matrix::Zero(r, r), s5 = Matrix::Zero(r, q);
    for (Index i = 0; i < n; ++i) {
      const double wt = std::exp(logw[i] - top);
      const double w = (*s.w)[i];
      const Vector u = s.u->row(i).transpose();
      const Vector v = s.v->row(i).transpose();
      total += wt;
      total_sq += wt * wt;
      ea += wt * w;
      eb += wt / w;
      s1 += (wt / w) * u;
      s2 += (wt / w) * u * u.transpose();
      s3 += (wt / w) * v;
      s4 += (wt / w) * v * v.transpose();
      s5 += (wt / w) * v * u.transpose();
    }
    ASSERT_GT(total * total / total_sq, 5000.0);  // effective sample size
    const ObservationExpectations e = component_expectations(x, c, dc);
    auto rel = [](double got, double want) { return std::abs(got - want) / std::max(std::abs(want), 0.05); };
    EXPECT_LT(rel(e.a, ea / total), 0.015);
    EXPECT_LT(rel(e.b, eb / total), 0.015);
    for (Index j = 0; j < q; ++j) EXPECT_LT(rel(e.s1[j], s1[j] / total), 0.015) << "s1 " << j;
    for (Index j = 0; j < r; ++j) EXPECT_LT(rel(e.s3[j], s3[j] / total), 0.015) << "s3 " << j;
    for (Index j = 0; j < q; ++j)
      for (Index k = 0; k < q; ++k) EXPECT_LT(rel(e.s2(j, k), s2(j, k) / total), 0.015) << "s2";
    for (Index j = 0; j < r; ++j)
      for (Index k = 0; k < r; ++k) EXPECT_LT(rel(e.s4(j, k), s4(j, k) / total), 0.015) << "s4";
    for (Index j = 0; j < r; ++j)
      for (Index k = 0; k < q; ++k) EXPECT_LT(rel(e.s5(j, k), s5(j, k) / total), 0.015) << "s5";
  }
}

TEST(EStep, ConsistencyInequalities) {
  for (Index r : {1, 2, 3}) {
    const FactorComponent c = make_component(11, 4, r, 30 + r, 0.3, 0.8);
    const DerivedComponent dc = derive_component(c);
    std::mt19937_64 rng(5);
    HthfaSample s = sample_hthfa(c, 20, rng);
    s.X.row(0).array() += 25.0;  // an outlier
    for (Index i = 0; i < s.X.rows(); ++i) {
      const ObservationExpectations e = component_expectations(s.X.row(i).transpose(), c, dc);
      EXPECT_GT(e.b, 0.0);
      EXPECT_GE(e.a * e.b, 1.0 - 1e-12);
      EXPECT_TRUE(is_psd(e.s2 - e.s1 * e.s1.transpose() / e.b));
      EXPECT_TRUE(is_psd(e.s4 - e.s3 * e.s3.transpose() / e.b));
      EXPECT_TRUE((e.s2 - e.s2.transpose()).isZero(0.0));
      EXPECT_GT(e.s3.minCoeff(), 0.0);
    }
  }
}

TEST(EStep, ZeroSkewFactorMomentsAreClassical) {
  FactorComponent c = make_component(6, 2, 1, 41);
  c.Lambda.setZero();
  const DerivedComponent dc = derive_component(c);
  const Vector x = c.mu + Vector::Constant(6, 0.7);
  const ObservationExpectations e = component_expectations(x, c, dc);
  const Vector d = c.B_tilde.transpose() * c.D.cwiseInverse().asDiagonal() * (x - c.mu);
  const Matrix cm = (Matrix::Identity(2, 2) + c.B_tilde.transpose() * c.D.cwiseInverse().asDiagonal() * c.B_tilde).inverse();
  EXPECT_LT((e.s1 - e.b * cm * d).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((e.s2 - cm * (e.b * d * d.transpose() * cm + Matrix::Identity(2, 2))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(EStep, LargeNoiseLimitOfFactorMeans) {
  // as D grows, C -> I and s1 -> Lambda (s3 - a_lambda b)
  FactorComponent c = make_component(6, 2, 1, 42);
  const Vector x = c.mu + Vector::Constant(6, 0.5);
  double previous = std::numeric_limits<double>::infinity();
  for (double scale : {1e2, 1e4, 1e6, 1e8}) {
    FactorComponent big = c;
    big.D = c.D * scale;
    const DerivedComponent dc = derive_component(big);
    const ObservationExpectations e = component_expectations(x, big, dc);
    const Vector limit = big.Lambda * (e.s3 - dc.a_lambda * e.b);
    const double gap = (e.s1 - limit).cwiseAbs().maxCoeff();
    EXPECT_LT(gap, previous);
    previous = gap;
  }
  EXPECT_LT(previous, 1e-6);
}
