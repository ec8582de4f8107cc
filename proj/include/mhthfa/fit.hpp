#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <future>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "mhthfa/errors.hpp"
#include "mhthfa/estep.hpp"
#include "mhthfa/hthfa.hpp"
#include "mhthfa/types.hpp"

namespace mhthfa {

/// Finite mixture of HTHFA components in the rescaled-loading form.
struct MixtureModel {
  Vector weights;
  std::vector<FactorComponent> components;

  Index G() const { return static_cast<Index>(components.size()); }
  Index p() const { return components.empty() ? 0 : components.front().p(); }
  Index q() const { return components.empty() ? 0 : components.front().q(); }
  Index r() const { return components.empty() ? 0 : components.front().r(); }

  void validate() const {
    if (components.empty()) throw DomainError("MixtureModel: no components");
    if (weights.size() != G()) throw DimensionMismatch("MixtureModel: weights and components disagree");
    for (const auto& c : components)
      if (c.p() != p() || c.q() != q() || c.r() != r() || c.B_tilde.rows() != p() || c.D.size() != p() ||
          c.Lambda.rows() != q())
        throw DimensionMismatch("MixtureModel: components have different dimensions");
    for (const auto& c : components)
      if (!(c.omega > 0.0) || !std::isfinite(c.omega) || !std::isfinite(c.lambda) || !(c.D.minCoeff() > 0.0) ||
          !c.mu.allFinite() || !c.B_tilde.allFinite() || !c.Lambda.allFinite() || !c.D.allFinite())
        throw DomainError("MixtureModel: component parameters must be finite with omega > 0 and D > 0");
    if (!(weights.minCoeff() > 0.0) || std::abs(weights.sum() - 1.0) > 1e-12)
      throw DomainError("MixtureModel: weights must be positive and sum to one");
    const ConstraintReport report = check_constraints(p(), q(), r());
    if (!report) throw ConstraintViolation(report.message);
  }
};

/// Labels: 0 means unlabelled, g in 1..G fixes the component of that row.
using Labels = std::optional<IntVector>;

struct MixtureSample {
  Matrix X;
  IntVector component;  // 1..G
  std::optional<Vector> w;
  std::optional<Matrix> v;
  std::optional<Matrix> u;
};

template <typename Rng>
MixtureSample sample_mixture(const MixtureModel& model, Index n, Rng& rng, bool record_latents = false) {
  model.validate();
  if (n < 0) throw DomainError("sample_mixture: n must be nonnegative");
  std::discrete_distribution<int> pick(model.weights.data(), model.weights.data() + model.weights.size());
  MixtureSample out;
  out.X.resize(n, model.p());
  out.component.resize(n);
  if (record_latents) {
    out.w = Vector(n);
    out.v = Matrix(n, model.r());
    out.u = Matrix(n, model.q());
  }
  for (Index i = 0; i < n; ++i) {
    const int g = pick(rng);
    const HthfaSample one = sample_hthfa(model.components[static_cast<std::size_t>(g)], 1, rng, record_latents);
    out.X.row(i) = one.X.row(0);
    out.component[i] = g + 1;
    if (record_latents) {
      (*out.w)[i] = (*one.w)[0];
      out.v->row(i) = one.v->row(0);
      out.u->row(i) = one.u->row(0);
    }
  }
  return out;
}

struct EStepQuantities {
  Matrix z;            // n x G responsibilities
  Matrix log_density;  // n x G component log densities
  std::vector<std::vector<ObservationExpectations>> expectations;  // [g][i]
  double log_likelihood = 0.0;
};

struct FitConfig {
  int max_iterations = 1000;
  double epsilon = 0.01;
  int n_starts = 5;
  std::uint64_t seed = 1;
  Labels labels;
  GigGridOptions grid;
  bool fix_skew = false;    // keep Lambda at its initial value
  bool fix_omega = false;
  bool fix_lambda = false;
  std::optional<Matrix> initial_skew;  // q x r start for Lambda in every component
  std::optional<double> initial_omega;
  std::optional<double> initial_lambda;
  int threads = 0;  // grid search workers; 0 means hardware concurrency

  void validate(Index n) const {
    if (!(epsilon > 0.0)) throw DomainError("FitConfig: epsilon must be positive");
    if (max_iterations < 1) throw DomainError("FitConfig: max_iterations must be at least 1");
    if (n_starts < 1) throw DomainError("FitConfig: n_starts must be at least 1");
    if (labels && labels->size() != n) throw DimensionMismatch("FitConfig: labels length differs from n");
  }
};

struct FitResult {
  MixtureModel model;
  std::vector<double> log_likelihood_trace;
  double bic = 0.0;
  Matrix responsibilities;
  IntVector map_labels;
  bool converged = false;
  int iterations = 0;
  int ascent_violations = 0;
  double worst_decrease = 0.0;
  int start_used = 0;
  std::vector<double> initial_log_likelihoods;
  std::vector<std::string> warnings;

  double log_likelihood() const { return log_likelihood_trace.back(); }
};

inline Index free_parameters(Index G, Index p, Index q, Index r) {
  return G - 1 + G * (p + q * r + 2 + p * q + p - q * (q - 1) / 2);
}

inline double bic(double log_likelihood, Index G, Index p, Index q, Index r, Index n) {
  if (n <= 0) throw DomainError("bic: n must be positive");
  return 2.0 * log_likelihood - static_cast<double>(free_parameters(G, p, q, r)) * std::log(static_cast<double>(n));
}

/// Aitken estimate of the limit of a log-likelihood trace; empty when the ratio is degenerate.
inline std::optional<double> aitken_limit(double l_prev2, double l_prev, double l_curr) {
  const double denom = l_prev - l_prev2;
  if (std::abs(denom) < 1e-14) return std::nullopt;
  const double acc = (l_curr - l_prev) / denom;
  if (std::abs(1.0 - acc) < 1e-14) return std::nullopt;
  return l_prev + (l_curr - l_prev) / (1.0 - acc);
}

/// Aitken acceleration stop: l_inf - l_curr in [0, epsilon).
inline bool aitken_stop(double l_prev2, double l_prev, double l_curr, double epsilon) {
  if (std::abs(l_prev - l_prev2) < 1e-14) return std::abs(l_curr - l_prev) < epsilon;
  const auto l_inf = aitken_limit(l_prev2, l_prev, l_curr);
  if (!l_inf) return false;
  const double gap = *l_inf - l_curr;
  return gap >= 0.0 && gap < epsilon;
}

namespace detail {

inline void check_data(const Matrix& data, Index p) {
  if (data.cols() != p) throw DimensionMismatch("data has the wrong number of columns");
  if (!data.allFinite()) throw InputError("data contains non-finite values");
}

inline void check_labels(const Labels& labels, Index n, Index G) {
  if (!labels) return;
  if (labels->size() != n) throw DimensionMismatch("labels length differs from the number of rows");
  for (Index i = 0; i < n; ++i)
    if ((*labels)[i] < 0 || (*labels)[i] > G) throw InputError("label outside 0..G");
}

inline std::vector<DerivedComponent> derive_all(const MixtureModel& model) {
  std::vector<DerivedComponent> out;
  out.reserve(model.components.size());
  for (const auto& c : model.components) out.push_back(derive_component(c));
  return out;
}

// Responsibilities and log-likelihood from the n x G table of component log densities.
inline double mix_rows(const Matrix& log_density, const Vector& weights, const Labels& labels, Matrix& z) {
  const Index n = log_density.rows(), G = log_density.cols();
  z.resize(n, G);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int label = labels ? (*labels)[i] : 0;
    if (label > 0) {
      z.row(i).setZero();
      z(i, label - 1) = 1.0;
      const double v = std::log(weights[label - 1]) + log_density(i, label - 1);
      if (!std::isfinite(v)) throw DegenerateLikelihood("labelled row has zero density under its component");
      total += v;
      continue;
    }
    double top = -std::numeric_limits<double>::infinity();
    for (Index g = 0; g < G; ++g) top = std::max(top, std::log(weights[g]) + log_density(i, g));
    if (!std::isfinite(top)) throw DegenerateLikelihood("row has zero density under every component");
    double s = 0.0;
    for (Index g = 0; g < G; ++g) {
      z(i, g) = std::exp(std::log(weights[g]) + log_density(i, g) - top);
      s += z(i, g);
    }
    z.row(i) /= s;
    total += top + std::log(s);
  }
  return total;
}

}  // namespace detail

/// n x G component log densities on the fitter's node layout.
inline Matrix component_log_densities(const Matrix& data, const MixtureModel& model, const GigGridOptions& opt = {}) {
  model.validate();
  detail::check_data(data, model.p());
  const auto dcs = detail::derive_all(model);
  Matrix out(data.rows(), model.G());
  for (Index g = 0; g < model.G(); ++g)
    for (Index i = 0; i < data.rows(); ++i) out(i, g) = dcs[g].law->log_density(data.row(i).transpose(), opt);
  return out;
}

inline double observed_log_likelihood(const Matrix& data, const MixtureModel& model, const Labels& labels = {},
                                      const GigGridOptions& opt = {}) {
  const Matrix ld = component_log_densities(data, model, opt);
  detail::check_labels(labels, data.rows(), model.G());
  Matrix z;
  return detail::mix_rows(ld, model.weights, labels, z);
}

inline Matrix responsibilities(const Matrix& data, const MixtureModel& model, const Labels& labels = {},
                               const GigGridOptions& opt = {}) {
  const Matrix ld = component_log_densities(data, model, opt);
  detail::check_labels(labels, data.rows(), model.G());
  Matrix z;
  detail::mix_rows(ld, model.weights, labels, z);
  return z;
}

inline IntVector map_labels(const Matrix& z) {
  IntVector out(z.rows());
  for (Index i = 0; i < z.rows(); ++i) {
    Index best = 0;
    z.row(i).maxCoeff(&best);
    out[i] = static_cast<int>(best) + 1;
  }
  return out;
}

inline EStepQuantities e_step(const Matrix& data, const MixtureModel& model, const Labels& labels = {},
                              const GigGridOptions& opt = {}) {
  model.validate();
  detail::check_data(data, model.p());
  detail::check_labels(labels, data.rows(), model.G());
  const Index n = data.rows(), G = model.G();
  const auto dcs = detail::derive_all(model);
  EStepQuantities eq;
  eq.log_density.resize(n, G);
  eq.expectations.assign(G, std::vector<ObservationExpectations>(n));
  for (Index g = 0; g < G; ++g) {
    for (Index i = 0; i < n; ++i) {
      eq.expectations[g][i] = component_expectations(data.row(i).transpose(), model.components[g], dcs[g], opt);
      eq.log_density(i, g) = eq.expectations[g][i].log_density;
    }
  }
  eq.log_likelihood = detail::mix_rows(eq.log_density, model.weights, labels, eq.z);
  return eq;
}

namespace detail {

// z-weighted sums of the expectations for one component.
struct ComponentSums {
  double n = 0.0;
  double sa = 0.0, sb = 0.0, sc = 0.0;
  double tr_s2 = 0.0;
  Vector s1, s3;
  Matrix s2, s4, s5;
};

inline ComponentSums sum_expectations(const EStepQuantities& eq, Index g, Index q, Index r) {
  ComponentSums s;
  s.s1 = Vector::Zero(q);
  s.s3 = Vector::Zero(r);
  s.s2 = Matrix::Zero(q, q);
  s.s4 = Matrix::Zero(r, r);
  s.s5 = Matrix::Zero(r, q);
  for (Index i = 0; i < eq.z.rows(); ++i) {
    const double z = eq.z(i, g);
    if (z == 0.0) continue;
    const auto& e = eq.expectations[g][i];
    s.n += z;
    s.sa += z * e.a;
    s.sb += z * e.b;
    s.sc += z * e.c;
    s.s1 += z * e.s1;
    s.s2 += z * e.s2;
    s.s3 += z * e.s3;
    s.s4 += z * e.s4;
    s.s5 += z * e.s5;
  }
  s.tr_s2 = s.s2.trace();
  return s;
}

// Part of the expected complete-data log-likelihood that depends on (Lambda, omega, lambda).
inline double q_skew_mixing(const ComponentSums& s, const Matrix& Lambda, double omega, double lambda) {
  const Index r = Lambda.cols();
  const Vector a = Vector::Constant(r, skew_offset(lambda, omega));
  const Matrix vv = s.s4 - a * s.s3.transpose() - s.s3 * a.transpose() + s.sb * a * a.transpose();
  const double u_term = s.tr_s2 - 2.0 * (Lambda * s.s5).trace() + 2.0 * s.s1.dot(Lambda * a) +
                        (Lambda.transpose() * Lambda * vv).trace();
  return (lambda - 1.0) * s.sc - s.n * log_bessel_k_scaled(lambda, omega) + omega * (s.n - 0.5 * (s.sa + s.sb)) -
         0.5 * u_term;
}

// Newton proposal for a scalar objective from central differences, clamped to [lo, hi].
template <typename F>
double newton_proposal(F&& objective, double x, double lo, double hi) {
  const double h = 1e-4 * std::max(std::abs(x), 1e-3);
  const double fp = objective(x + h), f0 = objective(x), fm = objective(x - h);
  const double g1 = (fp - fm) / (2.0 * h);
  const double g2 = (fp - 2.0 * f0 + fm) / (h * h);
  if (!std::isfinite(g1) || !(g2 < 0.0)) return x;
  return std::clamp(x - g1 / g2, lo, hi);
}

// Move from old toward proposal, halving the step until the objective does not decrease.
template <typename F>
double guarded_step(double old, double proposal, F&& objective) {
  if (!std::isfinite(proposal) || proposal == old) return old;
  const double base = objective(old);
  double step = proposal - old;
  for (int k = 0; k <= 10; ++k) {
    const double cand = old + step;
    double value = -std::numeric_limits<double>::infinity();
    try {
      value = objective(cand);
    } catch (const Error&) {
    }
    if (value >= base) return cand;
    step *= 0.5;
  }
  return old;
}

inline double d_log_bessel_k_domega(double lambda, double omega) { return d_log_bessel_k_dx(lambda, omega); }

}  // namespace detail

/// One safeguarded Newton step on t(omega) = -log K_lambda(omega) + (lambda-1) c_bar - omega (a_bar + b_bar) / 2.
inline double newton_omega(double omega, double a_bar, double b_bar, double c_bar, double lambda) {
  if (!(omega > 0.0)) throw DomainError("newton_omega: omega must be positive");
  auto t = [&](double w) {
    return -log_bessel_k_scaled(lambda, w) + (lambda - 1.0) * c_bar + w * (1.0 - 0.5 * (a_bar + b_bar));
  };
  auto dt = [&](double w) { return -detail::d_log_bessel_k_domega(lambda, w) - 0.5 * (a_bar + b_bar); };
  const double h = 1e-5 * omega;
  const double g1 = dt(omega);
  const double g2 = (dt(omega + h) - dt(omega - h)) / (2.0 * h);
  if (!(g2 < 0.0) || !std::isfinite(g1)) return omega;
  double step = -g1 / g2;
  const double base = t(omega);
  for (int k = 0; k <= 10; ++k) {
    const double cand = std::clamp(omega + step, 1e-4, 1e4);
    if (cand > 0.0 && t(cand) >= base) return cand;
    step *= 0.5;
  }
  return omega;
}

/// One conditional-maximization sweep in the order pi, mu, B_tilde, D, Lambda, omega, lambda.
inline MixtureModel cm_step(const Matrix& data, const EStepQuantities& eq, const MixtureModel& model,
                            const FitConfig& config = {}, std::vector<std::string>* warnings = nullptr) {
  const Index n = data.rows(), p = model.p(), q = model.q(), r = model.r(), G = model.G();
  if (eq.z.rows() != n || eq.z.cols() != G) throw DimensionMismatch("cm_step: E-step quantities do not match");
  const double collapse = std::max<double>(static_cast<double>(q + 1), 2.0);
  const Vector var = ((data.rowwise() - data.colwise().mean()).array().square().colwise().sum() /
                      std::max<double>(1.0, static_cast<double>(n - 1)))
                         .matrix()
                         .transpose();
  MixtureModel out = model;
  for (Index g = 0; g < G; ++g) {
    const detail::ComponentSums s = detail::sum_expectations(eq, g, q, r);
    if (!(s.n >= collapse)) throw ComponentCollapse("component " + std::to_string(g + 1) + " has collapsed");
    out.weights[g] = s.n / static_cast<double>(n);
    FactorComponent c = model.components[g];
    const auto& ex = eq.expectations[g];

    Vector zbx = Vector::Zero(p);
    for (Index i = 0; i < n; ++i)
      if (eq.z(i, g) != 0.0) zbx += (eq.z(i, g) * ex[i].b) * data.row(i).transpose();
    c.mu = (zbx - c.B_tilde * s.s1) / s.sb;

    Matrix xs1 = Matrix::Zero(p, q);
    for (Index i = 0; i < n; ++i)
      if (eq.z(i, g) != 0.0) xs1 += eq.z(i, g) * (data.row(i).transpose() - c.mu) * ex[i].s1.transpose();
    Eigen::LLT<Matrix> llt(s.s2);
    if (llt.info() != Eigen::Success) {
      llt.compute(s.s2 + 1e-8 * Matrix::Identity(q, q));
      if (warnings) warnings->push_back("singular factor second moment; ridge added");
    }
    c.B_tilde = llt.solve(xs1.transpose()).transpose();

    Vector dsum = Vector::Zero(p);
    for (Index i = 0; i < n; ++i) {
      const double z = eq.z(i, g);
      if (z == 0.0) continue;
      const Vector diff = data.row(i).transpose() - c.mu;
      const Vector bs1 = c.B_tilde * ex[i].s1;
      dsum += z * (ex[i].b * diff.array().square() - 2.0 * diff.array() * bs1.array()).matrix();
    }
    dsum += (c.B_tilde * s.s2 * c.B_tilde.transpose()).diagonal();
    c.D = dsum / s.n;
    for (Index j = 0; j < p; ++j) c.D[j] = std::max(c.D[j], 1e-8 * var[j] + 1e-300);

    const Vector a = Vector::Constant(r, skew_offset(c.lambda, c.omega));
    if (!config.fix_skew) {
      const Matrix lhs = s.s5.transpose() - s.s1 * a.transpose();
      const Matrix vv = s.s4 - a * s.s3.transpose() - s.s3 * a.transpose() + s.sb * a * a.transpose();
      Eigen::LLT<Matrix> vllt(0.5 * (vv + vv.transpose()));
      if (vllt.info() == Eigen::Success) c.Lambda = vllt.solve(lhs.transpose()).transpose();
    }

    if (!config.fix_omega) {
      const double proposal = newton_omega(c.omega, s.sa / s.n, s.sb / s.n, s.sc / s.n, c.lambda);
      auto objective = [&](double w) { return detail::q_skew_mixing(s, c.Lambda, w, c.lambda); };
      const double stepped = detail::guarded_step(c.omega, proposal, objective);
      // t ignores how a_lambda moves with omega; when its step is refused, step on the full objective
      c.omega = stepped != c.omega
                    ? stepped
                    : detail::guarded_step(c.omega, detail::newton_proposal(objective, c.omega, 1e-4, 1e4), objective);
    }

    if (!config.fix_lambda) {
      const Vector ones = Vector::Ones(r);
      const Matrix ltl = c.Lambda.transpose() * c.Lambda;
      const double av = skew_offset(c.lambda, c.omega);
      const double coupling =
          (s.s1.transpose() * c.Lambda * ones - s.s3.transpose() * ltl * ones + s.sb * av * ones.transpose() * ltl * ones)
              .value() /
          s.n;
      const double m = d_log_bessel_k_dorder(c.lambda, c.omega) + coupling * skew_offset_dlambda(c.lambda, c.omega);
      double proposal = c.lambda;
      if (std::isfinite(m) && std::abs(m) > 1e-12) proposal = std::clamp(s.sc / s.n * c.lambda / m, -50.0, 50.0);
      c.lambda = detail::guarded_step(c.lambda, proposal, [&](double l) {
        return detail::q_skew_mixing(s, c.Lambda, c.omega, l);
      });
    }
    out.components[g] = std::move(c);
  }
  out.weights /= out.weights.sum();
  return out;
}

/// Lloyd's algorithm from k-means++ seeds; labelled rows (1..k) stay in their class.
struct KMeansResult {
  IntVector assignment;  // 0-based
  Matrix centers;
  double within_ss = 0.0;
};

template <typename Rng>
KMeansResult kmeans(const Matrix& x, Index k, Rng& rng, int restarts = 5, const Labels& labels = {},
                    int max_iterations = 100) {
  const Index n = x.rows();
  if (k < 1 || n < k) throw DomainError("kmeans: need 1 <= k <= n");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  KMeansResult best;
  best.within_ss = std::numeric_limits<double>::infinity();
  for (int rep = 0; rep < restarts; ++rep) {
    Matrix centers(k, x.cols());
    std::vector<bool> seeded(k, false);
    if (labels) {
      for (Index g = 0; g < k; ++g) {
        Vector sum = Vector::Zero(x.cols());
        int count = 0;
        for (Index i = 0; i < n; ++i)
          if ((*labels)[i] == g + 1) {
            sum += x.row(i).transpose();
            ++count;
          }
        if (count > 0) {
          centers.row(g) = (sum / count).transpose();
          seeded[g] = true;
        }
      }
    }
    Vector d2 = Vector::Constant(n, std::numeric_limits<double>::infinity());
    auto refresh = [&](Index g) {
      for (Index i = 0; i < n; ++i) d2[i] = std::min(d2[i], (x.row(i) - centers.row(g)).squaredNorm());
    };
    bool any = false;
    for (Index g = 0; g < k; ++g)
      if (seeded[g]) {
        refresh(g);
        any = true;
      }
    for (Index g = 0; g < k; ++g) {
      if (seeded[g]) continue;
      Index pick = 0;
      if (!any) {
        pick = std::min<Index>(n - 1, static_cast<Index>(unif(rng) * n));
      } else {
        const double total = d2.sum();
        double target = unif(rng) * total;
        for (pick = 0; pick < n - 1; ++pick) {
          target -= d2[pick];
          if (target <= 0.0) break;
        }
      }
      centers.row(g) = x.row(pick);
      refresh(g);
      any = true;
    }
    IntVector assign = IntVector::Constant(n, -1);
    double wss = 0.0;
    for (int it = 0; it < max_iterations; ++it) {
      bool changed = false;
      wss = 0.0;
      for (Index i = 0; i < n; ++i) {
        Index g_best = 0;
        double d_best = std::numeric_limits<double>::infinity();
        const int label = labels ? (*labels)[i] : 0;
        if (label > 0) {
          g_best = label - 1;
          d_best = (x.row(i) - centers.row(g_best)).squaredNorm();
        } else {
          for (Index g = 0; g < k; ++g) {
            const double d = (x.row(i) - centers.row(g)).squaredNorm();
            if (d < d_best) {
              d_best = d;
              g_best = g;
            }
          }
        }
        wss += d_best;
        if (assign[i] != g_best) {
          assign[i] = static_cast<int>(g_best);
          changed = true;
        }
      }
      if (!changed) break;
      Matrix sums = Matrix::Zero(k, x.cols());
      Vector counts = Vector::Zero(k);
      for (Index i = 0; i < n; ++i) {
        sums.row(assign[i]) += x.row(i);
        counts[assign[i]] += 1.0;
      }
      for (Index g = 0; g < k; ++g)
        if (counts[g] > 0) centers.row(g) = sums.row(g) / counts[g];
    }
    if (wss < best.within_ss) {
      best.within_ss = wss;
      best.assignment = assign;
      best.centers = centers;
    }
  }
  return best;
}

namespace detail {

// Principal-axis start for one component from weighted moments.
template <typename Rng>
FactorComponent initial_component(const Matrix& data, const Vector& z, Index q, Index r, const FitConfig& config,
                                  Rng& rng) {
  const Index p = data.cols();
  const double ng = z.sum();
  const Vector mean = (data.transpose() * z) / ng;
  const Matrix centered = data.rowwise() - mean.transpose();
  const Matrix cov = centered.transpose() * z.asDiagonal() * centered / ng;
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  Matrix B0(p, q);
  for (Index j = 0; j < q; ++j) {
    const Index col = p - 1 - j;
    B0.col(j) = es.eigenvectors().col(col) * std::sqrt(std::max(es.eigenvalues()[col], 0.0));
  }
  Vector D0 = (cov - B0 * B0.transpose()).diagonal();
  for (Index j = 0; j < p; ++j) D0[j] = std::max(D0[j], 1e-6);
  FactorComponentParams c;
  c.mu = mean;
  c.B = B0;
  c.D = D0;
  c.omega = config.initial_omega.value_or(1.0);
  c.lambda = config.initial_lambda.value_or(1.0);
  if (config.initial_skew) {
    c.Lambda = *config.initial_skew;
  } else {
    std::normal_distribution<double> n01;
    c.Lambda = Matrix(q, r);
    for (Index i = 0; i < q; ++i)
      for (Index j = 0; j < r; ++j) c.Lambda(i, j) = n01(rng);
  }
  for (int k = 0; k < 60; ++k) {
    if (detail::sym_sqrt(factor_scale_matrix(c.Lambda, c.lambda, c.omega))) break;
    c.Lambda *= 0.5;
  }
  return to_tilde_form(c);
}

struct Start {
  MixtureModel model;
  double log_likelihood;
};

template <typename Rng>
std::vector<Start> initial_models(const Matrix& data, Index G, Index q, Index r, const FitConfig& config, Rng& rng,
                                  std::vector<std::string>& warnings) {
  const Index n = data.rows(), p = data.cols();
  const Vector mean = data.colwise().mean().transpose();
  Vector sd = ((data.rowwise() - mean.transpose()).array().square().colwise().sum() /
               std::max<double>(1.0, static_cast<double>(n - 1)))
                  .sqrt()
                  .matrix()
                  .transpose();
  for (Index j = 0; j < p; ++j)
    if (!(sd[j] > 0.0)) sd[j] = 1.0;
  const Matrix standardized = (data.rowwise() - mean.transpose()) * sd.cwiseInverse().asDiagonal();
  const double collapse = std::max<double>(static_cast<double>(q + 1), 2.0);
  std::vector<Start> starts;
  for (int s = 0; s < config.n_starts; ++s) {
    const KMeansResult km = kmeans(standardized, G, rng, 5, config.labels);
    MixtureModel model;
    model.weights = Vector(G);
    bool ok = true;
    for (Index g = 0; g < G; ++g) {
      Vector z = Vector::Zero(n);
      for (Index i = 0; i < n; ++i) z[i] = km.assignment[i] == g ? 1.0 : 0.0;
      if (z.sum() < collapse) {
        ok = false;
        break;
      }
      model.weights[g] = z.sum() / static_cast<double>(n);
      model.components.push_back(initial_component(data, z, q, r, config, rng));
    }
    if (!ok) {
      warnings.push_back("start " + std::to_string(s + 1) + " discarded: k-means produced a tiny cluster");
      continue;
    }
    try {
      starts.push_back({model, observed_log_likelihood(data, model, config.labels, config.grid)});
    } catch (const Error& e) {
      warnings.push_back("start " + std::to_string(s + 1) + " discarded: " + e.what());
    }
  }
  std::stable_sort(starts.begin(), starts.end(),
                   [](const Start& a, const Start& b) { return a.log_likelihood > b.log_likelihood; });
  return starts;
}

inline FitResult run_ecm(const Matrix& data, MixtureModel model, const FitConfig& config) {
  FitResult res;
  EStepQuantities eq = e_step(data, model, config.labels, config.grid);
  res.log_likelihood_trace.push_back(eq.log_likelihood);
  for (int it = 0; it < config.max_iterations; ++it) {
    MixtureModel next = cm_step(data, eq, model, config, &res.warnings);
    EStepQuantities next_eq = e_step(data, next, config.labels, config.grid);
    const double prev = res.log_likelihood_trace.back();
    const double decrease = prev - next_eq.log_likelihood;
    if (decrease > 1e-8) {
      ++res.ascent_violations;
      res.worst_decrease = std::max(res.worst_decrease, decrease);
    }
    model = std::move(next);
    eq = std::move(next_eq);
    res.log_likelihood_trace.push_back(eq.log_likelihood);
    res.iterations = it + 1;
    const auto& tr = res.log_likelihood_trace;
    const std::size_t k = tr.size();
    if (k >= 3 && aitken_stop(tr[k - 3], tr[k - 2], tr[k - 1], config.epsilon)) {
      res.converged = true;
      break;
    }
  }
  res.model = std::move(model);
  res.responsibilities = eq.z;
  res.map_labels = map_labels(eq.z);
  return res;
}

}  // namespace detail

/// ECM fit from the best of n_starts k-means initializations; later starts are used when a component collapses.
inline FitResult fit(const Matrix& data, Index G, Index q, Index r, const FitConfig& config = {}) {
  const Index n = data.rows(), p = data.cols();
  const ConstraintReport report = check_constraints(p, q, r);
  if (!report) throw ConstraintViolation(report.message);
  if (r > 3) throw UnsupportedDimension("fit: skewness dimension above 3 is not supported");
  if (G < 1) throw DomainError("fit: G must be at least 1");
  if (n <= G) throw DomainError("fit: need more rows than components");
  config.validate(n);
  detail::check_data(data, p);
  detail::check_labels(config.labels, n, G);
  std::mt19937_64 rng(config.seed);
  std::vector<std::string> warnings;
  const auto starts = detail::initial_models(data, G, q, r, config, rng, warnings);
  std::vector<double> initial;
  for (const auto& s : starts) initial.push_back(s.log_likelihood);
  std::string last_error = "no usable starting values";
  for (std::size_t k = 0; k < starts.size(); ++k) {
    try {
      FitResult res = detail::run_ecm(data, starts[k].model, config);
      res.start_used = static_cast<int>(k);
      res.initial_log_likelihoods = initial;
      res.bic = bic(res.log_likelihood(), G, p, q, r, n);
      res.warnings.insert(res.warnings.begin(), warnings.begin(), warnings.end());
      return res;
    } catch (const ComponentCollapse& e) {
      warnings.push_back(std::string("start abandoned: ") + e.what());
      last_error = e.what();
    } catch (const DegenerateLikelihood& e) {
      warnings.push_back(std::string("start abandoned: ") + e.what());
      last_error = e.what();
    }
  }
  throw FitFailure("fit: every start failed (" + last_error + ")");
}

/// ECM from a given starting model, without the k-means initialization.
inline FitResult fit_from(const Matrix& data, const MixtureModel& start, const FitConfig& config = {}) {
  start.validate();
  config.validate(data.rows());
  detail::check_data(data, start.p());
  detail::check_labels(config.labels, data.rows(), start.G());
  FitResult res = detail::run_ecm(data, start, config);
  res.bic = bic(res.log_likelihood(), start.G(), start.p(), start.q(), start.r(), data.rows());
  return res;
}

struct GridCell {
  Index G = 0, q = 0, r = 0;
  std::optional<FitResult> result;
  std::string error;
};

/// Fits every admissible (G, q, r) and ranks the successful cells by BIC, highest first.
inline std::vector<GridCell> grid_search(const Matrix& data, const std::vector<Index>& G_set,
                                         const std::vector<Index>& q_set, const std::vector<Index>& r_set,
                                         const FitConfig& config = {}) {
  if (G_set.empty() || q_set.empty() || r_set.empty()) throw DomainError("grid_search: empty parameter set");
  std::vector<GridCell> cells;
  for (Index G : G_set)
    for (Index q : q_set)
      for (Index r : r_set)
        if (check_constraints(data.cols(), q, r) && r <= 3) cells.push_back({G, q, r, std::nullopt, {}});
  if (cells.empty()) throw ConstraintViolation("grid_search: no admissible (G, q, r) cell");
  auto run = [&](std::size_t idx) {
    GridCell& cell = cells[idx];
    FitConfig cfg = config;
    std::seed_seq seq{static_cast<std::uint64_t>(config.seed), static_cast<std::uint64_t>(idx)};
    std::vector<std::uint64_t> out(1);
    seq.generate(out.begin(), out.end());
    cfg.seed = out[0];
    try {
      cell.result = fit(data, cell.G, cell.q, cell.r, cfg);
    } catch (const Error& e) {
      cell.error = e.what();
    }
  };
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t workers = std::min<std::size_t>(cells.size(), config.threads > 0 ? config.threads : hw);
  if (workers <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::future<void>> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.push_back(std::async(std::launch::async, [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) run(i);
      }));
    for (auto& f : pool) f.get();
  }
  std::stable_sort(cells.begin(), cells.end(), [](const GridCell& a, const GridCell& b) {
    if (a.result.has_value() != b.result.has_value()) return a.result.has_value();
    if (!a.result) return false;
    return a.result->bic > b.result->bic;
  });
  if (!cells.front().result) throw FitFailure("grid_search: every cell failed");
  return cells;
}

}  // namespace mhthfa
