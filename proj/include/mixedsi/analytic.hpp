#pragma once

#include <Eigen/Dense>
#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include "mixedsi/errors.hpp"
#include "mixedsi/maxstat.hpp"
#include "mixedsi/model.hpp"
#include "mixedsi/monte_carlo.hpp"

namespace mixedsi {

/// Phi^{-1}(1 - alpha / (2D)).
inline CriticalValue bonferroni_cv(Index D, double alpha) {
  check_alpha(alpha);
  if (D < 1) throw Error(ErrorCode::InvalidValue, "D must be at least 1");
  const boost::math::normal_distribution<double> normal;
  const double tail = alpha / (2.0 * static_cast<double>(D));
  return {boost::math::quantile(boost::math::complement(normal, tail)), Method::BO, alpha, std::nullopt};
}

/// Ridge-regression form of the BLUP of c' phi: l' y with
/// l' = c' (C'R^-1C + G+)^-1 C'R^-1.
struct RidgeWeights {
  VectorXd l;                 // length n_total
  double l_m_norm_sq = 0.0;   // c' (C'C + sigma_e^2 G+)^-1 c, i.e. ||l_M||^2
  double sigma_e = 1.0;       // sigma_e such that sigma_e^2 ||l_M||^2 = Var(c'(phi_hat - phi))
};

inline RidgeWeights ridge_weights(const BlockLmmData& data, const VarianceComponents& theta, const VectorXd& c) {
  const VarianceComponents t = floored(theta);
  const Index q = data.num_fixed();
  const Index D = data.num_clusters();
  if (c.size() != q + D) throw Error(ErrorCode::ShapeMismatch, "c must have length p+1+D");
  const MatrixXd K = mixed_model_precision(data, t);
  Eigen::LLT<MatrixXd> llt(K);
  if (llt.info() != Eigen::Success) throw Error(ErrorCode::CholeskyFailure, "mixed-model precision is not positive definite");
  const VectorXd kc = llt.solve(c);
  RidgeWeights out;
  out.l.resize(data.n_total());
  Index row = 0;
  for (Index d = 0; d < D; ++d) {
    const auto& cl = data.cluster(d);
    const double r_inv = 1.0 / cluster_error_variance(data, t, d);
    // row i of C is (x_i', e_d'), so l_i = r_inv * (x_i' kc_fixed + kc_{q+d})
    out.l.segment(row, cl.size()) = r_inv * (cl.X * kc.head(q)).array() + r_inv * kc(q + d);
    row += cl.size();
  }
  const double variance = c.dot(kc);
  // Under NERM R = sigma_e^2 I; under FHM R is the known diagonal and sigma_e := 1.
  out.sigma_e = data.tag() == ModelTag::NERM ? std::sqrt(t.sigma2_e) : 1.0;
  out.l_m_norm_sq = variance / (out.sigma_e * out.sigma_e);
  return out;
}

/// Geometric and correction constants of the tube bound; supplied by the
/// user, never estimated.
struct TubeConstants {
  double kappa0 = 1.0;
  double zeta0 = 0.0;
  double kappa2 = 0.0;
  double zeta1 = 0.0;
  double m0 = 0.0;
  double euler = 0.0;
  double xi0 = 1.0;
  double eta0 = 0.0;
  double nu = 1.0;
};

inline void check_tube_constants(const TubeConstants& k) {
  if (!(k.kappa0 > 0.0) || !std::isfinite(k.kappa0)) throw Error(ErrorCode::InvalidConstants, "kappa0 must be positive");
  if (!(k.nu >= 1.0) || !std::isfinite(k.nu)) throw Error(ErrorCode::InvalidConstants, "nu must be at least 1");
  if (!(k.xi0 > 0.0) || !std::isfinite(k.xi0)) throw Error(ErrorCode::InvalidConstants, "xi0 must be positive");
  if (!(k.zeta0 >= 0.0) || !(k.eta0 >= 0.0)) throw Error(ErrorCode::InvalidConstants, "zeta0 and eta0 must be nonnegative");
}

namespace detail {

// Chi-mixture integrals of the Gaussian tail terms at c' = c xi0.
struct ChiIntegrals {
  double a1;  // {1 + c'^2/nu}^{-nu/2}
  double a2;  // c'/sqrt(nu) * sqrt2 Gamma((nu+1)/2)/Gamma(nu/2) * {1 + c'^2/nu}^{-(nu+1)/2}
  double a3;  // c'^2/nu * 2 Gamma((nu+2)/2)/Gamma(nu/2) * {1 + c'^2/nu}^{-(nu+2)/2}
};

inline ChiIntegrals chi_integrals(double c, const TubeConstants& k) {
  const double cp = c * k.xi0;
  const double nu = k.nu;
  const double base = std::log1p(cp * cp / nu);
  const double g1 = boost::math::tgamma_ratio((nu + 1.0) / 2.0, nu / 2.0);
  const double g2 = boost::math::tgamma_ratio((nu + 2.0) / 2.0, nu / 2.0);
  return {std::exp(-0.5 * nu * base),
          cp / std::sqrt(nu) * std::numbers::sqrt2 * g1 * std::exp(-0.5 * (nu + 1.0) * base),
          cp * cp / nu * 2.0 * g2 * std::exp(-0.5 * (nu + 2.0) * base)};
}

inline double two_sided_t_tail(double x, double nu) {
  const boost::math::students_t_distribution<double> t(nu);
  return 2.0 * boost::math::cdf(boost::math::complement(t, std::abs(x)));
}

inline double f_tail(double x, double d1, double nu) {
  if (x <= 0.0) return 1.0;
  const boost::math::fisher_f_distribution<double> f(d1, nu);
  return boost::math::cdf(boost::math::complement(f, x));
}

}  // namespace detail

/// Right-hand side of the volume-of-tube tail bound on alpha for critical
/// value c, branch selected by the covariate count p (1, 2 or >= 3).
inline double tube_alpha_bound(Index p, double c, const TubeConstants& k) {
  check_tube_constants(k);
  if (p < 1) throw Error(ErrorCode::InvalidValue, "p must be at least 1");
  if (!(c > 0.0)) throw Error(ErrorCode::InvalidValue, "c must be positive");
  const double pi = std::numbers::pi;
  if (p == 1) {
    const auto a = detail::chi_integrals(c, k);
    return k.kappa0 / pi * (a.a1 + k.eta0 * a.a2) + k.euler * detail::two_sided_t_tail(c * k.xi0, k.nu);
  }
  if (p == 2) {
    const auto a = detail::chi_integrals(c, k);
    const double volume = k.kappa0 / (std::numbers::sqrt2 * std::pow(pi, 1.5)) *
                          (a.a2 - k.eta0 * c * k.xi0 / std::sqrt(k.nu) * a.a1 + k.eta0 * a.a3);
    const double boundary = k.zeta0 / (2.0 * pi) * (a.a1 + k.eta0 * a.a2);
    return volume + boundary + 2.0 * k.euler * detail::two_sided_t_tail(c * k.xi0, k.nu);
  }
  // sigma_e / sigma_hat_e is taken at its population value 1.
  const double pd = static_cast<double>(p);
  const double shifted = c * k.xi0 - k.eta0;
  const double s2 = shifted > 0.0 ? shifted * shifted : 0.0;
  const double t1 = k.kappa0 * std::tgamma((pd + 1.0) / 2.0) / std::pow(pi, (pd + 1.0) / 2.0) *
                    detail::f_tail(s2 / (pd + 1.0), pd + 1.0, k.nu);
  const double t2 = k.zeta0 / 2.0 * std::tgamma(pd / 2.0) / std::pow(pi, pd / 2.0) * detail::f_tail(s2 / pd, pd, k.nu);
  const double t3 = (k.kappa2 + k.zeta1 + k.m0) / (2.0 * pi) * std::tgamma((pd - 1.0) / 2.0) /
                    std::pow(pi, (pd - 1.0) / 2.0) * detail::f_tail(s2 / (pd - 1.0), pd - 1.0, k.nu);
  return t1 + t2 + t3;
}

struct TubeSearch {
  double lower = 1e-6;
  double upper = 100.0;
  int max_iterations = 200;
  double tolerance = 1e-8;
  int scan_points = 2000;
};

/// Smallest c in the bracket with tube_alpha_bound(p, c) <= alpha.
inline CriticalValue tube_cv(Index p, double alpha, const TubeConstants& k, const TubeSearch& search = {}) {
  check_alpha(alpha);
  check_tube_constants(k);
  auto f = [&](double c) { return tube_alpha_bound(p, c, k); };
  if (f(search.upper) > alpha) {
    throw Error(ErrorCode::BoundUnattainable, "tail bound exceeds alpha over the whole search bracket");
  }
  // Log-spaced scan for the crossing; more than one crossing means the bound
  // is not monotone around alpha and the root is ambiguous.
  const double log_lo = std::log(search.lower);
  const double log_hi = std::log(search.upper);
  double lo = search.lower, hi = search.upper;
  int crossings = 0;
  double prev_c = search.lower;
  bool prev_above = f(search.lower) > alpha;
  const bool starts_below = !prev_above;
  for (int i = 1; i < search.scan_points; ++i) {
    const double c = std::exp(log_lo + (log_hi - log_lo) * i / (search.scan_points - 1));
    const bool above = f(c) > alpha;
    if (prev_above != above) {
      ++crossings;
      if (!above) {
        lo = prev_c;
        hi = c;
      }
    }
    prev_above = above;
    prev_c = c;
  }
  if (starts_below && crossings == 0) return {search.lower, Method::VT, alpha, std::nullopt};
  if (starts_below || crossings != 1) {
    throw Error(ErrorCode::NonMonotoneBound, "tail bound crosses alpha more than once");
  }
  for (int it = 0; it < search.max_iterations && hi - lo > search.tolerance * 1e-2; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (f(mid) > alpha) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return {hi, Method::VT, alpha, std::nullopt};
}

/// Volume-of-tube intervals: half-width c_VT sigma_e ||l_M(c_d)|| with c_d
/// the mixed-parameter selector of cluster d.
inline SimultaneousIntervals tube_spi(const BlockLmmData& data, const FitResult& fit, const MixedParameterSpec& spec,
                                      const CriticalValue& critical) {
  const Index q = data.num_fixed();
  const Index D = data.num_clusters();
  VectorXd scales(D);
  for (Index d = 0; d < D; ++d) {
    VectorXd c = VectorXd::Zero(q + D);
    c.head(q) = spec.k.row(d).transpose();
    c(q + d) = spec.m(d);
    const auto w = ridge_weights(data, fit.theta, c);
    scales(d) = w.sigma_e * std::sqrt(w.l_m_norm_sq);
  }
  return build_spi(fit.mu_hat, scales, critical);
}

}  // namespace mixedsi
