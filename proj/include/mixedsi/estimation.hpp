#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "mixedsi/errors.hpp"
#include "mixedsi/model.hpp"

namespace mixedsi {

struct FitResult {
  VectorXd beta_hat;
  VectorXd u_hat;
  VectorXd mu_hat;
  VarianceComponents theta;
  VectorXd scale;  // sigma_hat(mu_hat_d) = |m_d| sqrt(g1_d)
  double loglik_restricted = 0.0;
};

struct RemlOptions {
  int max_iterations = 200;
  double loglik_tolerance = 1e-10;
  double param_tolerance = 1e-8;
};

struct RemlFit {
  VarianceComponents theta;
  double loglik_restricted = 0.0;
  int iterations = 0;
  bool converged = false;
  bool used_fallback = false;
};

namespace detail {

// Per-cluster sufficient statistics. Every likelihood, GLS and BLUP
// evaluation below runs on these, so a fit costs O(D (p+1)^2) per iteration
// regardless of the cluster sizes.
struct ClusterMoments {
  double n = 0.0;
  double known_error_var = 0.0;  // FHM only
  VectorXd sx;                   // X_d' 1
  MatrixXd xtx;                  // X_d' X_d
  VectorXd xty;                  // X_d' y_d
  double sy = 0.0;               // 1' y_d
  double yy = 0.0;               // y_d' y_d
};

inline std::vector<ClusterMoments> cluster_moments(const BlockLmmData& data) {
  std::vector<ClusterMoments> out(static_cast<std::size_t>(data.num_clusters()));
  for (Index d = 0; d < data.num_clusters(); ++d) {
    const auto& c = data.cluster(d);
    auto& m = out[static_cast<std::size_t>(d)];
    m.n = static_cast<double>(c.size());
    m.known_error_var = c.error_var.value_or(0.0);
    m.sx = c.X.colwise().sum().transpose();
    m.xtx = c.X.transpose() * c.X;
    m.xty = c.X.transpose() * c.y;
    m.sy = c.y.sum();
    m.yy = c.y.squaredNorm();
  }
  return out;
}

/// Replaces the response-dependent moments with those of the stacked `y`.
inline void set_response(std::vector<ClusterMoments>& moments, const BlockLmmData& data,
                         const VectorXd& y) {
  Index row = 0;
  for (Index d = 0; d < data.num_clusters(); ++d) {
    const auto& c = data.cluster(d);
    auto& m = moments[static_cast<std::size_t>(d)];
    const auto yd = y.segment(row, c.size());
    m.xty.noalias() = c.X.transpose() * yd;
    m.sy = yd.sum();
    m.yy = yd.squaredNorm();
    row += c.size();
  }
}

// Matrices of the form a I + b J (J = all-ones) on one cluster; closed under
// products, which is all the REML algebra needs for a random intercept.
struct IJForm {
  double a = 0.0;
  double b = 0.0;
};

inline IJForm mul(IJForm x, IJForm y, double n) { return {x.a * y.a, x.a * y.b + x.b * y.a + n * x.b * y.b}; }
inline double trace(IJForm f, double n) { return n * (f.a + f.b); }

inline double error_var(const ClusterMoments& m, ModelTag tag, const VarianceComponents& theta) {
  return tag == ModelTag::FHM ? m.known_error_var : theta.sigma2_e;
}

/// V_d^{-1} for V_d = e I + s2u J (Sherman-Morrison).
inline IJForm inverse_form(double e, double s2u, double n) { return {1.0 / e, -s2u / (e * (e + n * s2u))}; }

inline MatrixXd quad_x(IJForm f, const ClusterMoments& m) {
  MatrixXd out = f.a * m.xtx;
  out.noalias() += f.b * m.sx * m.sx.transpose();
  return out;
}

struct GlsSolution {
  VectorXd beta;
  MatrixXd a_inv;           // (X' V^-1 X)^-1
  std::vector<double> rr;   // r_d' r_d with r = y - X beta
  std::vector<double> sr;   // 1' r_d
  double log_det_v = 0.0;
  double log_det_a = 0.0;
  double quad = 0.0;        // r' V^-1 r
};

inline bool solve_gls(const std::vector<ClusterMoments>& moments, ModelTag tag,
                      const VarianceComponents& theta, GlsSolution& out) {
  const Index q = moments.front().sx.size();
  MatrixXd A = MatrixXd::Zero(q, q);
  VectorXd rhs = VectorXd::Zero(q);
  out.log_det_v = 0.0;
  for (const auto& m : moments) {
    const double e = error_var(m, tag, theta);
    const IJForm w = inverse_form(e, theta.sigma2_u, m.n);
    A += quad_x(w, m);
    rhs += w.a * m.xty + (w.b * m.sy) * m.sx;
    out.log_det_v += (m.n - 1.0) * std::log(e) + std::log(e + m.n * theta.sigma2_u);
  }
  Eigen::LLT<MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) return false;
  out.beta = llt.solve(rhs);
  out.a_inv = llt.solve(MatrixXd::Identity(q, q));
  out.log_det_a = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  out.rr.resize(moments.size());
  out.sr.resize(moments.size());
  out.quad = 0.0;
  for (std::size_t d = 0; d < moments.size(); ++d) {
    const auto& m = moments[d];
    const double e = error_var(m, tag, theta);
    const IJForm w = inverse_form(e, theta.sigma2_u, m.n);
    out.rr[d] = m.yy - 2.0 * out.beta.dot(m.xty) + out.beta.dot(m.xtx * out.beta);
    out.sr[d] = m.sy - m.sx.dot(out.beta);
    out.quad += w.a * out.rr[d] + w.b * out.sr[d] * out.sr[d];
  }
  return std::isfinite(out.quad);
}

inline double restricted_loglik(const GlsSolution& g, double n_total, double q) {
  return -0.5 * ((n_total - q) * std::log(2.0 * std::numbers::pi) + g.log_det_v + g.log_det_a + g.quad);
}

struct Problem {
  const std::vector<ClusterMoments>* moments;
  ModelTag tag;
  double n_total;
  double q;

  int dim() const { return tag == ModelTag::NERM ? 2 : 1; }

  VarianceComponents theta(const VectorXd& x) const {
    return tag == ModelTag::NERM ? VarianceComponents{x(0), x(1)} : VarianceComponents{0.0, x(0)};
  }

  double loglik(const VectorXd& x) const {
    GlsSolution g;
    if (!solve_gls(*moments, tag, theta(x), g)) return -std::numeric_limits<double>::infinity();
    return restricted_loglik(g, n_total, q);
  }
};

/// Score and expected (Fisher) information of the restricted likelihood.
/// The parameter derivatives of V_d are I (sigma2_e, NERM only) and J
/// (sigma2_u).
inline void score_information(const Problem& prob, const VarianceComponents& theta,
                              const GlsSolution& g, VectorXd& score, MatrixXd& info) {
  const int k_dim = prob.dim();
  std::array<IJForm, 2> deriv{};
  if (prob.tag == ModelTag::NERM) {
    deriv = {IJForm{1.0, 0.0}, IJForm{0.0, 1.0}};
  } else {
    deriv = {IJForm{0.0, 1.0}, IJForm{}};
  }
  const Index q = g.beta.size();
  std::array<double, 2> tr_wv{};
  std::array<double, 2> r_quad{};
  std::array<MatrixXd, 2> qx{MatrixXd::Zero(q, q), MatrixXd::Zero(q, q)};
  double tr_wvwv[2][2] = {{0, 0}, {0, 0}};
  MatrixXd rx[2][2] = {{MatrixXd::Zero(q, q), MatrixXd::Zero(q, q)}, {MatrixXd::Zero(q, q), MatrixXd::Zero(q, q)}};

  const auto& moments = *prob.moments;
  for (std::size_t d = 0; d < moments.size(); ++d) {
    const auto& m = moments[d];
    const double n = m.n;
    const IJForm w = inverse_form(error_var(m, prob.tag, theta), theta.sigma2_u, n);
    std::array<IJForm, 2> wv{};
    std::array<IJForm, 2> wvw{};
    for (int k = 0; k < k_dim; ++k) {
      wv[k] = mul(w, deriv[k], n);
      wvw[k] = mul(wv[k], w, n);
      tr_wv[k] += trace(wv[k], n);
      qx[k] += quad_x(wvw[k], m);
      r_quad[k] += wvw[k].a * g.rr[d] + wvw[k].b * g.sr[d] * g.sr[d];
    }
    for (int k = 0; k < k_dim; ++k) {
      for (int l = 0; l <= k; ++l) {
        tr_wvwv[k][l] += trace(mul(wv[k], wv[l], n), n);
        rx[k][l] += quad_x(mul(wvw[k], wv[l], n), m);
      }
    }
  }
  score.resize(k_dim);
  info.resize(k_dim, k_dim);
  for (int k = 0; k < k_dim; ++k) {
    score(k) = -0.5 * (tr_wv[k] - (g.a_inv * qx[k]).trace()) + 0.5 * r_quad[k];
    for (int l = 0; l <= k; ++l) {
      const double v = 0.5 * (tr_wvwv[k][l] - 2.0 * (g.a_inv * rx[k][l]).trace() +
                              (g.a_inv * qx[k] * g.a_inv * qx[l]).trace());
      info(k, l) = v;
      info(l, k) = v;
    }
  }
}

inline VectorXd starting_values(const Problem& prob) {
  const auto& moments = *prob.moments;
  const Index q = moments.front().sx.size();
  MatrixXd xtx = MatrixXd::Zero(q, q);
  VectorXd xty = VectorXd::Zero(q);
  double yy = 0.0;
  for (const auto& m : moments) {
    xtx += m.xtx;
    xty += m.xty;
    yy += m.yy;
  }
  const VectorXd beta = xtx.ldlt().solve(xty);
  const double rss = std::max(0.0, yy - 2.0 * beta.dot(xty) + beta.dot(xtx * beta));
  if (prob.tag == ModelTag::NERM && rss <= 1e-24 * std::max(1.0, yy)) {
    throw Error(ErrorCode::DegenerateData, "residual variance is zero");
  }
  const double s2 = rss / std::max(1.0, prob.n_total - prob.q);
  if (prob.tag == ModelTag::FHM) {
    double mean_e = 0.0;
    for (const auto& m : moments) mean_e += m.known_error_var;
    mean_e /= static_cast<double>(moments.size());
    return VectorXd::Constant(1, std::max(s2 - mean_e, 0.05 * s2 + kVarianceFloor));
  }
  double within = 0.0;
  for (const auto& m : moments) {
    const double sr = m.sy - m.sx.dot(beta);
    const double rr = m.yy - 2.0 * beta.dot(m.xty) + beta.dot(m.xtx * beta);
    within += std::max(0.0, rr - sr * sr / m.n);
  }
  const double within_df = prob.n_total - static_cast<double>(moments.size());
  const double s2e = within_df > 0 && within > 0 ? within / within_df : 0.5 * s2;
  VectorXd x(2);
  x << std::max(s2e, kVarianceFloor), std::max(s2 - s2e, 0.05 * s2 + kVarianceFloor);
  return x;
}

// Golden-section coordinate ascent; only used when Fisher scoring fails.
inline bool coordinate_search(const Problem& prob, VectorXd& x, double& ll, const RemlOptions& opt) {
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double hi = 1.0;
  for (const auto& m : *prob.moments) hi = std::max(hi, m.known_error_var);
  hi = 10.0 * (hi + x.cwiseAbs().sum()) + 1.0;
  for (int cycle = 0; cycle < 200; ++cycle) {
    double moved = 0.0;
    for (int k = 0; k < x.size(); ++k) {
      double lo_b = kVarianceFloor, hi_b = hi;
      VectorXd probe = x;
      auto f = [&](double v) {
        probe(k) = v;
        return prob.loglik(probe);
      };
      double c = hi_b - phi * (hi_b - lo_b), d = lo_b + phi * (hi_b - lo_b);
      double fc = f(c), fd = f(d);
      while (hi_b - lo_b > 1e-12 * std::max(1.0, hi_b)) {
        if (fc >= fd) {
          hi_b = d; d = c; fd = fc;
          c = hi_b - phi * (hi_b - lo_b);
          fc = f(c);
        } else {
          lo_b = c; c = d; fc = fd;
          d = lo_b + phi * (hi_b - lo_b);
          fd = f(d);
        }
      }
      double best = 0.5 * (lo_b + hi_b);
      if (f(kVarianceFloor) > f(best)) best = kVarianceFloor;
      probe = x;
      probe(k) = best;
      const double cand = prob.loglik(probe);
      if (cand >= ll) {
        moved = std::max(moved, std::abs(best - x(k)));
        x(k) = best;
        ll = cand;
      }
    }
    if (moved < opt.param_tolerance * std::max(1.0, x.cwiseAbs().maxCoeff())) return true;
  }
  return false;
}

inline RemlFit reml_optimize(const std::vector<ClusterMoments>& moments, ModelTag tag, double n_total,
                             double q, const RemlOptions& opt = {}) {
  if (n_total <= q) throw Error(ErrorCode::DegenerateData, "REML needs n_total > p+1");
  const Problem prob{&moments, tag, n_total, q};
  VectorXd x = starting_values(prob).cwiseMax(kVarianceFloor);
  GlsSolution g;
  if (!solve_gls(moments, tag, prob.theta(x), g)) throw Error(ErrorCode::SingularSystem, "X'V^-1X is singular");
  double ll = restricted_loglik(g, n_total, q);

  RemlFit out;
  VectorXd score;
  MatrixXd info;
  bool converged = false;
  bool stalled = false;
  int it = 0;
  for (; it < opt.max_iterations && !converged; ++it) {
    score_information(prob, prob.theta(x), g, score, info);
    // Coordinates pinned at the floor with an outward gradient stay fixed.
    std::vector<int> free;
    for (int k = 0; k < prob.dim(); ++k) {
      if (!(x(k) <= kVarianceFloor * (1.0 + 1e-9) && score(k) <= 0.0)) free.push_back(k);
    }
    if (free.empty()) {
      converged = true;
      break;
    }
    const auto nf = static_cast<Index>(free.size());
    MatrixXd sub(nf, nf);
    VectorXd rhs(nf);
    for (Index i = 0; i < nf; ++i) {
      rhs(i) = score(free[static_cast<std::size_t>(i)]);
      for (Index j = 0; j < nf; ++j) sub(i, j) = info(free[static_cast<std::size_t>(i)], free[static_cast<std::size_t>(j)]);
    }
    Eigen::LLT<MatrixXd> llt(sub);
    if (llt.info() != Eigen::Success) {
      stalled = true;
      break;
    }
    const VectorXd step_free = llt.solve(rhs);
    VectorXd dx = VectorXd::Zero(prob.dim());
    for (Index i = 0; i < nf; ++i) dx(free[static_cast<std::size_t>(i)]) = step_free(i);

    double step = 1.0;
    bool accepted = false;
    VectorXd cand;
    double ll_cand = ll;
    for (int h = 0; h < 50; ++h, step *= 0.5) {
      cand = (x + step * dx).cwiseMax(kVarianceFloor);
      ll_cand = prob.loglik(cand);
      if (ll_cand >= ll) {
        accepted = true;
        break;
      }
    }
    const double scale = std::max(1.0, x.cwiseAbs().maxCoeff());
    if (!accepted) {
      // No ascent left at machine precision: converged if the Newton step is
      // already negligible, otherwise hand over to the fallback.
      if (dx.cwiseAbs().maxCoeff() < 1e3 * opt.param_tolerance * scale) {
        converged = true;
      } else {
        stalled = true;
      }
      break;
    }
    const double dll = ll_cand - ll;
    const double dpar = (cand - x).cwiseAbs().maxCoeff();
    x = cand;
    ll = ll_cand;
    solve_gls(moments, tag, prob.theta(x), g);
    if (std::abs(dll) < opt.loglik_tolerance && dpar < opt.param_tolerance * scale) converged = true;
  }
  out.iterations = it;
  if (!converged) {
    out.used_fallback = true;
    converged = coordinate_search(prob, x, ll, opt);
    (void)stalled;
  }
  out.theta = prob.theta(x);
  if (tag == ModelTag::FHM) out.theta.sigma2_e = 0.0;
  out.loglik_restricted = ll;
  out.converged = converged;
  return out;
}

inline VectorXd g1_from_moments(const std::vector<ClusterMoments>& moments, ModelTag tag,
                                const VarianceComponents& theta) {
  VectorXd g(static_cast<Index>(moments.size()));
  for (std::size_t d = 0; d < moments.size(); ++d) {
    const double e = error_var(moments[d], tag, theta);
    const double per_unit = e / moments[d].n;
    const double s2u = theta.sigma2_u;
    g(static_cast<Index>(d)) = s2u / (s2u + per_unit) * per_unit;
  }
  return g;
}

/// beta, u and g1 at a fixed theta; the shared kernel of fit_gls_blup and
/// the bootstrap refits.
struct BlupKernel {
  VectorXd beta;
  VectorXd u;
  VectorXd g1;
  double loglik = 0.0;
};

inline BlupKernel blup_from_moments(const std::vector<ClusterMoments>& moments, ModelTag tag,
                                    const VarianceComponents& theta) {
  GlsSolution g;
  if (!solve_gls(moments, tag, theta, g)) throw Error(ErrorCode::SingularSystem, "X'V^-1X is singular");
  BlupKernel out;
  out.beta = g.beta;
  out.u.resize(static_cast<Index>(moments.size()));
  for (std::size_t d = 0; d < moments.size(); ++d) {
    const auto& m = moments[d];
    const IJForm w = inverse_form(error_var(m, tag, theta), theta.sigma2_u, m.n);
    out.u(static_cast<Index>(d)) = theta.sigma2_u * (w.a + w.b * m.n) * g.sr[d];
  }
  out.g1 = g1_from_moments(moments, tag, theta);
  const double q = static_cast<double>(g.beta.size());
  double n_total = 0.0;
  for (const auto& m : moments) n_total += m.n;
  out.loglik = restricted_loglik(g, n_total, q);
  return out;
}

}  // namespace detail

/// Restricted log-likelihood (including the 2*pi constant) at theta.
inline double restricted_loglik(const BlockLmmData& data, const VarianceComponents& theta) {
  const auto moments = detail::cluster_moments(data);
  detail::GlsSolution g;
  if (!detail::solve_gls(moments, data.tag(), floored(theta), g)) {
    throw Error(ErrorCode::SingularSystem, "X'V^-1X is singular");
  }
  return detail::restricted_loglik(g, static_cast<double>(data.n_total()), static_cast<double>(data.num_fixed()));
}

/// REML estimate of theta by Fisher scoring with step-halving on the
/// nonnegative orthant (floored at kVarianceFloor).
inline RemlFit reml_fit(const BlockLmmData& data, const RemlOptions& opt = {}) {
  validate(data);
  const auto moments = detail::cluster_moments(data);
  RemlFit fit = detail::reml_optimize(moments, data.tag(), static_cast<double>(data.n_total()),
                                      static_cast<double>(data.num_fixed()), opt);
  if (!fit.converged) throw Error(ErrorCode::NoConvergence, "REML iteration budget exhausted");
  return fit;
}

/// g1_d for a unit random-intercept weight (m_d = 1).
inline VectorXd g1(const BlockLmmData& data, const VarianceComponents& theta) {
  return detail::g1_from_moments(detail::cluster_moments(data), data.tag(), floored(theta));
}

/// m' (G - G Z' V^-1 Z G) m evaluated with dense per-cluster matrices, m = 1.
inline VectorXd g1_matrix_form(const BlockLmmData& data, const VarianceComponents& theta) {
  const VarianceComponents t = floored(theta);
  VectorXd out(data.num_clusters());
  for (Index d = 0; d < data.num_clusters(); ++d) {
    const Index n = data.cluster(d).size();
    const double e = cluster_error_variance(data, t, d);
    const MatrixXd V = e * MatrixXd::Identity(n, n) + t.sigma2_u * MatrixXd::Ones(n, n);
    const VectorXd z = VectorXd::Ones(n);
    const VectorXd vz = V.llt().solve(z);
    out(d) = t.sigma2_u - t.sigma2_u * z.dot(vz) * t.sigma2_u;
  }
  return out;
}

/// Contribution of estimating beta to the MSE of the BLUP of mu_d.
inline VectorXd g2(const BlockLmmData& data, const VarianceComponents& theta, const MixedParameterSpec& spec) {
  check_spec(data, spec);
  const VarianceComponents t = floored(theta);
  const auto moments = detail::cluster_moments(data);
  detail::GlsSolution g;
  if (!detail::solve_gls(moments, data.tag(), t, g)) throw Error(ErrorCode::SingularSystem, "X'V^-1X is singular");
  VectorXd out(data.num_clusters());
  for (Index d = 0; d < data.num_clusters(); ++d) {
    const auto& m = moments[static_cast<std::size_t>(d)];
    const auto w = detail::inverse_form(detail::error_var(m, data.tag(), t), t.sigma2_u, m.n);
    // b_d = k_d - X_d' a_d with a_d' = m_d G_d Z_d' V_d^-1
    const VectorXd b = spec.k.row(d).transpose() - spec.m(d) * t.sigma2_u * (w.a + w.b * m.n) * m.sx;
    out(d) = std::max(0.0, b.dot(g.a_inv * b));
  }
  return out;
}

/// GLS estimate of beta and BLUP of u at a given theta.
inline FitResult fit_gls_blup(const BlockLmmData& data, const MixedParameterSpec& spec,
                              const VarianceComponents& theta) {
  check_spec(data, spec);
  VarianceComponents t = floored(theta);
  if (data.tag() == ModelTag::FHM) t.sigma2_e = 0.0;
  const auto moments = detail::cluster_moments(data);
  const auto k = detail::blup_from_moments(moments, data.tag(), t);
  FitResult fit;
  fit.beta_hat = k.beta;
  fit.u_hat = k.u;
  fit.mu_hat = eval_mixed_parameters(data, spec, k.beta, k.u);
  fit.theta = t;
  fit.scale = spec.m.cwiseAbs().cwiseProduct(k.g1.cwiseSqrt());
  fit.loglik_restricted = k.loglik;
  return fit;
}

/// REML followed by GLS/BLUP at theta_hat.
inline FitResult eblup(const BlockLmmData& data, const MixedParameterSpec& spec, const RemlOptions& opt = {}) {
  check_spec(data, spec);
  const RemlFit reml = reml_fit(data, opt);
  FitResult fit = fit_gls_blup(data, spec, reml.theta);
  fit.loglik_restricted = reml.loglik_restricted;
  return fit;
}

/// L_d^{-1}(y_d - X_d beta_hat) with V_d(theta_hat) = L_d L_d', stacked.
inline VectorXd cholesky_residuals(const BlockLmmData& data, const FitResult& fit) {
  VectorXd out(data.n_total());
  Index row = 0;
  for (Index d = 0; d < data.num_clusters(); ++d) {
    const auto& c = data.cluster(d);
    const Index n = c.size();
    const double e = cluster_error_variance(data, fit.theta, d);
    const MatrixXd V = e * MatrixXd::Identity(n, n) + fit.theta.sigma2_u * MatrixXd::Ones(n, n);
    Eigen::LLT<MatrixXd> llt(V);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::CholeskyFailure, "V_d is not positive definite");
    const VectorXd r = c.y - c.X * fit.beta_hat;
    out.segment(row, n) = llt.matrixL().solve(r);
    row += n;
  }
  return out;
}

/// u_hat_d / sqrt(sigma2_u - g1_d); zero when that variance is below 1e-12.
inline VectorXd eb_random_effects(const BlockLmmData& data, const FitResult& fit) {
  const VectorXd g = g1(data, fit.theta);
  VectorXd out(data.num_clusters());
  for (Index d = 0; d < data.num_clusters(); ++d) {
    const double v = fit.theta.sigma2_u - g(d);
    out(d) = v < 1e-12 ? 0.0 : fit.u_hat(d) / std::sqrt(v);
  }
  return out;
}

}  // namespace mixedsi
