#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <vector>

#include "mixedsi/errors.hpp"
#include "mixedsi/estimation.hpp"
#include "mixedsi/maxstat.hpp"
#include "mixedsi/parallel.hpp"
#include "mixedsi/random.hpp"

namespace mixedsi {

/// Studentized bootstrap errors, one row per replicate. Row b depends only on
/// (data, spec, fit, master_seed, b).
struct BootstrapDraws {
  MatrixXd S;          // B x D, (mu_hat* - mu*) / sigma_hat*
  MatrixXd errors;     // B x D, mu_hat* - mu*
  MatrixXd variances;  // B x D, sigma_hat*^2 (floored)
  std::uint64_t master_seed = 0;
  ModelTag tag = ModelTag::NERM;
  std::size_t refit_failures = 0;
  std::size_t boundary_fits = 0;

  Index B() const { return S.rows(); }
  Index D() const { return S.cols(); }

  /// Wraps an externally generated statistic matrix (errors = S, unit
  /// variances), e.g. for calibration checks against known distributions.
  static BootstrapDraws from_statistics(MatrixXd stats) {
    BootstrapDraws out;
    out.errors = stats;
    out.variances = MatrixXd::Ones(stats.rows(), stats.cols());
    out.S = std::move(stats);
    return out;
  }
};

/// 1-based index floor((1-alpha) B) + 1, capped at B.
inline Index order_statistic_index(double alpha, Index B) {
  check_alpha(alpha);
  // The epsilon keeps e.g. 0.95 * 500 from flooring to 474.
  const auto k = static_cast<Index>(std::floor((1.0 - alpha) * static_cast<double>(B) + 1e-9)) + 1;
  return std::clamp<Index>(k, 1, B);
}

/// k-th smallest (1-based) of `values`.
inline double order_statistic(std::vector<double> values, Index k) {
  auto nth = values.begin() + (k - 1);
  std::nth_element(values.begin(), nth, values.end());
  return *nth;
}

inline double row_max_quantile(const MatrixXd& stats, double alpha) {
  check_alpha(alpha);
  if (stats.rows() < 1 || stats.cols() < 1) throw Error(ErrorCode::ShapeMismatch, "empty draw matrix");
  std::vector<double> maxima(static_cast<std::size_t>(stats.rows()));
  for (Index b = 0; b < stats.rows(); ++b) maxima[static_cast<std::size_t>(b)] = stats.row(b).cwiseAbs().maxCoeff();
  return order_statistic(std::move(maxima), order_statistic_index(alpha, stats.rows()));
}

struct BootstrapOptions {
  unsigned threads = 1;
  RemlOptions reml;
};

/// Parametric bootstrap under the fitted model: y* = X beta_hat + u* + e*,
/// refit by REML + BLUP, studentize with g1 at the bootstrap theta.
inline BootstrapDraws parametric_bootstrap(const BlockLmmData& data, const MixedParameterSpec& spec,
                                           const FitResult& fit, Index B, std::uint64_t master_seed,
                                           const BootstrapOptions& opt = {}) {
  check_spec(data, spec);
  if (B < 1) throw Error(ErrorCode::InvalidValue, "B must be at least 1");
  if (static_cast<std::uint64_t>(B) > std::numeric_limits<std::uint32_t>::max()) {
    throw Error(ErrorCode::SeedOverflow, "replicate index exceeds the seed stream range");
  }
  const Index D = data.num_clusters();
  const ModelTag tag = data.tag();
  const auto base = detail::cluster_moments(data);
  const double n_total = static_cast<double>(data.n_total());
  const double q = static_cast<double>(data.num_fixed());
  const VectorXd fixed_part = data.stacked_design() * fit.beta_hat;
  const double sd_u = std::sqrt(fit.theta.sigma2_u);
  const double sd_e = std::sqrt(fit.theta.sigma2_e);

  BootstrapDraws out;
  out.master_seed = master_seed;
  out.tag = tag;
  out.S.resize(B, D);
  out.errors.resize(B, D);
  out.variances.resize(B, D);
  std::atomic<std::size_t> failures{0};
  std::atomic<std::size_t> boundary{0};
  const VectorXd target_fixed = spec.k * fit.beta_hat;

  parallel_for(static_cast<std::size_t>(B), opt.threads, [&](std::size_t b) {
    NormalStream rng(derive_seed(master_seed, StreamTag::Bootstrap, b));
    VectorXd u_star(D);
    for (Index d = 0; d < D; ++d) u_star(d) = sd_u * rng();
    VectorXd y_star = fixed_part;
    Index row = 0;
    for (Index d = 0; d < D; ++d) {
      const auto& c = data.cluster(d);
      const double sd = tag == ModelTag::FHM ? std::sqrt(*c.error_var) : sd_e;
      for (Index j = 0; j < c.size(); ++j) y_star(row + j) += u_star(d) + sd * rng();
      row += c.size();
    }
    auto moments = base;
    detail::set_response(moments, data, y_star);
    RemlFit refit;
    try {
      refit = detail::reml_optimize(moments, tag, n_total, q, opt.reml);
    } catch (const Error&) {
      refit.converged = false;
      refit.theta = fit.theta;
    }
    if (!refit.converged) failures.fetch_add(1);
    if (refit.theta.sigma2_u <= kVarianceFloor * (1.0 + 1e-9)) boundary.fetch_add(1);
    const auto kernel = detail::blup_from_moments(moments, tag, floored(refit.theta));
    const VectorXd truth = target_fixed + spec.m.cwiseProduct(u_star);
    const VectorXd estimate = spec.k * kernel.beta + spec.m.cwiseProduct(kernel.u);
    const auto bi = static_cast<Index>(b);
    for (Index d = 0; d < D; ++d) {
      const double var = std::max(spec.m(d) * spec.m(d) * kernel.g1(d), kScaleFloor);
      out.errors(bi, d) = estimate(d) - truth(d);
      out.variances(bi, d) = var;
      out.S(bi, d) = out.errors(bi, d) / std::sqrt(var);
    }
  });
  out.refit_failures = failures.load();
  out.boundary_fits = boundary.load();
  return out;
}

inline CriticalValue critical_value_bs(const BootstrapDraws& draws, double alpha) {
  return {row_max_quantile(draws.S, alpha), Method::BS, alpha, std::nullopt};
}

/// Studentized contrast draws (A err*) / sqrt((A o A) var*), B x D'.
inline MatrixXd contrast_statistics(const BootstrapDraws& draws, const MatrixXd& A) {
  if (A.cols() != draws.D()) throw Error(ErrorCode::ShapeMismatch, "contrast matrix columns must equal D");
  const MatrixXd num = draws.errors * A.transpose();
  const MatrixXd var = draws.variances * A.array().square().matrix().transpose();
  return num.cwiseQuotient(var.cwiseMax(kScaleFloor).cwiseSqrt());
}

inline CriticalValue critical_value_contrast(const BootstrapDraws& draws, const MatrixXd& A, double alpha) {
  return {row_max_quantile(contrast_statistics(draws, A), alpha), Method::BS, alpha, std::nullopt};
}

/// Beran's balanced critical values from one level of bootstrap draws.
/// Levels use the right-continuous empirical cdf of each |S*_d|; the inverse
/// is the generalized inverse. All arithmetic is on integer ranks.
inline CriticalValue beran_critical_values(const BootstrapDraws& draws, double alpha) {
  check_alpha(alpha);
  const Index B = draws.B();
  const Index D = draws.D();
  if (B < 1 || D < 1) throw Error(ErrorCode::ShapeMismatch, "empty draw matrix");
  std::vector<std::vector<double>> sorted(static_cast<std::size_t>(D));
  for (Index d = 0; d < D; ++d) {
    auto& col = sorted[static_cast<std::size_t>(d)];
    col.resize(static_cast<std::size_t>(B));
    for (Index b = 0; b < B; ++b) col[static_cast<std::size_t>(b)] = std::abs(draws.S(b, d));
    std::sort(col.begin(), col.end());
  }
  std::vector<double> max_rank(static_cast<std::size_t>(B), 0.0);
  for (Index b = 0; b < B; ++b) {
    Index best = 0;
    for (Index d = 0; d < D; ++d) {
      const auto& col = sorted[static_cast<std::size_t>(d)];
      const auto rank = static_cast<Index>(std::upper_bound(col.begin(), col.end(), std::abs(draws.S(b, d))) - col.begin());
      best = std::max(best, rank);
    }
    max_rank[static_cast<std::size_t>(b)] = static_cast<double>(best);
  }
  const auto level_rank = static_cast<Index>(order_statistic(std::move(max_rank), order_statistic_index(alpha, B)));
  VectorXd per(D);
  for (Index d = 0; d < D; ++d) per(d) = sorted[static_cast<std::size_t>(d)][static_cast<std::size_t>(level_rank - 1)];
  return {per.maxCoeff(), Method::BE, alpha, per};
}

/// Subset max-quantiles sharing one draw matrix, so c_sub <= c_super holds
/// exactly for nested subsets.
class StepdownQuantiles {
 public:
  StepdownQuantiles(MatrixXd stats, double alpha) : abs_(stats.cwiseAbs()), alpha_(alpha) {
    check_alpha(alpha);
    k_ = order_statistic_index(alpha, abs_.rows());
  }

  double operator()(std::span<const Index> subset) const {
    if (subset.empty()) throw Error(ErrorCode::EmptySubset, "subset quantile of an empty set");
    std::vector<double> maxima(static_cast<std::size_t>(abs_.rows()), 0.0);
    for (Index b = 0; b < abs_.rows(); ++b) {
      double m = 0.0;
      for (Index d : subset) m = std::max(m, abs_(b, d));
      maxima[static_cast<std::size_t>(b)] = m;
    }
    return order_statistic(std::move(maxima), k_);
  }

  double alpha() const { return alpha_; }

 private:
  MatrixXd abs_;
  double alpha_;
  Index k_ = 1;
};

inline SubsetQuantile stepdown_quantile_provider(const BootstrapDraws& draws, double alpha) {
  StepdownQuantiles q(draws.S, alpha);
  return [q = std::move(q)](std::span<const Index> subset) { return q(subset); };
}

/// Rows = replicates, columns = clusters; full round-trip precision.
inline void write_draws_csv(std::ostream& os, const BootstrapDraws& draws, const std::vector<std::string>& ids = {}) {
  os.precision(17);
  os << "replicate";
  for (Index d = 0; d < draws.D(); ++d) {
    os << ',' << (ids.empty() ? "d" + std::to_string(d + 1) : ids[static_cast<std::size_t>(d)]);
  }
  os << '\n';
  for (Index b = 0; b < draws.B(); ++b) {
    os << b + 1;
    for (Index d = 0; d < draws.D(); ++d) os << ',' << draws.S(b, d);
    os << '\n';
  }
}

}  // namespace mixedsi
