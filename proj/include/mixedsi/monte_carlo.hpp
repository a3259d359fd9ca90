#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <vector>

#include "mixedsi/bootstrap.hpp"
#include "mixedsi/errors.hpp"
#include "mixedsi/maxstat.hpp"
#include "mixedsi/model.hpp"
#include "mixedsi/parallel.hpp"
#include "mixedsi/random.hpp"

namespace mixedsi {

/// Normal approximation N(0, (C' R^-1 C + G+)^-1) to the estimation error of
/// (beta_hat, u_hat); coordinates ordered fixed part first, then clusters.
struct JointNormalModel {
  MatrixXd precision;
  MatrixXd covariance;
  MatrixXd cov_factor;  // lower L with L L' = covariance
  Index num_fixed = 0;
  Index num_random = 0;

  Index dim() const { return num_fixed + num_random; }

  static JointNormalModel from_covariance(MatrixXd covariance, Index num_fixed) {
    JointNormalModel out;
    Eigen::LLT<MatrixXd> llt(covariance);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::CholeskyFailure, "covariance is not positive definite");
    out.cov_factor = llt.matrixL();
    out.precision = llt.solve(MatrixXd::Identity(covariance.rows(), covariance.cols()));
    out.covariance = std::move(covariance);
    out.num_fixed = num_fixed;
    out.num_random = out.covariance.rows() - num_fixed;
    return out;
  }
};

/// Mixed-model-equation coefficient matrix C' R^-1 C + G+, assembled from the
/// block structure (Z has one all-ones column per cluster).
inline MatrixXd mixed_model_precision(const BlockLmmData& data, const VarianceComponents& theta) {
  const VarianceComponents t = floored(theta);
  const Index q = data.num_fixed();
  const Index D = data.num_clusters();
  MatrixXd K = MatrixXd::Zero(q + D, q + D);
  for (Index d = 0; d < D; ++d) {
    const auto& c = data.cluster(d);
    const double r_inv = 1.0 / cluster_error_variance(data, t, d);
    K.topLeftCorner(q, q).noalias() += r_inv * c.X.transpose() * c.X;
    const VectorXd sx = r_inv * c.X.colwise().sum().transpose();
    K.block(0, q + d, q, 1) = sx;
    K.block(q + d, 0, 1, q) = sx.transpose();
    K(q + d, q + d) = r_inv * static_cast<double>(c.size()) + 1.0 / t.sigma2_u;
  }
  return K;
}

inline JointNormalModel build_joint_normal(const BlockLmmData& data, const VarianceComponents& theta_hat) {
  JointNormalModel out;
  out.precision = mixed_model_precision(data, theta_hat);
  out.num_fixed = data.num_fixed();
  out.num_random = data.num_clusters();
  Eigen::LLT<MatrixXd> prec(out.precision);
  if (prec.info() != Eigen::Success) throw Error(ErrorCode::CholeskyFailure, "mixed-model precision is not positive definite");
  out.covariance = prec.solve(MatrixXd::Identity(out.dim(), out.dim()));
  Eigen::LLT<MatrixXd> cov(out.covariance);
  if (cov.info() != Eigen::Success) throw Error(ErrorCode::CholeskyFailure, "joint covariance is not positive definite");
  out.cov_factor = cov.matrixL();
  return out;
}

/// Rows c_d' = (k_d', m_d e_d') selecting mu_d from (beta, u).
inline MatrixXd mixed_parameter_selector(const JointNormalModel& model, const MixedParameterSpec& spec) {
  if (spec.k.cols() != model.num_fixed || spec.m.size() != model.num_random || spec.k.rows() != model.num_random) {
    throw Error(ErrorCode::ShapeMismatch, "spec does not match the joint normal model");
  }
  MatrixXd C = MatrixXd::Zero(model.num_random, model.dim());
  C.leftCols(model.num_fixed) = spec.k;
  for (Index d = 0; d < model.num_random; ++d) C(d, model.num_fixed + d) = spec.m(d);
  return C;
}

struct McOptions {
  unsigned threads = 1;
  /// Standard errors for studentizing; empty means the model-implied
  /// sqrt(c_d' Cov c_d).
  VectorXd scales;
};

namespace detail {
inline constexpr Index kMcChunk = 4096;
}

/// Monte Carlo draws of max_r |T_r z| / scale_r for z ~ N(0, I), where
/// T = selector * L. Chunks of draws carry their own derived seeds.
inline std::vector<double> mc_max_draws(const MatrixXd& T, const VectorXd& scales, Index K, std::uint64_t master_seed,
                                        unsigned threads) {
  if (K < 1) throw Error(ErrorCode::InvalidValue, "K must be at least 1");
  std::vector<double> maxima(static_cast<std::size_t>(K));
  const Index chunks = (K + detail::kMcChunk - 1) / detail::kMcChunk;
  const VectorXd inv_scale = scales.cwiseMax(kScaleFloor).cwiseInverse();
  parallel_for(static_cast<std::size_t>(chunks), threads, [&](std::size_t chunk) {
    NormalStream rng(derive_seed(master_seed, StreamTag::MonteCarlo, chunk));
    const Index begin = static_cast<Index>(chunk) * detail::kMcChunk;
    const Index end = std::min(K, begin + detail::kMcChunk);
    VectorXd z(T.cols());
    VectorXd v(T.rows());
    for (Index i = begin; i < end; ++i) {
      for (Index j = 0; j < z.size(); ++j) z(j) = rng();
      v.noalias() = T * z;
      maxima[static_cast<std::size_t>(i)] = v.cwiseAbs().cwiseProduct(inv_scale).maxCoeff();
    }
  });
  return maxima;
}

inline CriticalValue critical_value_mc_rows(const JointNormalModel& model, const MatrixXd& selector, Index K, double alpha,
                                            std::uint64_t master_seed, const McOptions& opt = {}) {
  check_alpha(alpha);
  const MatrixXd T = selector * model.cov_factor;
  VectorXd scales = opt.scales.size() > 0 ? opt.scales : VectorXd(T.rowwise().norm());
  if (scales.size() != T.rows()) throw Error(ErrorCode::ShapeMismatch, "scale vector length mismatch");
  auto maxima = mc_max_draws(T, scales, K, master_seed, opt.threads);
  return {order_statistic(std::move(maxima), order_statistic_index(alpha, K)), Method::MC, alpha, std::nullopt};
}

/// c_MC: the ([(1-alpha)K]+1)-th order statistic of the simulated max
/// statistic of the mixed parameters.
inline CriticalValue critical_value_mc(const JointNormalModel& model, const MixedParameterSpec& spec, Index K, double alpha,
                                       std::uint64_t master_seed, const McOptions& opt = {}) {
  return critical_value_mc_rows(model, mixed_parameter_selector(model, spec), K, alpha, master_seed, opt);
}

/// Contrast version for testing H0: A mu = h.
inline CriticalValue critical_value_mc_contrast(const JointNormalModel& model, const MixedParameterSpec& spec,
                                                const MatrixXd& A, Index K, double alpha, std::uint64_t master_seed,
                                                const McOptions& opt = {}) {
  if (A.cols() != model.num_random) throw Error(ErrorCode::ShapeMismatch, "contrast matrix columns must equal D");
  return critical_value_mc_rows(model, A * mixed_parameter_selector(model, spec), K, alpha, master_seed, opt);
}

}  // namespace mixedsi
