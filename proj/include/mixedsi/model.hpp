#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mixedsi/errors.hpp"

namespace mixedsi {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Lower bound applied to every variance component so V stays nonsingular.
inline constexpr double kVarianceFloor = 1e-10;
/// Lower bound applied to standard errors / g1 values before division.
inline constexpr double kScaleFloor = 1e-12;

enum class ModelTag { NERM, FHM };

inline const char* to_string(ModelTag tag) { return tag == ModelTag::NERM ? "NERM" : "FHM"; }

/// One cluster (small area) of a block-diagonal LMM with a single random
/// intercept: y_d = X_d beta + 1 u_d + e_d.
struct ClusterBlock {
  std::string id;
  VectorXd y;
  MatrixXd X;                           // n_d x (p+1), first column all ones
  std::optional<double> error_var;      // known sampling variance, FHM only

  Index size() const { return y.size(); }
};

class BlockLmmData {
 public:
  BlockLmmData(ModelTag tag, std::vector<ClusterBlock> clusters)
      : tag_(tag), clusters_(std::move(clusters)) {
    for (const auto& c : clusters_) n_total_ += c.size();
  }

  ModelTag tag() const { return tag_; }
  const std::vector<ClusterBlock>& clusters() const { return clusters_; }
  const ClusterBlock& cluster(Index d) const { return clusters_[static_cast<std::size_t>(d)]; }
  Index num_clusters() const { return static_cast<Index>(clusters_.size()); }
  Index num_fixed() const { return clusters_.empty() ? 0 : clusters_.front().X.cols(); }
  /// Number of non-intercept covariates.
  Index p() const { return num_fixed() > 0 ? num_fixed() - 1 : 0; }
  Index n_total() const { return n_total_; }

  VectorXd stacked_response() const {
    VectorXd y(n_total_);
    Index row = 0;
    for (const auto& c : clusters_) {
      y.segment(row, c.size()) = c.y;
      row += c.size();
    }
    return y;
  }

  MatrixXd stacked_design() const {
    MatrixXd X(n_total_, num_fixed());
    Index row = 0;
    for (const auto& c : clusters_) {
      X.middleRows(row, c.size()) = c.X;
      row += c.size();
    }
    return X;
  }

  /// Same design and error structure with the response replaced by the
  /// stacked vector `y` (cluster order).
  BlockLmmData with_response(const VectorXd& y) const {
    if (y.size() != n_total_) {
      throw Error(ErrorCode::ShapeMismatch, "response length does not match n_total");
    }
    std::vector<ClusterBlock> copy = clusters_;
    Index row = 0;
    for (auto& c : copy) {
      c.y = y.segment(row, c.size());
      row += c.size();
    }
    return BlockLmmData(tag_, std::move(copy));
  }

 private:
  ModelTag tag_;
  std::vector<ClusterBlock> clusters_;
  Index n_total_ = 0;
};

/// Variance parameter theta. Under FHM only sigma2_u is estimated and
/// sigma2_e is unused (the per-area variances are known).
struct VarianceComponents {
  double sigma2_e = 1.0;
  double sigma2_u = 1.0;
};

/// Per-cluster weights of mu_d = k_d' beta + m_d u_d.
struct MixedParameterSpec {
  MatrixXd k;  // D x (p+1), row d is k_d
  VectorXd m;  // D
};

inline double cluster_error_variance(const BlockLmmData& data, const VarianceComponents& theta,
                                     Index d) {
  return data.tag() == ModelTag::FHM ? *data.cluster(d).error_var : theta.sigma2_e;
}

inline VarianceComponents floored(VarianceComponents theta) {
  theta.sigma2_e = std::max(theta.sigma2_e, kVarianceFloor);
  theta.sigma2_u = std::max(theta.sigma2_u, kVarianceFloor);
  return theta;
}

/// Checks every structural invariant of the data model and that the stacked
/// design has full column rank. Throws Error on the first violation.
inline void validate(const BlockLmmData& data) {
  if (data.num_clusters() < 1) throw Error(ErrorCode::ShapeMismatch, "at least one cluster is required");
  const Index cols = data.num_fixed();
  if (cols < 1) throw Error(ErrorCode::ShapeMismatch, "design needs an intercept column");
  for (Index d = 0; d < data.num_clusters(); ++d) {
    const auto& c = data.cluster(d);
    const std::string where = "cluster '" + c.id + "'";
    if (c.size() < 1) throw Error(ErrorCode::ShapeMismatch, where + " is empty");
    if (c.X.rows() != c.size()) {
      throw Error(ErrorCode::ShapeMismatch, where + ": y has " + std::to_string(c.size()) +
                                                " rows but X has " + std::to_string(c.X.rows()));
    }
    if (c.X.cols() != cols) throw Error(ErrorCode::ShapeMismatch, where + ": column count differs");
    if (!c.X.col(0).isOnes(0.0)) {
      throw Error(ErrorCode::ShapeMismatch, where + ": first design column must be all ones");
    }
    if (!c.y.allFinite() || !c.X.allFinite()) throw Error(ErrorCode::InvalidValue, where + ": non-finite value");
    if (data.tag() == ModelTag::FHM) {
      if (c.size() != 1) throw Error(ErrorCode::ShapeMismatch, where + ": FHM areas hold one observation");
      if (!c.error_var) throw Error(ErrorCode::MissingErrorVariance, where + ": no sampling variance");
      if (!(std::isfinite(*c.error_var) && *c.error_var > 0.0)) {
        throw Error(ErrorCode::MissingErrorVariance, where + ": sampling variance must be positive");
      }
    } else if (c.error_var) {
      throw Error(ErrorCode::ShapeMismatch, where + ": NERM clusters carry no known error variance");
    }
  }
  Eigen::ColPivHouseholderQR<MatrixXd> qr(data.stacked_design());
  if (qr.rank() < cols) {
    throw Error(ErrorCode::RankDeficient, "stacked design has rank " + std::to_string(qr.rank()) +
                                              " < " + std::to_string(cols));
  }
}

inline void check_spec(const BlockLmmData& data, const MixedParameterSpec& spec) {
  if (spec.k.rows() != data.num_clusters() || spec.k.cols() != data.num_fixed() ||
      spec.m.size() != data.num_clusters()) {
    throw Error(ErrorCode::ShapeMismatch, "mixed-parameter spec does not match the data dimensions");
  }
}

inline VectorXd eval_mixed_parameters(const BlockLmmData& data, const MixedParameterSpec& spec,
                                      const VectorXd& beta, const VectorXd& u) {
  check_spec(data, spec);
  if (beta.size() != data.num_fixed() || u.size() != data.num_clusters()) {
    throw Error(ErrorCode::ShapeMismatch, "beta/u length does not match the data dimensions");
  }
  return spec.k * beta + spec.m.cwiseProduct(u);
}

/// k_d = column means of X_d, m_d = 1: the cluster mean of the conditional
/// expectation.
inline MixedParameterSpec cluster_mean_spec(const BlockLmmData& data) {
  MixedParameterSpec spec{MatrixXd(data.num_clusters(), data.num_fixed()),
                          VectorXd::Ones(data.num_clusters())};
  for (Index d = 0; d < data.num_clusters(); ++d) {
    spec.k.row(d) = data.cluster(d).X.colwise().mean();
  }
  return spec;
}

}  // namespace mixedsi
