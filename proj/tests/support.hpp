#pragma once

// Shared fixtures and dense brute-force oracles. Everything here works on the
// full n x n covariance, independent of the block algebra under test.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "mixedsi/mixedsi.hpp"

namespace testing_support {

using namespace mixedsi;

inline BlockLmmData random_nerm(std::mt19937_64& rng, Index D, Index p, double s2e, double s2u, Index n_min = 1,
                                Index n_max = 6) {
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> unif(-1.0, 2.0);
  std::uniform_int_distribution<Index> nd(n_min, n_max);
  std::vector<ClusterBlock> cl;
  for (Index d = 0; d < D; ++d) {
    ClusterBlock c;
    c.id = "c" + std::to_string(d);
    const Index n = nd(rng);
    c.X.resize(n, p + 1);
    c.y.resize(n);
    const double u = std::sqrt(s2u) * z(rng);
    for (Index j = 0; j < n; ++j) {
      c.X(j, 0) = 1.0;
      for (Index k = 1; k <= p; ++k) c.X(j, k) = unif(rng);
      c.y(j) = 1.0 + c.X.row(j).tail(p).sum() + u + std::sqrt(s2e) * z(rng);
    }
    cl.push_back(std::move(c));
  }
  return BlockLmmData(ModelTag::NERM, std::move(cl));
}

inline BlockLmmData random_fhm(std::mt19937_64& rng, Index D, Index p, double s2u) {
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<ClusterBlock> cl;
  for (Index d = 0; d < D; ++d) {
    ClusterBlock c;
    c.id = "a" + std::to_string(d);
    c.X.resize(1, p + 1);
    c.X(0, 0) = 1.0;
    for (Index k = 1; k <= p; ++k) c.X(0, k) = unif(rng);
    c.error_var = 0.2 + unif(rng);
    c.y.resize(1);
    c.y(0) = c.X.row(0).sum() + std::sqrt(s2u) * z(rng) + std::sqrt(*c.error_var) * z(rng);
    cl.push_back(std::move(c));
  }
  return BlockLmmData(ModelTag::FHM, std::move(cl));
}

struct Dense {
  MatrixXd X, Z, V, R;
  VectorXd y;
  double s2u = 0.0;
};

inline Dense dense(const BlockLmmData& data, const VarianceComponents& theta) {
  Dense o;
  const Index n = data.n_total();
  const Index D = data.num_clusters();
  o.X = data.stacked_design();
  o.y = data.stacked_response();
  o.Z = MatrixXd::Zero(n, D);
  o.R = MatrixXd::Zero(n, n);
  Index row = 0;
  for (Index d = 0; d < D; ++d) {
    const auto& c = data.cluster(d);
    for (Index j = 0; j < c.size(); ++j, ++row) {
      o.Z(row, d) = 1.0;
      o.R(row, row) = data.tag() == ModelTag::FHM ? *c.error_var : theta.sigma2_e;
    }
  }
  o.s2u = theta.sigma2_u;
  o.V = o.R + theta.sigma2_u * o.Z * o.Z.transpose();
  return o;
}

struct DenseFit {
  VectorXd beta, u;
  MatrixXd a_inv;
};

inline DenseFit dense_blup(const Dense& o) {
  const MatrixXd Vi = o.V.inverse();
  DenseFit f;
  f.a_inv = (o.X.transpose() * Vi * o.X).inverse();
  f.beta = f.a_inv * o.X.transpose() * Vi * o.y;
  f.u = o.s2u * o.Z.transpose() * Vi * (o.y - o.X * f.beta);
  return f;
}

inline double dense_reml(const Dense& o) {
  const MatrixXd Vi = o.V.inverse();
  const MatrixXd A = o.X.transpose() * Vi * o.X;
  const MatrixXd P = Vi - Vi * o.X * A.inverse() * o.X.transpose() * Vi;
  const double n = static_cast<double>(o.X.rows());
  const double q = static_cast<double>(o.X.cols());
  return -0.5 * ((n - q) * std::log(2.0 * std::numbers::pi) + std::log(o.V.determinant()) +
                 std::log(A.determinant()) + o.y.dot(P * o.y));
}

// g1 and g2 of mu_d = k_d' beta + m_d u_d from the dense matrices.
inline void dense_g1_g2(const Dense& o, const MixedParameterSpec& spec, VectorXd& g1, VectorXd& g2) {
  const Index D = o.Z.cols();
  const MatrixXd Vi = o.V.inverse();
  const MatrixXd A_inv = (o.X.transpose() * Vi * o.X).inverse();
  const MatrixXd G = o.s2u * MatrixXd::Identity(D, D);
  g1.resize(D);
  g2.resize(D);
  for (Index d = 0; d < D; ++d) {
    VectorXd m = VectorXd::Zero(D);
    m(d) = spec.m(d);
    g1(d) = m.dot((G - G * o.Z.transpose() * Vi * o.Z * G) * m);
    const VectorXd b = spec.k.row(d).transpose() - o.X.transpose() * Vi * o.Z * G * m;
    g2(d) = b.dot(A_inv * b);
  }
}

inline MatrixXd dense_precision(const Dense& o) {
  MatrixXd C(o.X.rows(), o.X.cols() + o.Z.cols());
  C << o.X, o.Z;
  MatrixXd Gp = MatrixXd::Zero(C.cols(), C.cols());
  Gp.bottomRightCorner(o.Z.cols(), o.Z.cols()) = MatrixXd::Identity(o.Z.cols(), o.Z.cols()) / o.s2u;
  return C.transpose() * o.R.inverse() * C + Gp;
}

/// Root of (2 Phi(c) - 1)^D = 1 - alpha by bisection.
inline double independent_max_quantile(Index D, double alpha) {
  auto f = [&](double c) { return std::pow(std::erf(c / std::numbers::sqrt2), static_cast<double>(D)) - (1.0 - alpha); };
  double lo = 0.0, hi = 10.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

inline MatrixXd standard_normal_matrix(std::uint64_t seed, Index rows, Index cols) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  MatrixXd M(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) M(i, j) = z(rng);
  }
  return M;
}

}  // namespace testing_support
