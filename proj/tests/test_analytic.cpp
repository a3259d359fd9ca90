#include <gtest/gtest.h>

#include "support.hpp"

using namespace mixedsi;
using namespace testing_support;

TEST(Bonferroni, NormalQuantiles) {
  EXPECT_NEAR(bonferroni_cv(1, 0.05).value, 1.959964, 1e-6);
  EXPECT_NEAR(bonferroni_cv(30, 0.05).value, 3.143980, 1e-5);
  EXPECT_EQ(bonferroni_cv(30, 0.05).method, Method::BO);
  EXPECT_THROW(bonferroni_cv(0, 0.05), Error);
  EXPECT_THROW(bonferroni_cv(3, 0.0), Error);
}

TEST(RidgeWeights, ReproduceBlupAndMse) {
  std::mt19937_64 rng(41);
  for (int rep = 0; rep < 10; ++rep) {
    const bool fhm = rep % 2 == 1;
    const auto data = fhm ? random_fhm(rng, 9, 1, 1.0) : random_nerm(rng, 7, 2, 0.5, 1.0);
    const VarianceComponents theta{fhm ? 0.0 : 0.6, 0.8};
    auto spec = cluster_mean_spec(data);
    const auto fit = fit_gls_blup(data, spec, theta);
    const VectorXd y = data.stacked_response();
    const VectorXd g1v = g1(data, theta);
    const VectorXd g2v = g2(data, theta, spec);
    const Index q = data.num_fixed();
    for (Index d = 0; d < data.num_clusters(); ++d) {
      VectorXd c = VectorXd::Zero(q + data.num_clusters());
      c.head(q) = spec.k.row(d).transpose();
      c(q + d) = spec.m(d);
      const auto w = ridge_weights(data, theta, c);
      EXPECT_NEAR(w.l.dot(y), fit.mu_hat(d), 1e-10);
      EXPECT_NEAR(w.sigma_e * w.sigma_e * w.l_m_norm_sq, g1v(d) + g2v(d), 1e-10);
    }
  }
}

TEST(RidgeWeights, ShapeCheck) {
  std::mt19937_64 rng(1);
  const auto data = random_nerm(rng, 3, 1, 0.5, 1.0);
  EXPECT_THROW(ridge_weights(data, {0.5, 1.0}, VectorXd::Ones(4)), Error);
}

TEST(Tube, VanishingCorrectionClosedFormInversion) {
  for (double nu : {3.0, 10.0, 40.0}) {
    for (double kappa0 : {2.0, 5.0, 12.0}) {
      TubeConstants k;
      k.kappa0 = kappa0;
      k.nu = nu;
      k.xi0 = 1.3;
      const double alpha = 0.05;
      const double closed = std::sqrt(nu * (std::pow(std::numbers::pi * alpha / kappa0, -2.0 / nu) - 1.0)) / k.xi0;
      EXPECT_NEAR(tube_cv(1, alpha, k).value, closed, 1e-8) << nu << " " << kappa0;
    }
  }
}

TEST(Tube, BoundDecreasesInC) {
  for (Index p : {1, 2, 3, 5}) {
    TubeConstants k;
    k.kappa0 = 6.0;
    k.zeta0 = 1.5;
    k.kappa2 = 0.5;
    k.zeta1 = 0.3;
    k.m0 = 1.0;
    k.euler = 1.0;
    k.eta0 = 0.2;
    k.nu = 25.0;
    double prev = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 1000; ++i) {
      const double c = 0.5 + 7.5 * i / 999.0;
      const double b = tube_alpha_bound(p, c, k);
      EXPECT_LE(b, prev + 1e-15) << "p=" << p << " c=" << c;
      prev = b;
    }
  }
}

TEST(Tube, GaussianLimit) {
  TubeConstants k;
  k.kappa0 = 4.0;
  k.nu = 1e4;
  const double c = 2.0;
  const double gauss = k.kappa0 / std::numbers::pi * std::exp(-0.5 * c * c);
  EXPECT_NEAR(tube_alpha_bound(1, c, k) / gauss, 1.0, 0.01);
  const double c_gauss = std::sqrt(2.0 * std::log(k.kappa0 / (std::numbers::pi * 0.05)));
  EXPECT_NEAR(tube_cv(1, 0.05, k).value / c_gauss, 1.0, 0.01);
}

TEST(Tube, LargerManifoldNeedsLargerCriticalValue) {
  TubeConstants k;
  k.kappa0 = 3.0;
  k.zeta0 = 1.0;
  k.euler = 1.0;
  k.nu = 20.0;
  for (Index p : {1, 2, 4}) {
    TubeConstants k2 = k;
    k2.kappa0 = 2.0 * k.kappa0;
    EXPECT_GT(tube_alpha_bound(p, 2.5, k2), tube_alpha_bound(p, 2.5, k));
    EXPECT_GT(tube_cv(p, 0.05, k2).value, tube_cv(p, 0.05, k).value);
  }
}

TEST(Tube, ErrorConditions) {
  TubeConstants k;
  k.kappa0 = 50.0;
  k.nu = 1.0;
  try {
    tube_cv(1, 0.05, k);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BoundUnattainable);
  }
  TubeConstants bad;
  bad.kappa0 = -1.0;
  EXPECT_THROW(tube_alpha_bound(1, 2.0, bad), Error);
  EXPECT_THROW(tube_alpha_bound(1, 0.0, TubeConstants{}), Error);
  // Negative Euler correction drives the bound below zero near c = 0, so it
  // rises through alpha before it falls again.
  TubeConstants wavy;
  wavy.kappa0 = 6.0;
  wavy.euler = -2.0;
  wavy.nu = 5.0;
  try {
    tube_cv(1, 0.01, wavy);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonMonotoneBound);
  }
}

TEST(Tube, IntervalsUseRidgeNorm) {
  std::mt19937_64 rng(2);
  const auto data = random_nerm(rng, 6, 1, 0.5, 1.0, 3, 5);
  const auto spec = cluster_mean_spec(data);
  const auto fit = eblup(data, spec);
  TubeConstants k;
  k.kappa0 = 3.0;
  k.nu = 30.0;
  const auto cv = tube_cv(1, 0.05, k);
  const auto spi = tube_spi(data, fit, spec, cv);
  const VectorXd mse = g1(data, fit.theta) + g2(data, fit.theta, spec);
  for (Index d = 0; d < 6; ++d) {
    EXPECT_NEAR(spi.clusters[static_cast<std::size_t>(d)].half_width, cv.value * std::sqrt(mse(d)), 1e-10);
  }
}
