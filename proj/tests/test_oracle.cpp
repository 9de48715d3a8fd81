#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "vilds/oracle.hpp"

using namespace vilds;
using namespace vilds::testing;

namespace {

GenerativeParams random_lds(Index n, Index m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  GenerativeParams th = default_params(Family::lds, n, m, seed);
  th.A = random_matrix(n, n, rng, 0.5);
  const MatrixXd G = random_matrix(n, n, rng, 0.5);
  th.Q = G * G.transpose() + 0.2 * MatrixXd::Identity(n, n);
  th.z1_mean = random_vector(n, rng);
  const MatrixXd G1 = random_matrix(n, n, rng, 0.5);
  th.z1_cov = G1 * G1.transpose() + 0.5 * MatrixXd::Identity(n, n);
  std::uniform_real_distribution<double> u(0.2, 2.0);
  for (Index k = 0; k < m; ++k) th.obs_var[k] = u(rng);
  return th;
}

double moments_diff(const ExactMoments& a, const ExactMoments& b) {
  double d = std::abs(a.log_evidence - b.log_evidence);
  for (std::size_t t = 0; t < a.means.size(); ++t) {
    d = std::max(d, max_abs_diff(a.means[t], b.means[t]));
    d = std::max(d, max_abs_diff(a.var[t], b.var[t]));
  }
  for (std::size_t t = 0; t < a.cross.size(); ++t) d = std::max(d, max_abs_diff(a.cross[t], b.cross[t]));
  return d;
}

}  // namespace

TEST(Kalman, ScalarSingleStepIsConjugateBayes) {
  GenerativeParams th = default_params(Family::lds, 1, 1, 0);
  th.z1_mean = VectorXd::Zero(1);
  th.z1_cov = MatrixXd::Constant(1, 1, 2.0);
  th.C = MatrixXd::Constant(1, 1, 1.5);
  th.obs_var = VectorXd::Constant(1, 0.5);
  Dataset d;
  d.x = MatrixXd::Constant(1, 1, 0.7);
  const double prec = 1.0 / 2.0 + 1.5 * 1.5 / 0.5;
  const double mean = (1.5 * 0.7 / 0.5) / prec;
  for (const auto& mom : {kalman_smoother(th, d), dense_gaussian_posterior(th, d)}) {
    EXPECT_NEAR(mom.var[0](0, 0), 1.0 / prec, 1e-14);
    EXPECT_NEAR(mom.means[0][0], mean, 1e-14);
    EXPECT_TRUE(mom.cross.empty());
  }
  // marginal of x is N(0, c^2 q1 + r)
  const double s2 = 1.5 * 1.5 * 2.0 + 0.5;
  const double ev = -0.5 * (std::log(2.0 * M_PI * s2) + 0.7 * 0.7 / s2);
  EXPECT_NEAR(kalman_smoother(th, d).log_evidence, ev, 1e-14);
  EXPECT_NEAR(dense_gaussian_posterior(th, d).log_evidence, ev, 1e-12);
}

TEST(Kalman, UninformativeObservationsGivePriorMarginals) {
  GenerativeParams th = random_lds(2, 3, 1);
  th.obs_var = VectorXd::Constant(3, 1e14);
  const Dataset d = simulate(random_lds(2, 3, 1), 8, 2);
  const auto mom = kalman_smoother(th, d);
  VectorXd m = th.z1_mean;
  MatrixXd P = th.z1_cov;
  for (Index t = 0; t < 8; ++t) {
    EXPECT_LT(max_abs_diff(mom.means[t], m), 1e-8) << t;
    EXPECT_LT(max_abs_diff(mom.var[t], P), 1e-8) << t;
    if (t + 1 < 8) EXPECT_LT(max_abs_diff(mom.cross[t], P * th.A.transpose()), 1e-8) << t;
    m = th.A * m;
    P = th.A * P * th.A.transpose() + th.Q;
  }
}

TEST(Kalman, AgreesWithDensePosterior) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const Index n = 1 + static_cast<Index>(seed % 3);
    const Index m = 1 + static_cast<Index>(seed % 4);
    const Index T = 1 + static_cast<Index>(seed % 8);
    const auto th = random_lds(n, m, seed);
    const Dataset d = simulate(th, T, seed + 1000);
    EXPECT_LT(moments_diff(kalman_smoother(th, d), dense_gaussian_posterior(th, d)), 1e-8)
        << "seed " << seed;
  }
}

TEST(Kalman, SixStepsTwoStatesThreeOutputs) {
  const auto th = random_lds(2, 3, 77);
  const Dataset d = simulate(th, 6, 5);
  EXPECT_LT(moments_diff(kalman_smoother(th, d), dense_gaussian_posterior(th, d)), 1e-8);
}

TEST(Kalman, SmoothingNeverIncreasesVariance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto th = random_lds(2, 3, seed);
    const Dataset d = simulate(th, 30, seed);
    const auto mom = kalman_smoother(th, d);
    for (std::size_t t = 0; t < 30; ++t)
      for (Index i = 0; i < 2; ++i)
        EXPECT_LE(mom.var[t](i, i), mom.filter_var[t](i, i) + 1e-12);
  }
}

TEST(Kalman, RejectsOtherFamilies) {
  const auto th = default_params(Family::plds, 2, 3, 0);
  const Dataset d = simulate(th, 5, 0);
  EXPECT_THROW(kalman_smoother(th, d), InvalidParams);
  EXPECT_THROW(dense_gaussian_posterior(th, d), InvalidParams);
}

TEST(Dense, PrecisionIsBlockTriDiagonal) {
  const auto th = random_lds(2, 3, 3);
  const Dataset d = simulate(th, 7, 3);
  const MatrixXd& P = dense_gaussian_posterior(th, d).precision;
  for (Index i = 0; i < P.rows(); ++i)
    for (Index j = 0; j < P.cols(); ++j)
      if (std::abs(i / 2 - j / 2) > 1) EXPECT_LT(std::abs(P(i, j)), 1e-12);
}

TEST(Dense, CapExceeded) {
  const auto th = random_lds(2, 3, 3);
  const Dataset d = simulate(th, 11, 3);
  EXPECT_THROW(dense_gaussian_posterior(th, d, 20), CapExceeded);
}

TEST(FiniteDiff, LinearSlope) {
  auto f = [](const VectorXd& p) { return 3.0 * p[0]; };
  for (double h : {1e-1, 1e-3, 1e-6})
    EXPECT_NEAR(finite_diff_grad(f, VectorXd::Constant(1, -4.0), h)[0], 3.0, 1e-9);
}

TEST(FiniteDiff, Quadratic) {
  auto f = [](const VectorXd& p) { return p[0] * p[0]; };
  EXPECT_NEAR(finite_diff_grad(f, VectorXd::Constant(1, 2.0), 1e-5)[0], 4.0, 1e-8);
}
