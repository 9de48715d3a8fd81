#include <chrono>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "vilds/btd.hpp"
#include "vilds/oracle.hpp"

using namespace vilds;
using namespace vilds::testing;

namespace {

MatrixXd dense_upper_solve_oracle(const BlockBiDiagLower& R, const VectorXd& v) {
  return btd_materialize(R).transpose().triangularView<Eigen::Upper>().solve(v);
}

double sum_loss(const BandBlocks& W, const BandBlocks& R) {
  double s = 0.0;
  for (std::size_t t = 0; t < R.T(); ++t) s += (W.diag[t].array() * R.diag[t].array()).sum();
  for (std::size_t t = 0; t < R.lower.size(); ++t)
    s += (W.lower[t].array() * R.lower[t].array()).sum();
  return s;
}

}  // namespace

TEST(BtdCholesky, IdentityFactorsToIdentity) {
  const auto R = btd_cholesky(BlockTriDiagSym::identity(3, 2));
  for (const auto& d : R.diag) EXPECT_TRUE(d.isIdentity(0.0));
  for (const auto& l : R.lower) EXPECT_TRUE(l.isZero(0.0));
}

TEST(BtdCholesky, ScaledIdentityBlocks) {
  BandBlocks b = BandBlocks::zeros(2, 2);
  for (auto& d : b.diag) d = 4.0 * MatrixXd::Identity(2, 2);
  const auto R = btd_cholesky(BlockTriDiagSym(b));
  for (const auto& d : R.diag) EXPECT_TRUE(d.isApprox(2.0 * MatrixXd::Identity(2, 2), 0.0));
  EXPECT_TRUE(R.lower[0].isZero(0.0));
}

TEST(BtdCholesky, MatchesDenseCholesky) {
  std::mt19937_64 rng(11);
  const auto H = random_spd(5, 3, rng);
  const auto R = btd_cholesky(H);
  const MatrixXd dense = Eigen::LLT<MatrixXd>(btd_materialize(H)).matrixL();
  EXPECT_LT(max_abs_diff(btd_materialize(R), dense), 1e-10);
}

TEST(BtdCholesky, ReconstructsInput) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t T = 1 + rep % 10;
    const Index n = 1 + rep % 4;
    const auto H = random_spd(T, n, rng);
    const MatrixXd Rd = btd_materialize(btd_cholesky(H));
    EXPECT_LT(max_abs_diff(Rd * Rd.transpose(), btd_materialize(H)), 1e-9);
  }
}

TEST(BtdCholesky, ReportsFailingBlock) {
  BandBlocks b = BandBlocks::zeros(3, 1);
  b.diag = {MatrixXd::Constant(1, 1, 1.0), MatrixXd::Constant(1, 1, 1.0),
            MatrixXd::Constant(1, 1, 1.0)};
  b.lower = {MatrixXd::Constant(1, 1, 0.5), MatrixXd::Constant(1, 1, 2.0)};
  try {
    btd_cholesky(BlockTriDiagSym(b));
    FAIL() << "expected NotPositiveDefinite";
  } catch (const NotPositiveDefinite& e) {
    EXPECT_EQ(e.block(), 2u);
  }
}

TEST(BtdCholesky, DiagonalBlocksSymmetrizedOnConstruction) {
  MatrixXd d(2, 2);
  d << 2.0, 1.0, 0.0, 3.0;
  BlockTriDiagSym H({d}, {});
  EXPECT_DOUBLE_EQ(H.diag[0](0, 1), 0.5);
  EXPECT_DOUBLE_EQ(H.diag[0](1, 0), 0.5);
}

TEST(BtdSolve, IdentityIsNoop) {
  std::mt19937_64 rng(1);
  const auto R = BlockBiDiagLower::identity(4, 3);
  const VectorXd v = random_vector(12, rng);
  EXPECT_EQ(btd_solve(R, v, Side::lower), v);
  EXPECT_EQ(btd_solve(R, v, Side::upper), v);
}

TEST(BtdSolve, ScalarDivision) {
  BlockBiDiagLower R({MatrixXd::Constant(1, 1, 2.0), MatrixXd::Constant(1, 1, 2.0)},
                     {MatrixXd::Zero(1, 1)});
  const VectorXd x = btd_solve(R, VectorXd::Map(std::array{4.0, 6.0}.data(), 2), Side::lower);
  EXPECT_DOUBLE_EQ(x[0], 2.0);
  EXPECT_DOUBLE_EQ(x[1], 3.0);
}

TEST(BtdSolve, UpperMatchesDenseTriangularSolve) {
  std::mt19937_64 rng(3);
  const auto R = random_factor(4, 2, rng);
  const VectorXd v = random_vector(8, rng);
  EXPECT_LT(max_abs_diff(btd_solve(R, v, Side::upper), dense_upper_solve_oracle(R, v)), 1e-10);
}

TEST(BtdSolve, RoundTripsMatvec) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    const auto R = random_factor(1 + rep % 7, 1 + rep % 3, rng);
    const VectorXd v = random_vector(R.dim(), rng);
    EXPECT_LT(max_abs_diff(btd_solve(R, btd_matvec(R, v), Side::lower), v), 1e-10);
    EXPECT_LT(max_abs_diff(btd_solve(R, btd_matvec_transpose(R, v), Side::upper), v), 1e-10);
  }
}

TEST(BtdSolve, RejectsWrongLength) {
  const auto R = BlockBiDiagLower::identity(3, 2);
  EXPECT_THROW(btd_solve(R, VectorXd::Zero(5), Side::lower), DimensionMismatch);
  EXPECT_THROW(btd_sample(VectorXd::Zero(6), R, VectorXd::Zero(4)), DimensionMismatch);
}

TEST(BtdSample, ZeroNoiseGivesMean) {
  std::mt19937_64 rng(9);
  const auto R = random_factor(3, 2, rng);
  const VectorXd mu = random_vector(6, rng);
  EXPECT_EQ(btd_sample(mu, R, VectorXd::Zero(6)), mu);
}

TEST(BtdSample, IdentityFactorPassesNoiseThrough) {
  std::mt19937_64 rng(9);
  const VectorXd eps = random_vector(6, rng);
  EXPECT_EQ(btd_sample(VectorXd::Zero(6), BlockBiDiagLower::identity(3, 2), eps), eps);
}

TEST(BtdSample, EmpiricalCovarianceMatchesDenseInverse) {
  std::mt19937_64 rng(2024);
  const auto R = random_factor(3, 2, rng);
  const MatrixXd Rd = btd_materialize(R);
  const MatrixXd Sigma = (Rd * Rd.transpose()).inverse();
  const int N = 200000;
  const VectorXd mu = VectorXd::Zero(6);
  MatrixXd acc = MatrixXd::Zero(6, 6);
  MatrixXd acc2 = MatrixXd::Zero(6, 6);
  std::normal_distribution<double> normal;
  VectorXd eps(6);
  for (int i = 0; i < N; ++i) {
    for (Index k = 0; k < 6; ++k) eps[k] = normal(rng);
    const VectorXd z = btd_sample(mu, R, eps);
    const MatrixXd zz = z * z.transpose();
    acc += zz;
    acc2 += zz.cwiseAbs2();
  }
  const MatrixXd mean = acc / N;
  const MatrixXd se = ((acc2 / N - mean.cwiseAbs2()) / N).cwiseSqrt();
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 6; ++j)
      EXPECT_LE(std::abs(mean(i, j) - Sigma(i, j)), 3.0 * se(i, j) + 1e-12) << i << "," << j;
}

TEST(BtdLogdet, KnownValues) {
  EXPECT_DOUBLE_EQ(btd_logdet_sigma(BlockBiDiagLower::identity(4, 2)), 0.0);
  BlockBiDiagLower R({MatrixXd::Constant(1, 1, 2.0), MatrixXd::Constant(1, 1, 2.0)},
                     {MatrixXd::Zero(1, 1)});
  EXPECT_NEAR(btd_logdet_sigma(R), -4.0 * std::log(2.0), 1e-15);
}

TEST(BtdLogdet, MatchesDenseDeterminant) {
  std::mt19937_64 rng(8);
  const auto R = random_factor(4, 2, rng);
  const MatrixXd Rd = btd_materialize(R);
  const double dense = std::log((Rd * Rd.transpose()).inverse().determinant());
  EXPECT_NEAR(btd_logdet_sigma(R), dense, 1e-9);
}

TEST(BtdMarginals, IdentityFactor) {
  const auto m = btd_marginals(VectorXd::Zero(8), BlockBiDiagLower::identity(4, 2));
  for (const auto& v : m.var) EXPECT_TRUE(v.isIdentity(1e-15));
  for (const auto& c : m.cross) EXPECT_TRUE(c.isZero(1e-15));
}

TEST(BtdMarginals, SingleBlock) {
  std::mt19937_64 rng(12);
  const auto R = random_factor(1, 3, rng);
  const auto m = btd_marginals(VectorXd::Zero(3), R);
  const MatrixXd dense = (R.diag[0] * R.diag[0].transpose()).inverse();
  EXPECT_LT(max_abs_diff(m.var[0], dense), 1e-12);
  EXPECT_TRUE(m.cross.empty());
}

TEST(BtdMarginals, MatchesDenseInverse) {
  std::mt19937_64 rng(13);
  const auto R = random_factor(6, 2, rng);
  const VectorXd mu = random_vector(12, rng);
  const MatrixXd Rd = btd_materialize(R);
  const MatrixXd S = (Rd * Rd.transpose()).inverse();
  const auto m = btd_marginals(mu, R);
  for (Index t = 0; t < 6; ++t) {
    EXPECT_LT(max_abs_diff(m.var[t], S.block(2 * t, 2 * t, 2, 2)), 1e-9);
    EXPECT_LT(max_abs_diff(m.means[t], mu.segment(2 * t, 2)), 0.0 + 1e-300);
    if (t < 5) EXPECT_LT(max_abs_diff(m.cross[t], S.block(2 * t, 2 * t + 2, 2, 2)), 1e-9);
  }
}

TEST(BtdMarginals, AdjacentPairsArePositiveDefinite) {
  std::mt19937_64 rng(14);
  const auto R = random_factor(8, 3, rng);
  const auto m = btd_marginals(VectorXd::Zero(24), R);
  for (std::size_t t = 0; t + 1 < 8; ++t) {
    MatrixXd J(6, 6);
    J << m.var[t], m.cross[t], m.cross[t].transpose(), m.var[t + 1];
    EXPECT_EQ(Eigen::LLT<MatrixXd>(J).info(), Eigen::Success);
  }
}

TEST(BtdCholeskyVjp, ZeroCotangent) {
  std::mt19937_64 rng(15);
  const auto H = random_spd(3, 2, rng);
  const auto R = btd_cholesky(H);
  const auto g = btd_cholesky_vjp(H, R, BandBlocks::zeros(3, 2));
  for (const auto& d : g.diag) EXPECT_TRUE(d.isZero(0.0));
  for (const auto& l : g.lower) EXPECT_TRUE(l.isZero(0.0));
}

TEST(BtdCholeskyVjp, ScalarSquareRoot) {
  BlockTriDiagSym H({MatrixXd::Constant(1, 1, 4.0)}, {});
  const auto R = btd_cholesky(H);
  BandBlocks rb = BandBlocks::zeros(1, 1);
  rb.diag[0](0, 0) = 1.0;
  EXPECT_DOUBLE_EQ(btd_cholesky_vjp(H, R, rb).diag[0](0, 0), 0.25);
}

// Loss = <W, R(H)>, where H = sym(U) diagonal and free lower blocks. The
// symmetric cotangent D_bar pairs with sym(U) so dLoss/dU = D_bar.
TEST(BtdCholeskyVjp, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t T = 3;
    const Index n = 2;
    const auto H = random_spd(T, n, rng);
    BandBlocks W = BandBlocks::zeros(T, n);
    for (auto& d : W.diag) d = MatrixXd(random_matrix(n, n, rng).triangularView<Eigen::Lower>());
    for (auto& l : W.lower) l = random_matrix(n, n, rng);

    const auto R = btd_cholesky(H);
    const auto G = btd_cholesky_vjp(H, R, W);

    auto loss_at = [&](const BandBlocks& h) { return sum_loss(W, btd_cholesky(BlockTriDiagSym(h))); };
    const double step = 1e-5;
    BandBlocks base = H;
    auto check = [&](MatrixXd& entry_block, Index i, Index j, double analytic) {
      const double orig = entry_block(i, j);
      entry_block(i, j) = orig + step;
      const double fp = loss_at(base);
      entry_block(i, j) = orig - step;
      const double fm = loss_at(base);
      entry_block(i, j) = orig;
      const double fd = (fp - fm) / (2 * step);
      EXPECT_LT(std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-3}), 1e-4)
          << "seed " << seed;
    };
    for (std::size_t t = 0; t < T; ++t)
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) check(base.diag[t], i, j, G.diag[t](i, j));
    for (std::size_t t = 0; t + 1 < T; ++t)
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) check(base.lower[t], i, j, G.lower[t](i, j));
  }
}

TEST(BtdSolveVjp, MatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  const auto R = random_factor(4, 2, rng);
  const VectorXd v = random_vector(8, rng);
  const VectorXd w = random_vector(8, rng);
  for (Side side : {Side::lower, Side::upper}) {
    const VectorXd x = btd_solve(R, v, side);
    BandBlocks Rbar = BandBlocks::zeros(4, 2);
    const VectorXd vbar = btd_solve_vjp(R, x, w, side, Rbar);
    auto loss = [&](const BandBlocks& r, const VectorXd& vv) {
      return w.dot(btd_solve(BlockBiDiagLower(r.diag, r.lower), vv, side));
    };
    const VectorXd fdv = finite_diff_grad([&](const VectorXd& p) { return loss(R, p); }, v, 1e-6);
    EXPECT_LT(max_rel_err(vbar, fdv), 1e-6);
    BandBlocks rr = R;
    for (std::size_t t = 0; t < 4; ++t)
      for (Index i = 0; i < 2; ++i)
        for (Index j = 0; j <= i; ++j) {
          const double orig = rr.diag[t](i, j);
          rr.diag[t](i, j) = orig + 1e-6;
          const double fp = loss(rr, v);
          rr.diag[t](i, j) = orig - 1e-6;
          const double fm = loss(rr, v);
          rr.diag[t](i, j) = orig;
          EXPECT_NEAR((fp - fm) / 2e-6, Rbar.diag[t](i, j), 1e-6);
        }
    for (std::size_t t = 0; t < 3; ++t)
      for (Index i = 0; i < 2; ++i)
        for (Index j = 0; j < 2; ++j) {
          const double orig = rr.lower[t](i, j);
          rr.lower[t](i, j) = orig + 1e-6;
          const double fp = loss(rr, v);
          rr.lower[t](i, j) = orig - 1e-6;
          const double fm = loss(rr, v);
          rr.lower[t](i, j) = orig;
          EXPECT_NEAR((fp - fm) / 2e-6, Rbar.lower[t](i, j), 1e-6);
        }
  }
}

TEST(BtdMaterialize, LayoutAndRoundTrip) {
  EXPECT_TRUE(btd_materialize(BlockTriDiagSym::identity(3, 2)).isIdentity(0.0));
  BlockTriDiagSym H({MatrixXd::Constant(1, 1, 2.0), MatrixXd::Constant(1, 1, 3.0)},
                    {MatrixXd::Constant(1, 1, 0.5)});
  MatrixXd expect(2, 2);
  expect << 2.0, 0.5, 0.5, 3.0;
  EXPECT_EQ(btd_materialize(H), expect);

  std::mt19937_64 rng(30);
  const auto H2 = random_spd(4, 3, rng);
  const BandBlocks back = btd_extract(btd_materialize(H2), 4, 3);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(back.diag[t], H2.diag[t]);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(back.lower[t], H2.lower[t]);
}

TEST(BtdMaterialize, CapExceeded) {
  EXPECT_THROW(btd_materialize(BlockTriDiagSym::identity(1001, 2)), CapExceeded);
  EXPECT_NO_THROW(btd_materialize(BlockTriDiagSym::identity(1000, 2)));
}

TEST(BtdScaling, LinearInSeriesLength) {
  std::mt19937_64 rng(31);
  auto time_at = [&](std::size_t T) {
    const auto H = random_spd(T, 2, rng);
    const VectorXd v = random_vector(static_cast<Index>(2 * T), rng);
    std::vector<double> ts;
    for (int rep = 0; rep < 20; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto R = btd_cholesky(H);
      const VectorXd x = btd_solve(R, v, Side::lower);
      const double ld = btd_logdet_sigma(R);
      ts.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() +
                   0.0 * (x[0] + ld));
    }
    std::nth_element(ts.begin(), ts.begin() + 10, ts.end());
    return ts[10];
  };
  time_at(2000);  // warm-up
  const double t2k = time_at(2000);
  const double t4k = time_at(4000);
  EXPECT_LE(t4k, 2.5 * t2k);
}
