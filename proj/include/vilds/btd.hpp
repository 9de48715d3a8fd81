#pragma once

// Linear-time kernels for symmetric block tri-diagonal precision matrices
// and their lower block bi-diagonal Cholesky factors.
//
// Storage convention: `diag[t]` is the n x n block at (t, t) and `lower[t]`
// is the block at (t + 1, t). A symmetric matrix stores only its lower band;
// the block at (t, t + 1) is lower[t]^T. Stacked vectors have length n * T
// with z_t occupying segment [t * n, (t + 1) * n).

#include <cmath>
#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "vilds/errors.hpp"

namespace vilds {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Raw banded block storage; used for cotangents where no invariant applies.
struct BandBlocks {
  std::vector<MatrixXd> diag;
  std::vector<MatrixXd> lower;

  static BandBlocks zeros(std::size_t T, Index n) {
    BandBlocks b;
    b.diag.assign(T, MatrixXd::Zero(n, n));
    b.lower.assign(T > 0 ? T - 1 : 0, MatrixXd::Zero(n, n));
    return b;
  }
  std::size_t T() const { return diag.size(); }
  Index n() const { return diag.empty() ? 0 : diag.front().rows(); }
  Index dim() const { return static_cast<Index>(T()) * n(); }

  BandBlocks& operator+=(const BandBlocks& o) {
    for (std::size_t t = 0; t < diag.size(); ++t) diag[t] += o.diag[t];
    for (std::size_t t = 0; t < lower.size(); ++t) lower[t] += o.lower[t];
    return *this;
  }
};

namespace detail {

inline void check_band_shape(const BandBlocks& b) {
  if (b.diag.empty()) throw ShapeMismatch("banded matrix needs at least one block");
  const Index n = b.diag.front().rows();
  if (n < 1) throw ShapeMismatch("block side must be positive");
  if (b.lower.size() + 1 != b.diag.size())
    throw ShapeMismatch("banded matrix needs T - 1 off-diagonal blocks");
  for (const auto& m : b.diag)
    if (m.rows() != n || m.cols() != n) throw ShapeMismatch("diagonal block has wrong shape");
  for (const auto& m : b.lower)
    if (m.rows() != n || m.cols() != n) throw ShapeMismatch("off-diagonal block has wrong shape");
}

inline MatrixXd sym(const MatrixXd& m) { return 0.5 * (m + m.transpose()); }

inline MatrixXd tril(const MatrixXd& m) { return m.triangularView<Eigen::Lower>(); }

}  // namespace detail

/// Symmetric block tri-diagonal matrix. Diagonal blocks are symmetrized on
/// construction.
struct BlockTriDiagSym : BandBlocks {
  BlockTriDiagSym() = default;
  BlockTriDiagSym(std::vector<MatrixXd> d, std::vector<MatrixXd> l)
      : BandBlocks{std::move(d), std::move(l)} {
    detail::check_band_shape(*this);
    for (auto& m : diag) m = detail::sym(m);
  }
  explicit BlockTriDiagSym(BandBlocks b) : BlockTriDiagSym(std::move(b.diag), std::move(b.lower)) {}

  static BlockTriDiagSym identity(std::size_t T, Index n) {
    BandBlocks b = BandBlocks::zeros(T, n);
    for (auto& m : b.diag) m.setIdentity();
    return BlockTriDiagSym(std::move(b));
  }
};

/// Lower block bi-diagonal matrix with lower-triangular diagonal blocks whose
/// scalar diagonal entries are strictly positive.
struct BlockBiDiagLower : BandBlocks {
  BlockBiDiagLower() = default;
  BlockBiDiagLower(std::vector<MatrixXd> d, std::vector<MatrixXd> l)
      : BandBlocks{std::move(d), std::move(l)} {
    detail::check_band_shape(*this);
    for (const auto& m : diag) {
      if (!m.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().isZero(0.0))
        throw InvalidParams("factor diagonal blocks must be lower triangular");
      if ((m.diagonal().array() <= 0.0).any())
        throw InvalidParams("factor diagonal entries must be positive");
    }
  }

  static BlockBiDiagLower identity(std::size_t T, Index n) {
    BandBlocks b = BandBlocks::zeros(T, n);
    for (auto& m : b.diag) m.setIdentity();
    return BlockBiDiagLower(std::move(b.diag), std::move(b.lower));
  }
};

/// Per-time posterior moments: block diagonal of the covariance and the first
/// block super-diagonal, cross[t] = cov(z_t, z_{t+1}).
struct MarginalMoments {
  std::vector<VectorXd> means;
  std::vector<MatrixXd> var;
  std::vector<MatrixXd> cross;
};

enum class Side { lower, upper };

inline constexpr Index kDefaultMaterializeCap = 2000;

// ---------------------------------------------------------------------------
// Factorization

/// Block Cholesky H = R R^T. Throws NotPositiveDefinite(t) when the Schur
/// complement at block t is not positive definite.
inline BlockBiDiagLower btd_cholesky(const BlockTriDiagSym& H) {
  detail::check_band_shape(H);
  const std::size_t T = H.T();
  BlockBiDiagLower R;
  R.diag.resize(T);
  R.lower.resize(T - 1);

  MatrixXd schur = H.diag[0];
  for (std::size_t t = 0; t < T; ++t) {
    Eigen::LLT<MatrixXd> llt(schur);
    if (llt.info() != Eigen::Success || !schur.allFinite()) throw NotPositiveDefinite(t);
    R.diag[t] = llt.matrixL();
    if ((R.diag[t].diagonal().array() <= 0.0).any() || !R.diag[t].allFinite())
      throw NotPositiveDefinite(t);
    if (t + 1 < T) {
      // L_t = B_t R_t^{-T}, i.e. L_t R_t^T = B_t
      R.lower[t] = R.diag[t].triangularView<Eigen::Lower>()
                       .solve(H.lower[t].transpose())
                       .transpose();
      schur = H.diag[t + 1] - R.lower[t] * R.lower[t].transpose();
      schur = detail::sym(schur);
    }
  }
  return R;
}

// ---------------------------------------------------------------------------
// Products and solves

/// R v.
inline VectorXd btd_matvec(const BandBlocks& R, const VectorXd& v) {
  const Index n = R.n();
  detail::require_dim(v.size() == R.dim(), "vector length must equal n * T");
  VectorXd out(v.size());
  for (std::size_t t = 0; t < R.T(); ++t) {
    const Index o = static_cast<Index>(t) * n;
    out.segment(o, n) = R.diag[t] * v.segment(o, n);
    if (t > 0) out.segment(o, n) += R.lower[t - 1] * v.segment(o - n, n);
  }
  return out;
}

/// R^T v.
inline VectorXd btd_matvec_transpose(const BandBlocks& R, const VectorXd& v) {
  const Index n = R.n();
  detail::require_dim(v.size() == R.dim(), "vector length must equal n * T");
  VectorXd out(v.size());
  for (std::size_t t = 0; t < R.T(); ++t) {
    const Index o = static_cast<Index>(t) * n;
    out.segment(o, n) = R.diag[t].transpose() * v.segment(o, n);
    if (t + 1 < R.T()) out.segment(o, n) += R.lower[t].transpose() * v.segment(o + n, n);
  }
  return out;
}

/// Side::lower returns R^{-1} v (forward substitution); Side::upper returns
/// R^{-T} v (backward substitution).
inline VectorXd btd_solve(const BlockBiDiagLower& R, const VectorXd& v, Side side) {
  const Index n = R.n();
  const std::size_t T = R.T();
  detail::require_dim(v.size() == R.dim(), "vector length must equal n * T");
  VectorXd x(v.size());
  if (side == Side::lower) {
    for (std::size_t t = 0; t < T; ++t) {
      const Index o = static_cast<Index>(t) * n;
      VectorXd rhs = v.segment(o, n);
      if (t > 0) rhs -= R.lower[t - 1] * x.segment(o - n, n);
      x.segment(o, n) = R.diag[t].triangularView<Eigen::Lower>().solve(rhs);
    }
  } else {
    for (std::size_t k = T; k-- > 0;) {
      const Index o = static_cast<Index>(k) * n;
      VectorXd rhs = v.segment(o, n);
      if (k + 1 < T) rhs -= R.lower[k].transpose() * x.segment(o + n, n);
      x.segment(o, n) = R.diag[k].triangularView<Eigen::Lower>().transpose().solve(rhs);
    }
  }
  return x;
}

/// Draw z = mu + R^{-T} eps.
inline VectorXd btd_sample(const VectorXd& mu, const BlockBiDiagLower& R, const VectorXd& eps) {
  detail::require_dim(mu.size() == R.dim(), "mean length must equal n * T");
  return mu + btd_solve(R, eps, Side::upper);
}

/// log det(Sigma) for Sigma = (R R^T)^{-1}: -2 times the sum of the logs of
/// all n * T scalar diagonal entries of R.
inline double btd_logdet_sigma(const BlockBiDiagLower& R) {
  double s = 0.0;
  for (const auto& d : R.diag) s += d.diagonal().array().log().sum();
  return -2.0 * s;
}

/// Diagonal and first off-diagonal blocks of Sigma = (R R^T)^{-1}, by the
/// backward recursion seeded at the last block:
///   S_{T-1} = R^{-T} R^{-1}
///   G_t = -R_t^{-T} L_t^T,  cov(z_t, z_{t+1}) = G_t S_{t+1}
///   S_t = R_t^{-T} R_t^{-1} + G_t S_{t+1} G_t^T
inline MarginalMoments btd_marginals(const VectorXd& mu, const BlockBiDiagLower& R) {
  const Index n = R.n();
  const std::size_t T = R.T();
  detail::require_dim(mu.size() == R.dim(), "mean length must equal n * T");
  MarginalMoments m;
  m.means.resize(T);
  m.var.resize(T);
  m.cross.resize(T - 1);
  for (std::size_t t = 0; t < T; ++t) m.means[t] = mu.segment(static_cast<Index>(t) * n, n);

  auto inv_gram = [n](const MatrixXd& Rt) {
    // (R_t R_t^T)^{-1} = R_t^{-T} R_t^{-1}
    MatrixXd Rinv = Rt.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(n, n));
    return MatrixXd(Rinv.transpose() * Rinv);
  };

  m.var[T - 1] = inv_gram(R.diag[T - 1]);
  for (std::size_t t = T - 1; t-- > 0;) {
    const MatrixXd G =
        -R.diag[t].triangularView<Eigen::Lower>().transpose().solve(R.lower[t].transpose());
    m.cross[t] = G * m.var[t + 1];
    m.var[t] = detail::sym(inv_gram(R.diag[t]) + m.cross[t] * G.transpose());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Vector-Jacobian products. Cotangents of R are accumulated into a BandBlocks
// of the same shape; only the lower triangle of each diagonal block is
// meaningful.

/// Cotangent of a dense Cholesky input S = Rt Rt^T, returned symmetric.
inline MatrixXd chol_block_vjp(const MatrixXd& Rt, const MatrixXd& Rt_bar) {
  MatrixXd P = detail::tril(Rt.transpose() * detail::tril(Rt_bar));
  P.diagonal() *= 0.5;
  // Rt^{-T} P Rt^{-1}
  const auto Lview = Rt.triangularView<Eigen::Lower>();
  MatrixXd X = Lview.transpose().solve(P);
  X = Lview.transpose().solve(X.transpose()).transpose();
  return detail::sym(X);
}

/// Reverse-mode rule for btd_cholesky: given R = btd_cholesky(H) and a
/// cotangent of R, returns the cotangent of H. Diagonal cotangents are
/// symmetric; off-diagonal cotangents are with respect to the block B_t that
/// appears at both (t + 1, t) and, transposed, at (t, t + 1).
inline BlockTriDiagSym btd_cholesky_vjp(const BlockTriDiagSym& H, const BlockBiDiagLower& R,
                                        const BandBlocks& R_bar) {
  (void)H;  // the factor carries everything the backward pass needs
  const std::size_t T = R.T();
  if (R_bar.T() != T || R_bar.n() != R.n()) throw ShapeMismatch("cotangent shape differs from factor");
  std::vector<MatrixXd> rbar_diag = R_bar.diag;
  std::vector<MatrixXd> lbar = R_bar.lower;
  BandBlocks out = BandBlocks::zeros(T, R.n());

  for (std::size_t t = T; t-- > 0;) {
    const MatrixXd S_bar = chol_block_vjp(R.diag[t], rbar_diag[t]);
    out.diag[t] = S_bar;
    if (t > 0) {
      const MatrixXd& L = R.lower[t - 1];
      lbar[t - 1] -= 2.0 * S_bar * L;
      // L = B R^{-T}:  B_bar = L_bar R^{-1},  R_bar -= B_bar^T L
      const MatrixXd B_bar = R.diag[t - 1]
                                 .triangularView<Eigen::Lower>()
                                 .transpose()
                                 .solve(lbar[t - 1].transpose())
                                 .transpose();
      out.lower[t - 1] = B_bar;
      rbar_diag[t - 1] -= detail::tril(B_bar.transpose() * L);
    }
  }
  return BlockTriDiagSym(std::move(out));
}

/// Backward pass of x = btd_solve(R, v, side). Accumulates into R_bar and
/// returns v_bar.
inline VectorXd btd_solve_vjp(const BlockBiDiagLower& R, const VectorXd& x, const VectorXd& x_bar,
                              Side side, BandBlocks& R_bar) {
  const Index n = R.n();
  const std::size_t T = R.T();
  detail::require_dim(x.size() == R.dim() && x_bar.size() == R.dim(),
                      "vector length must equal n * T");
  // lower: x = R^{-1} v  => v_bar = R^{-T} x_bar, R_bar -= v_bar x^T
  // upper: x = R^{-T} v  => v_bar = R^{-1} x_bar, R_bar -= x v_bar^T
  const VectorXd v_bar =
      btd_solve(R, x_bar, side == Side::lower ? Side::upper : Side::lower);
  const VectorXd& a = side == Side::lower ? v_bar : x;
  const VectorXd& b = side == Side::lower ? x : v_bar;
  for (std::size_t t = 0; t < T; ++t) {
    const Index o = static_cast<Index>(t) * n;
    R_bar.diag[t] -= detail::tril(a.segment(o, n) * b.segment(o, n).transpose());
    if (t + 1 < T) R_bar.lower[t] -= a.segment(o + n, n) * b.segment(o, n).transpose();
  }
  return v_bar;
}

/// Backward pass of btd_logdet_sigma.
inline void btd_logdet_sigma_vjp(const BlockBiDiagLower& R, double g_bar, BandBlocks& R_bar) {
  for (std::size_t t = 0; t < R.T(); ++t)
    R_bar.diag[t].diagonal().array() -= 2.0 * g_bar / R.diag[t].diagonal().array();
}

// ---------------------------------------------------------------------------
// Dense views (test support)

inline MatrixXd btd_materialize(const BlockTriDiagSym& H, Index cap = kDefaultMaterializeCap) {
  if (H.dim() > cap) throw CapExceeded("materialized dimension exceeds cap");
  const Index n = H.n();
  MatrixXd M = MatrixXd::Zero(H.dim(), H.dim());
  for (std::size_t t = 0; t < H.T(); ++t) {
    const Index o = static_cast<Index>(t) * n;
    M.block(o, o, n, n) = H.diag[t];
    if (t + 1 < H.T()) {
      M.block(o + n, o, n, n) = H.lower[t];
      M.block(o, o + n, n, n) = H.lower[t].transpose();
    }
  }
  return M;
}

/// Dense lower block bi-diagonal matrix.
inline MatrixXd btd_materialize(const BlockBiDiagLower& R, Index cap = kDefaultMaterializeCap) {
  if (R.dim() > cap) throw CapExceeded("materialized dimension exceeds cap");
  const Index n = R.n();
  MatrixXd M = MatrixXd::Zero(R.dim(), R.dim());
  for (std::size_t t = 0; t < R.T(); ++t) {
    const Index o = static_cast<Index>(t) * n;
    M.block(o, o, n, n) = R.diag[t];
    if (t + 1 < R.T()) M.block(o + n, o, n, n) = R.lower[t];
  }
  return M;
}

/// Inverse layout of btd_materialize: reads the banded blocks of a dense
/// matrix (lower band only).
inline BandBlocks btd_extract(const MatrixXd& M, std::size_t T, Index n) {
  if (M.rows() != static_cast<Index>(T) * n || M.cols() != M.rows())
    throw DimensionMismatch("dense matrix does not match block layout");
  BandBlocks b = BandBlocks::zeros(T, n);
  for (std::size_t t = 0; t < T; ++t) {
    const Index o = static_cast<Index>(t) * n;
    b.diag[t] = M.block(o, o, n, n);
    if (t + 1 < T) b.lower[t] = M.block(o + n, o, n, n);
  }
  return b;
}

}  // namespace vilds
