#pragma once

// Exact reference computations for linear-Gaussian models: Kalman filter with
// RTS smoother, a dense Gaussian posterior, and a central-difference gradient.

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "vilds/btd.hpp"
#include "vilds/common.hpp"
#include "vilds/errors.hpp"
#include "vilds/genmodels.hpp"

namespace vilds {

struct ExactMoments {
  std::vector<VectorXd> means;
  std::vector<MatrixXd> var;
  std::vector<MatrixXd> cross;  // cov(z_t, z_{t+1})
  double log_evidence = 0.0;
  std::vector<MatrixXd> filter_var;  // Kalman path only
  MatrixXd precision;                // dense path only

  VectorXd stacked_means() const {
    if (means.empty()) return {};
    const Index n = means.front().size();
    VectorXd v(n * static_cast<Index>(means.size()));
    for (std::size_t t = 0; t < means.size(); ++t) v.segment(static_cast<Index>(t) * n, n) = means[t];
    return v;
  }
};

namespace detail {

inline double gaussian_logpdf(const VectorXd& x, const VectorXd& mean, const MatrixXd& cov) {
  Eigen::LLT<MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw InvalidParams("covariance is not SPD");
  const VectorXd r = x - mean;
  const VectorXd w = llt.matrixL().solve(r);
  const double logdet = 2.0 * MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  return -0.5 * (static_cast<double>(x.size()) * kLog2Pi + logdet + w.squaredNorm());
}

inline void require_lds(const GenerativeParams& th, const Dataset& data) {
  if (th.family != Family::lds) throw InvalidParams("exact oracle requires the LDS family");
  th.validate();
  if (data.m() != th.m()) throw DimensionMismatch("observation width differs from model m");
  if (data.T() < 1) throw InvalidParams("series must have at least one time step");
}

}  // namespace detail

/// Forward filter (Joseph-form updates, evidence from one-step predictive
/// densities) followed by the Rauch-Tung-Striebel backward pass.
inline ExactMoments kalman_smoother(const GenerativeParams& th, const Dataset& data) {
  detail::require_lds(th, data);
  const Index n = th.n();
  const Index T = data.T();
  const MatrixXd& A = th.A;
  const MatrixXd& C = th.C;
  const MatrixXd Rv = th.obs_var.asDiagonal();
  const MatrixXd I = MatrixXd::Identity(n, n);

  std::vector<VectorXd> m_pred(T), m_filt(T);
  std::vector<MatrixXd> P_pred(T), P_filt(T);
  ExactMoments out;

  for (Index t = 0; t < T; ++t) {
    if (t == 0) {
      m_pred[0] = th.z1_mean;
      P_pred[0] = th.z1_cov;
    } else {
      m_pred[t] = A * m_filt[t - 1];
      P_pred[t] = detail::sym(A * P_filt[t - 1] * A.transpose() + th.Q);
    }
    const VectorXd x = data.x.row(t).transpose();
    const MatrixXd S = detail::sym(C * P_pred[t] * C.transpose() + Rv);
    Eigen::LLT<MatrixXd> sllt(S);
    const MatrixXd K = sllt.solve(C * P_pred[t]).transpose();
    const VectorXd pred_x = C * m_pred[t];
    out.log_evidence += detail::gaussian_logpdf(x, pred_x, S);
    m_filt[t] = m_pred[t] + K * (x - pred_x);
    const MatrixXd IKC = I - K * C;
    P_filt[t] = detail::sym(IKC * P_pred[t] * IKC.transpose() + K * Rv * K.transpose());
  }

  out.means.resize(T);
  out.var.resize(T);
  out.cross.resize(T - 1);
  out.means[T - 1] = m_filt[T - 1];
  out.var[T - 1] = P_filt[T - 1];
  for (Index t = T - 1; t-- > 0;) {
    // J = P_t A^T P_{t+1|t}^{-1}
    const MatrixXd J = Eigen::LLT<MatrixXd>(P_pred[t + 1]).solve(A * P_filt[t]).transpose();
    out.means[t] = m_filt[t] + J * (out.means[t + 1] - m_pred[t + 1]);
    out.var[t] = detail::sym(P_filt[t] + J * (out.var[t + 1] - P_pred[t + 1]) * J.transpose());
    out.cross[t] = J * out.var[t + 1];
  }
  out.filter_var = std::move(P_filt);
  return out;
}

/// Banded prior precision of the LDS with z_1 ~ N(z1_mean, z1_cov), and the
/// prior mean trajectory.
inline BlockTriDiagSym lds_prior_precision_full(const GenerativeParams& th, std::size_t T) {
  const MatrixXd Qi = detail::spd_inverse(th.Q);
  const Index n = th.n();
  BandBlocks P = BandBlocks::zeros(T, n);
  const MatrixXd AtQiA = th.A.transpose() * Qi * th.A;
  for (std::size_t t = 0; t < T; ++t) {
    P.diag[t] = t == 0 ? detail::spd_inverse(th.z1_cov) : Qi;
    if (t + 1 < T) {
      P.diag[t] += AtQiA;
      P.lower[t] = -Qi * th.A;
    }
  }
  return BlockTriDiagSym(std::move(P));
}

/// Dense solve of the LDS posterior: precision = prior precision plus
/// C^T diag(1/obs_var) C on each diagonal block. The evidence uses
/// log p(x) = log p(x | z) + log p(z) - log p(z | x) at the posterior mean.
inline ExactMoments dense_gaussian_posterior(const GenerativeParams& th, const Dataset& data,
                                             Index cap = kDefaultMaterializeCap) {
  detail::require_lds(th, data);
  const Index n = th.n();
  const Index T = data.T();
  if (n * T > cap) throw CapExceeded("dense posterior dimension exceeds cap");

  const BlockTriDiagSym prior = lds_prior_precision_full(th, static_cast<std::size_t>(T));
  const MatrixXd Lam0 = btd_materialize(prior, cap);
  VectorXd m0(n * T);
  m0.head(n) = th.z1_mean;
  for (Index t = 1; t < T; ++t) m0.segment(t * n, n) = th.A * m0.segment((t - 1) * n, n);

  const MatrixXd CtRi = th.C.transpose() * th.obs_var.cwiseInverse().asDiagonal();
  MatrixXd P = Lam0;
  VectorXd h = Lam0 * m0;
  for (Index t = 0; t < T; ++t) {
    P.block(t * n, t * n, n, n) += CtRi * th.C;
    h.segment(t * n, n) += CtRi * data.x.row(t).transpose();
  }
  Eigen::LLT<MatrixXd> llt(P);
  if (llt.info() != Eigen::Success) throw InvalidParams("posterior precision not SPD");
  const VectorXd mu = llt.solve(h);
  const MatrixXd Sigma = llt.solve(MatrixXd::Identity(n * T, n * T));

  ExactMoments out;
  out.means.resize(T);
  out.var.resize(T);
  out.cross.resize(T - 1);
  for (Index t = 0; t < T; ++t) {
    out.means[t] = mu.segment(t * n, n);
    out.var[t] = Sigma.block(t * n, t * n, n, n);
    if (t + 1 < T) out.cross[t] = Sigma.block(t * n, (t + 1) * n, n, n);
  }

  const double nT = static_cast<double>(n * T);
  const double logdet_P = 2.0 * MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  Eigen::LLT<MatrixXd> l0(Lam0);
  const double logdet_L0 = 2.0 * MatrixXd(l0.matrixL()).diagonal().array().log().sum();
  const VectorXd e0 = mu - m0;
  const double log_prior = -0.5 * (nT * detail::kLog2Pi - logdet_L0 + e0.dot(Lam0 * e0));
  const double log_post = -0.5 * (nT * detail::kLog2Pi - logdet_P);
  double log_lik = 0.0;
  for (Index t = 0; t < T; ++t) {
    const VectorXd r = data.x.row(t).transpose() - th.C * out.means[t];
    log_lik += -0.5 * (static_cast<double>(th.m()) * detail::kLog2Pi +
                       th.obs_var.array().log().sum() +
                       (r.array().square() / th.obs_var.array()).sum());
  }
  out.log_evidence = log_lik + log_prior - log_post;
  out.precision = std::move(P);
  return out;
}

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h.
inline VectorXd finite_diff_grad(const std::function<double(const VectorXd&)>& f,
                                 const VectorXd& point, double h) {
  VectorXd g(point.size());
  VectorXd p = point;
  for (Index i = 0; i < point.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + h;
    const double fp = f(p);
    p[i] = orig - h;
    const double fm = f(p);
    p[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Least-squares alignment of `fitted` (T x k) onto `target` (T x n) with an
/// intercept, then per-target-column R^2 and RMSE of the aligned fit. Latent
/// spaces learned with theta free are only identified up to an affine map.
struct AlignmentScore {
  MatrixXd map;  // (k + 1) x n, last row is the intercept
  VectorXd r2;
  VectorXd rmse;
};

inline AlignmentScore align_and_score(const MatrixXd& fitted, const MatrixXd& target) {
  if (fitted.rows() != target.rows()) throw DimensionMismatch("alignment needs equal row counts");
  if (fitted.rows() < 1) throw DimensionMismatch("alignment needs at least one row");
  const Index T = fitted.rows();
  MatrixXd X(T, fitted.cols() + 1);
  X << fitted, VectorXd::Ones(T);
  AlignmentScore s;
  s.map = X.colPivHouseholderQr().solve(target);
  const MatrixXd resid = target - X * s.map;
  s.r2.resize(target.cols());
  s.rmse.resize(target.cols());
  for (Index k = 0; k < target.cols(); ++k) {
    const double ss_res = resid.col(k).squaredNorm();
    const double ss_tot = (target.col(k).array() - target.col(k).mean()).square().sum();
    s.rmse[k] = std::sqrt(ss_res / static_cast<double>(T));
    // constant target: perfect only if reproduced exactly
    s.r2[k] = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : (ss_res == 0.0 ? 1.0 : 0.0);
  }
  return s;
}

}  // namespace vilds
