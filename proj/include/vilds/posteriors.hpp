#pragma once

// Gaussian smoothing posteriors q(z | x) = N(mu, (R R^T)^{-1}) with block
// tri-diagonal precision, in three parameterizations:
//
//   MF         per-time mean and precision blocks, no temporal coupling
//   VILDSblk   networks map x_t to mu_t and D_t, and (x_t, x_{t-1}) to the
//              off-diagonal precision block; alpha I is added to the diagonal
//   VILDSmult  product of a per-time Gaussian factor N(M, C) from networks
//              and an LDS-shaped prior N(0, D) with learnable (A, Q)
//
// Every build can record a tape so that posterior_backward can push
// cotangents of samples and of the entropy back into the parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "vilds/btd.hpp"
#include "vilds/common.hpp"
#include "vilds/errors.hpp"
#include "vilds/mlp.hpp"
#include "vilds/params.hpp"

namespace vilds {

enum class PosteriorKind { mf, vildsblk, vildsmult, fixed };

inline std::string_view to_string(PosteriorKind k) {
  switch (k) {
    case PosteriorKind::mf: return "mf";
    case PosteriorKind::vildsblk: return "vildsblk";
    case PosteriorKind::vildsmult: return "vildsmult";
    case PosteriorKind::fixed: return "fixed";
  }
  return "?";
}

inline PosteriorKind parse_posterior_kind(std::string_view s) {
  if (s == "mf") return PosteriorKind::mf;
  if (s == "vildsblk") return PosteriorKind::vildsblk;
  if (s == "vildsmult") return PosteriorKind::vildsmult;
  throw InvalidParams("unknown posterior kind '" + std::string(s) + "'");
}

/// Fixed per-column standardization applied to observations before they reach
/// any network. Not learned.
struct InputNorm {
  VectorXd shift;
  VectorXd scale;

  static InputNorm fit(const MatrixXd& x) {
    InputNorm nm;
    const Index T = x.rows();
    nm.shift = x.colwise().mean().transpose();
    nm.scale.resize(x.cols());
    for (Index k = 0; k < x.cols(); ++k) {
      const double var = T > 1 ? (x.col(k).array() - nm.shift[k]).square().sum() / (T - 1) : 0.0;
      nm.scale[k] = var > 1e-16 ? std::sqrt(var) : 1.0;
    }
    return nm;
  }
  static InputNorm identity(Index m) { return {VectorXd::Zero(m), VectorXd::Ones(m)}; }

  /// m x T matrix of standardized observations, one column per time.
  MatrixXd apply(const MatrixXd& x) const {
    detail::require_dim(x.cols() == shift.size(), "observation width differs from normalizer");
    return ((x.rowwise() - shift.transpose()).array().rowwise() / scale.transpose().array())
        .matrix()
        .transpose();
  }
};

struct MeanFieldParams {
  Mlp net_mu;  // x_t -> mu_t
  Mlp net_V;   // x_t -> packed L_t; V_t^{-1} = L_t L_t^T + alpha I
  double alpha = 0.1;
  InputNorm norm;

  template <class F> void for_each(F&& f) { net_mu.for_each(f); net_V.for_each(f); }
  template <class F> void for_each(F&& f) const { net_mu.for_each(f); net_V.for_each(f); }
};

struct VildsBlkParams {
  Mlp net_mu;  // x_t -> mu_t
  Mlp net_D;   // x_t -> packed symmetric D_t
  Mlp net_B;   // (x_t, x_{t-1}) -> row-major B_{t-1}
  double alpha = 0.1;
  InputNorm norm;

  template <class F> void for_each(F&& f) {
    net_mu.for_each(f); net_D.for_each(f); net_B.for_each(f);
  }
  template <class F> void for_each(F&& f) const {
    net_mu.for_each(f); net_D.for_each(f); net_B.for_each(f);
  }
};

struct VildsMultParams {
  Mlp net_M;           // x_t -> M_t
  Mlp net_C;           // x_t -> packed L_t; C_t^{-1} = L_t L_t^T + alpha I
  MatrixXd prior_A;    // dynamics of the prior factor
  MatrixXd prior_Q_chol;  // lower Cholesky factor of the prior innovation covariance
  double alpha = 0.1;
  InputNorm norm;

  MatrixXd prior_Q() const { return prior_Q_chol * prior_Q_chol.transpose(); }

  template <class F> void for_each(F&& f) {
    net_M.for_each(f); net_C.for_each(f); f(prior_A); f(prior_Q_chol);
  }
  template <class F> void for_each(F&& f) const {
    net_M.for_each(f); net_C.for_each(f); f(prior_A); f(prior_Q_chol);
  }
};

using PosteriorParams = std::variant<MeanFieldParams, VildsBlkParams, VildsMultParams>;

inline PosteriorKind kind_of(const PosteriorParams& p) {
  switch (p.index()) {
    case 0: return PosteriorKind::mf;
    case 1: return PosteriorKind::vildsblk;
    default: return PosteriorKind::vildsmult;
  }
}

inline double alpha_of(const PosteriorParams& p) {
  return std::visit([](const auto& q) { return q.alpha; }, p);
}

inline void set_alpha(PosteriorParams& p, double a) {
  std::visit([a](auto& q) { q.alpha = a; }, p);
}

/// Latent dimension implied by the mean network.
inline Index latent_dim(const PosteriorParams& p) {
  return std::visit(
      [](const auto& q) -> Index {
        using P = std::decay_t<decltype(q)>;
        if constexpr (std::is_same_v<P, VildsMultParams>) return q.net_M.output_dim();
        else return q.net_mu.output_dim();
      },
      p);
}

// Generic container ops see through the variant.
template <class F>
void for_each_param(PosteriorParams& p, F&& f) {
  std::visit([&](auto& q) { q.for_each(f); }, p);
}

struct PosteriorParamsRef {
  PosteriorParams* p;
  template <class F> void for_each(F&& f) { for_each_param(*p, f); }
  template <class F> void for_each(F&& f) const { for_each_param(*p, f); }
};

inline VectorXd flatten_posterior(const PosteriorParams& p) {
  PosteriorParams copy = p;
  return flatten(PosteriorParamsRef{&copy});
}

inline void unflatten_posterior(PosteriorParams& p, const VectorXd& v) {
  PosteriorParamsRef ref{&p};
  unflatten_into(ref, v);
}

inline PosteriorParams zeros_like_posterior(const PosteriorParams& p) {
  PosteriorParams z = p;
  for_each_param(z, [](auto& m) { m.setZero(); });
  return z;
}

// ---------------------------------------------------------------------------
// Block packing

inline Index packed_tri_size(Index n) { return n * (n + 1) / 2; }

/// Row-wise lower triangle: (0,0), (1,0), (1,1), (2,0), ...
inline MatrixXd unpack_lower(const Eigen::Ref<const VectorXd>& v, Index n) {
  MatrixXd L = MatrixXd::Zero(n, n);
  Index k = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) L(i, j) = v[k++];
  return L;
}

inline VectorXd pack_lower(const MatrixXd& L) {
  const Index n = L.rows();
  VectorXd v(packed_tri_size(n));
  Index k = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) v[k++] = L(i, j);
  return v;
}

/// Symmetric matrix whose lower triangle is filled row-wise from v.
inline MatrixXd unpack_symmetric(const Eigen::Ref<const VectorXd>& v, Index n) {
  MatrixXd L = unpack_lower(v, n);
  MatrixXd S = L + L.transpose();
  S.diagonal() = L.diagonal();
  return S;
}

/// Cotangent of the packed vector given a symmetric cotangent of the
/// unpacked matrix.
inline VectorXd unpack_symmetric_vjp(const MatrixXd& S_bar) {
  MatrixXd G = S_bar + S_bar.transpose();
  G.diagonal() = S_bar.diagonal();
  return pack_lower(G);
}

/// L L^T + alpha I from a packed lower factor.
inline MatrixXd gram_plus_jitter(const MatrixXd& L, double alpha) {
  MatrixXd P = L * L.transpose();
  P.diagonal().array() += alpha;
  return P;
}

// ---------------------------------------------------------------------------
// Posterior value

struct PosteriorTape {
  PosteriorParams params;
  MatrixXd inputs;       // m x T standardized observations
  MatrixXd pair_inputs;  // 2m x (T-1), VILDSblk only
  std::vector<MlpCache> caches;
  std::vector<MatrixXd> factors;  // per-time packed factors L_t (MF, VILDSmult)
  MatrixXd M;                     // n x T, VILDSmult
  VectorXd b, y;                  // C^{-1} M and R^{-1} b, VILDSmult
  MatrixXd prior_Qi;              // VILDSmult
};

struct GaussianPosterior {
  PosteriorKind kind = PosteriorKind::fixed;
  VectorXd mu;
  BlockTriDiagSym precision;
  BlockBiDiagLower factor;
  std::shared_ptr<const PosteriorTape> tape;

  std::size_t T() const { return factor.T(); }
  Index n() const { return factor.n(); }

  /// Untaped posterior from given moments; factorizes the precision.
  static GaussianPosterior from_moments(VectorXd mu, BlockTriDiagSym precision) {
    GaussianPosterior q;
    q.factor = btd_cholesky(precision);
    detail::require_dim(mu.size() == precision.dim(), "mean length must equal n * T");
    q.mu = std::move(mu);
    q.precision = std::move(precision);
    return q;
  }
};

namespace detail {

inline VectorXd stack_columns(const MatrixXd& M) {
  return Eigen::Map<const VectorXd>(M.data(), M.size());
}

inline MatrixXd pair_columns(const MatrixXd& X) {
  const Index T = X.cols();
  const Index m = X.rows();
  MatrixXd P(2 * m, std::max<Index>(T - 1, 0));
  for (Index t = 1; t < T; ++t) {
    P.col(t - 1).head(m) = X.col(t);
    P.col(t - 1).tail(m) = X.col(t - 1);
  }
  return P;
}

/// LDS prior precision (I - A)^T Q^{-1} (I - A) in block form, with z_1 ~ N(0, Q).
inline BandBlocks lds_prior_precision(const MatrixXd& A, const MatrixXd& Qi, std::size_t T) {
  const Index n = A.rows();
  BandBlocks P = BandBlocks::zeros(T, n);
  const MatrixXd AtQiA = A.transpose() * Qi * A;
  const MatrixXd off = -Qi * A;
  for (std::size_t t = 0; t < T; ++t) {
    P.diag[t] = Qi;
    if (t + 1 < T) {
      P.diag[t] += AtQiA;
      P.lower[t] = off;
    }
  }
  return P;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Builders. `x` is T x m.

inline GaussianPosterior build_meanfield(const MeanFieldParams& p, const MatrixXd& x,
                                         bool record = true) {
  const Index T = x.rows();
  if (T < 1) throw InvalidParams("series must have at least one time step");
  auto tape = std::make_shared<PosteriorTape>();
  tape->inputs = p.norm.apply(x);
  tape->caches.resize(2);
  const MatrixXd mu = mlp_forward(p.net_mu, tape->inputs, record ? &tape->caches[0] : nullptr);
  const MatrixXd packed = mlp_forward(p.net_V, tape->inputs, record ? &tape->caches[1] : nullptr);
  const Index n = mu.rows();
  detail::require_dim(packed.rows() == packed_tri_size(n), "net_V output size must be n(n+1)/2");

  BandBlocks H = BandBlocks::zeros(static_cast<std::size_t>(T), n);
  tape->factors.resize(T);
  for (Index t = 0; t < T; ++t) {
    tape->factors[t] = unpack_lower(packed.col(t), n);
    H.diag[t] = gram_plus_jitter(tape->factors[t], p.alpha);
  }
  GaussianPosterior q;
  q.kind = PosteriorKind::mf;
  q.mu = detail::stack_columns(mu);
  q.precision = BlockTriDiagSym(std::move(H));
  q.factor = btd_cholesky(q.precision);
  if (record) {
    tape->params = p;
    q.tape = std::move(tape);
  }
  return q;
}

inline GaussianPosterior build_vildsblk(const VildsBlkParams& p, const MatrixXd& x,
                                        bool record = true) {
  const Index T = x.rows();
  if (T < 1) throw InvalidParams("series must have at least one time step");
  auto tape = std::make_shared<PosteriorTape>();
  tape->inputs = p.norm.apply(x);
  tape->caches.resize(3);
  const MatrixXd mu = mlp_forward(p.net_mu, tape->inputs, record ? &tape->caches[0] : nullptr);
  const MatrixXd dpack = mlp_forward(p.net_D, tape->inputs, record ? &tape->caches[1] : nullptr);
  const Index n = mu.rows();
  detail::require_dim(dpack.rows() == packed_tri_size(n), "net_D output size must be n(n+1)/2");

  BandBlocks H = BandBlocks::zeros(static_cast<std::size_t>(T), n);
  for (Index t = 0; t < T; ++t) {
    H.diag[t] = unpack_symmetric(dpack.col(t), n);
    H.diag[t].diagonal().array() += p.alpha;
  }
  if (T > 1) {
    tape->pair_inputs = detail::pair_columns(tape->inputs);
    const MatrixXd bflat = mlp_forward(p.net_B, tape->pair_inputs, record ? &tape->caches[2] : nullptr);
    detail::require_dim(bflat.rows() == n * n, "net_B output size must be n^2");
    for (Index t = 0; t + 1 < T; ++t)
      H.lower[t] = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                  Eigen::RowMajor>>(bflat.col(t).data(), n, n);
  }
  GaussianPosterior q;
  q.kind = PosteriorKind::vildsblk;
  q.mu = detail::stack_columns(mu);
  q.precision = BlockTriDiagSym(std::move(H));
  q.factor = btd_cholesky(q.precision);
  if (record) {
    tape->params = p;
    q.tape = std::move(tape);
  }
  return q;
}

inline GaussianPosterior build_vildsmult(const VildsMultParams& p, const MatrixXd& x,
                                         bool record = true) {
  const Index T = x.rows();
  if (T < 1) throw InvalidParams("series must have at least one time step");
  auto tape = std::make_shared<PosteriorTape>();
  tape->inputs = p.norm.apply(x);
  tape->caches.resize(2);
  tape->M = mlp_forward(p.net_M, tape->inputs, record ? &tape->caches[0] : nullptr);
  const MatrixXd cpack = mlp_forward(p.net_C, tape->inputs, record ? &tape->caches[1] : nullptr);
  const Index n = tape->M.rows();
  detail::require_dim(cpack.rows() == packed_tri_size(n), "net_C output size must be n(n+1)/2");
  if (p.prior_A.rows() != n || p.prior_Q_chol.rows() != n)
    throw ShapeMismatch("prior matrices must be n x n");

  const MatrixXd Lq = detail::tril(p.prior_Q_chol);
  Eigen::LLT<MatrixXd> qllt(Lq * Lq.transpose());
  if (qllt.info() != Eigen::Success) throw InvalidParams("prior Q is not positive definite");
  tape->prior_Qi = qllt.solve(MatrixXd::Identity(n, n));

  BandBlocks H = detail::lds_prior_precision(p.prior_A, tape->prior_Qi, static_cast<std::size_t>(T));
  tape->factors.resize(T);
  tape->b.resize(n * T);
  for (Index t = 0; t < T; ++t) {
    tape->factors[t] = unpack_lower(cpack.col(t), n);
    const MatrixXd Ci = gram_plus_jitter(tape->factors[t], p.alpha);
    H.diag[t] += Ci;
    tape->b.segment(t * n, n) = Ci * tape->M.col(t);
  }
  GaussianPosterior q;
  q.kind = PosteriorKind::vildsmult;
  q.precision = BlockTriDiagSym(std::move(H));
  q.factor = btd_cholesky(q.precision);
  // mu = R^{-T} (R^{-1} (C^{-1} M))
  tape->y = btd_solve(q.factor, tape->b, Side::lower);
  q.mu = btd_solve(q.factor, tape->y, Side::upper);
  if (record) {
    tape->params = p;
    q.tape = std::move(tape);
  }
  return q;
}

inline GaussianPosterior build_posterior(const PosteriorParams& p, const MatrixXd& x,
                                         bool record = true) {
  return std::visit(
      [&](const auto& q) -> GaussianPosterior {
        using P = std::decay_t<decltype(q)>;
        if constexpr (std::is_same_v<P, MeanFieldParams>) return build_meanfield(q, x, record);
        else if constexpr (std::is_same_v<P, VildsBlkParams>) return build_vildsblk(q, x, record);
        else return build_vildsmult(q, x, record);
      },
      p);
}

// ---------------------------------------------------------------------------
// Sampling, entropy

inline VectorXd posterior_sample(const GaussianPosterior& q, const VectorXd& eps) {
  return btd_sample(q.mu, q.factor, eps);
}

/// (nT/2)(1 + log 2 pi) + (1/2) log det Sigma.
inline double posterior_entropy(const GaussianPosterior& q) {
  const double nT = static_cast<double>(q.factor.dim());
  return 0.5 * nT * (1.0 + detail::kLog2Pi) + 0.5 * btd_logdet_sigma(q.factor);
}

inline MarginalMoments posterior_marginals(const GaussianPosterior& q) {
  return btd_marginals(q.mu, q.factor);
}

// ---------------------------------------------------------------------------
// Backward pass

namespace detail {

inline MatrixXd unstack(const VectorXd& v, Index n) {
  return Eigen::Map<const MatrixXd>(v.data(), n, v.size() / n);
}

}  // namespace detail

/// Cotangent of sum_l <grad_z[l], z_l> + grad_entropy * H(q) with respect to
/// every learnable parameter, where z_l = posterior_sample(q, eps[l]).
inline PosteriorParams posterior_backward(const GaussianPosterior& q,
                                          std::span<const VectorXd> grad_z,
                                          std::span<const VectorXd> eps, double grad_entropy) {
  if (!q.tape) throw TapeMissing("posterior was built without gradient recording");
  if (grad_z.size() != eps.size()) throw DimensionMismatch("need one noise vector per gradient");
  const PosteriorTape& tp = *q.tape;
  const BlockBiDiagLower& R = q.factor;
  const Index n = R.n();
  const Index T = static_cast<Index>(R.T());

  VectorXd mu_bar = VectorXd::Zero(R.dim());
  BandBlocks R_bar = BandBlocks::zeros(R.T(), n);
  for (std::size_t l = 0; l < grad_z.size(); ++l) {
    detail::require_dim(grad_z[l].size() == R.dim() && eps[l].size() == R.dim(),
                        "gradient and noise length must equal n * T");
    mu_bar += grad_z[l];
    const VectorXd w = btd_solve(R, eps[l], Side::upper);
    btd_solve_vjp(R, w, grad_z[l], Side::upper, R_bar);
  }
  if (grad_entropy != 0.0) btd_logdet_sigma_vjp(R, 0.5 * grad_entropy, R_bar);

  PosteriorParams grad = zeros_like_posterior(tp.params);

  if (auto* p = std::get_if<VildsMultParams>(&tp.params)) {
    auto& g = std::get<VildsMultParams>(grad);
    const VectorXd y_bar = btd_solve_vjp(R, q.mu, mu_bar, Side::upper, R_bar);
    const VectorXd b_bar = btd_solve_vjp(R, tp.y, y_bar, Side::lower, R_bar);
    const BlockTriDiagSym H_bar = btd_cholesky_vjp(q.precision, R, R_bar);

    MatrixXd M_bar(n, T);
    MatrixXd C_out_bar(packed_tri_size(n), T);
    for (Index t = 0; t < T; ++t) {
      const MatrixXd& L = tp.factors[t];
      const MatrixXd Ci = gram_plus_jitter(L, p->alpha);
      const VectorXd bb = b_bar.segment(t * n, n);
      M_bar.col(t) = Ci * bb;
      const MatrixXd G = H_bar.diag[t] + bb * tp.M.col(t).transpose();
      C_out_bar.col(t) = pack_lower((G + G.transpose()) * L);
    }
    mlp_backward(p->net_M, tp.caches[0], M_bar, g.net_M);
    mlp_backward(p->net_C, tp.caches[1], C_out_bar, g.net_C);

    const MatrixXd& A = p->prior_A;
    const MatrixXd& Qi = tp.prior_Qi;
    MatrixXd Qi_bar = MatrixXd::Zero(n, n);
    MatrixXd A_bar = MatrixXd::Zero(n, n);
    for (Index t = 0; t < T; ++t) {
      const MatrixXd& Db = H_bar.diag[t];
      Qi_bar += Db;
      if (t + 1 < T) {
        const MatrixXd& Bb = H_bar.lower[t];
        Qi_bar += A * Db * A.transpose() - Bb * A.transpose();
        A_bar += 2.0 * Qi * A * Db - Qi * Bb;
      }
    }
    const MatrixXd Q_bar = -Qi * Qi_bar * Qi;
    const MatrixXd Lq = detail::tril(p->prior_Q_chol);
    g.prior_A = A_bar;
    g.prior_Q_chol = detail::tril((Q_bar + Q_bar.transpose()) * Lq);
    return grad;
  }

  const BlockTriDiagSym H_bar = btd_cholesky_vjp(q.precision, R, R_bar);
  const MatrixXd mu_bar_cols = detail::unstack(mu_bar, n);

  if (auto* p = std::get_if<MeanFieldParams>(&tp.params)) {
    auto& g = std::get<MeanFieldParams>(grad);
    MatrixXd V_out_bar(packed_tri_size(n), T);
    for (Index t = 0; t < T; ++t)
      V_out_bar.col(t) = pack_lower(2.0 * H_bar.diag[t] * tp.factors[t]);
    mlp_backward(p->net_mu, tp.caches[0], mu_bar_cols, g.net_mu);
    mlp_backward(p->net_V, tp.caches[1], V_out_bar, g.net_V);
    return grad;
  }

  const auto& p = std::get<VildsBlkParams>(tp.params);
  auto& g = std::get<VildsBlkParams>(grad);
  MatrixXd D_out_bar(packed_tri_size(n), T);
  for (Index t = 0; t < T; ++t) D_out_bar.col(t) = unpack_symmetric_vjp(H_bar.diag[t]);
  mlp_backward(p.net_mu, tp.caches[0], mu_bar_cols, g.net_mu);
  mlp_backward(p.net_D, tp.caches[1], D_out_bar, g.net_D);
  if (T > 1) {
    MatrixXd B_out_bar(n * n, T - 1);
    for (Index t = 0; t + 1 < T; ++t) {
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm =
          H_bar.lower[t];
      B_out_bar.col(t) = Eigen::Map<const VectorXd>(rm.data(), n * n);
    }
    mlp_backward(p.net_B, tp.caches[2], B_out_bar, g.net_B);
  }
  return grad;
}

inline PosteriorParams posterior_backward(const GaussianPosterior& q, const VectorXd& grad_z,
                                          double grad_entropy, const VectorXd& eps) {
  return posterior_backward(q, std::span<const VectorXd>(&grad_z, 1),
                            std::span<const VectorXd>(&eps, 1), grad_entropy);
}

// ---------------------------------------------------------------------------
// Initialization

struct PosteriorInit {
  Index latent_dim = 2;
  Index hidden_width = 64;
  std::size_t depth = 5;  // affine layers per network
  double alpha = 0.1;
  std::uint64_t seed = 0;
};

namespace detail {

/// Data-dependent adjustments after He initialization: units in layers
/// narrower than four are shifted to be active on every initialization input,
/// and the output layer is shrunk by 0.1 with its bias set so the mean output
/// over the inputs equals `target`.
inline void calibrate_net(Mlp& net, const MatrixXd& X, const VectorXd& target) {
  MatrixXd h = X;
  for (std::size_t l = 0; l < net.W.size(); ++l) {
    MatrixXd pre = net.W[l] * h;
    const bool last = l + 1 == net.W.size();
    if (last) {
      net.W[l] *= 0.1;
      const VectorXd mean =
          X.cols() > 0 ? VectorXd((0.1 * pre).rowwise().mean()) : VectorXd::Zero(pre.rows());
      net.b[l] = target - mean;
      break;
    }
    if (net.W[l].rows() < 4 && pre.cols() > 0)
      net.b[l] = (0.1 - pre.rowwise().minCoeff().array()).max(0.0).matrix();
    pre.colwise() += net.b[l];
    h = pre.cwiseMax(0.0);
  }
}

}  // namespace detail

/// Fresh parameters for `kind` fitted to observations x (T x m). The prior of
/// VILDSmult starts at A = 0.9 I, Q = I.
inline PosteriorParams init_posterior(PosteriorKind kind, const MatrixXd& x,
                                      const PosteriorInit& cfg) {
  const Index n = cfg.latent_dim;
  const Index m = x.cols();
  if (n < 1 || m < 1 || cfg.depth < 1 || cfg.hidden_width < 1)
    throw InvalidParams("invalid posterior dimensions");
  if (!(cfg.alpha > 0.0)) throw InvalidParams("alpha must be positive");
  const InputNorm norm = InputNorm::fit(x);
  const MatrixXd X = norm.apply(x);
  const Index k = packed_tri_size(n);
  const VectorXd eye_packed = pack_lower(MatrixXd::Identity(n, n));
  auto net = [&](Index in, Index out, std::uint64_t salt, const MatrixXd& data,
                 const VectorXd& target) {
    Mlp m_ = mlp_init(NetLayout::uniform(in, cfg.hidden_width, cfg.depth, out), cfg.seed * 7919 + salt);
    detail::calibrate_net(m_, data, target);
    return m_;
  };

  switch (kind) {
    case PosteriorKind::mf: {
      MeanFieldParams p;
      p.norm = norm;
      p.alpha = cfg.alpha;
      p.net_mu = net(m, n, 1, X, VectorXd::Zero(n));
      p.net_V = net(m, k, 2, X, eye_packed);
      return p;
    }
    case PosteriorKind::vildsblk: {
      VildsBlkParams p;
      p.norm = norm;
      p.alpha = cfg.alpha;
      p.net_mu = net(m, n, 1, X, VectorXd::Zero(n));
      p.net_D = net(m, k, 2, X, eye_packed);
      p.net_B = net(2 * m, n * n, 3, detail::pair_columns(X), VectorXd::Zero(n * n));
      return p;
    }
    case PosteriorKind::vildsmult: {
      VildsMultParams p;
      p.norm = norm;
      p.alpha = cfg.alpha;
      p.net_M = net(m, n, 1, X, VectorXd::Zero(n));
      p.net_C = net(m, k, 2, X, eye_packed);
      p.prior_A = 0.9 * MatrixXd::Identity(n, n);
      p.prior_Q_chol = MatrixXd::Identity(n, n);
      return p;
    }
    case PosteriorKind::fixed: break;
  }
  throw InvalidParams("cannot initialize a fixed posterior");
}

}  // namespace vilds
