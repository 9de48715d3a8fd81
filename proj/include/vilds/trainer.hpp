#pragma once

// Stochastic-gradient ELBO maximization: reparameterized estimates on random
// contiguous windows, Adadelta updates, and a plateau-triggered learning-rate
// decay.

#include <chrono>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "vilds/errors.hpp"
#include "vilds/genmodels.hpp"
#include "vilds/params.hpp"
#include "vilds/posteriors.hpp"

namespace vilds {

/// Unconstrained view of the learnable generative parameters: Q through its
/// lower Cholesky factor, observation variances through their logs. Blocks
/// a family does not use are empty.
struct ThetaFree {
  MatrixXd A, Q_chol, C;
  VectorXd d, log_obs_var;

  template <class F> void for_each(F&& f) { f(A); f(Q_chol); f(C); f(d); f(log_obs_var); }
  template <class F> void for_each(F&& f) const { f(A); f(Q_chol); f(C); f(d); f(log_obs_var); }

  static ThetaFree from(const GenerativeParams& th) {
    ThetaFree f;
    if (th.family == Family::nonlin1d) return f;
    f.A = th.A;
    f.Q_chol = Eigen::LLT<MatrixXd>(th.Q).matrixL();
    f.C = th.C;
    if (th.family == Family::plds) f.d = th.d;
    if (th.family == Family::lds) f.log_obs_var = th.obs_var.array().log().matrix();
    return f;
  }

  /// Writes these values into a copy of `base`.
  GenerativeParams apply_to(const GenerativeParams& base) const {
    GenerativeParams th = base;
    if (th.family == Family::nonlin1d) return th;
    th.A = A;
    const MatrixXd L = detail::tril(Q_chol);
    th.Q = detail::sym(L * L.transpose());
    th.C = C;
    if (th.family == Family::plds) th.d = d;
    if (th.family == Family::lds) th.obs_var = log_obs_var.array().exp().matrix();
    return th;
  }

  /// Chain a ThetaGrad into this parameterization.
  static ThetaFree from_grad(const GenerativeParams& th, const ThetaGrad& g) {
    ThetaFree f;
    if (th.family == Family::nonlin1d) return f;
    f.A = g.A;
    f.Q_chol = g.Q_chol;
    f.C = g.C;
    if (th.family == Family::plds) f.d = g.d;
    if (th.family == Family::lds) f.log_obs_var = g.obs_var.cwiseProduct(th.obs_var);
    return f;
  }
};

struct FitConfig {
  PosteriorKind kind = PosteriorKind::vildsblk;
  PosteriorInit init;
  int L = 1;
  Index window = 100;
  int minibatches_per_epoch = 0;  // 0: ceil(T / window), one pass over the series
  int epochs = 500;
  double base_lr = 1.0;
  int patience = 20;
  double decay_factor = 10.0;
  std::uint64_t seed = 0;
  bool learn_theta = true;
  bool learn_phi = true;
  int max_alpha_doublings = 30;
};

// ---------------------------------------------------------------------------
// Adadelta

struct AdadeltaState {
  VectorXd sq_grad;    // running mean of g^2
  VectorXd sq_update;  // running mean of update^2
  double rho = 0.95;
  double eps = 1e-6;

  static AdadeltaState zeros(Index size) {
    return {VectorXd::Zero(size), VectorXd::Zero(size)};
  }
};

/// One ascent step: params += lr_scale * sqrt(E[du^2] + eps) / sqrt(E[g^2] + eps) * g.
/// The accumulator tracks the unscaled update.
inline void adadelta_step(AdadeltaState& s, VectorXd& params, const VectorXd& grad,
                          double lr_scale) {
  if (params.size() != grad.size() || s.sq_grad.size() != grad.size() ||
      s.sq_update.size() != grad.size())
    throw ShapeMismatch("optimizer state, parameters and gradient differ in size");
  s.sq_grad = s.rho * s.sq_grad + (1.0 - s.rho) * grad.cwiseAbs2();
  const VectorXd upd = ((s.sq_update.array() + s.eps).sqrt() / (s.sq_grad.array() + s.eps).sqrt() *
                        grad.array())
                           .matrix();
  s.sq_update = s.rho * s.sq_update + (1.0 - s.rho) * upd.cwiseAbs2();
  params += lr_scale * upd;
}

// ---------------------------------------------------------------------------
// Learning-rate schedule

/// Divides the rate by `factor` once `patience` consecutive observations fail
/// to beat the best value seen so far.
class LrSchedule {
public:
  LrSchedule(double base, int patience, double factor)
      : lr_(base), patience_(patience), factor_(factor) {}

  void start(double initial) {
    best_ = initial;
    stale_ = 0;
  }
  void observe(double value) {
    if (value > best_) {
      best_ = value;
      stale_ = 0;
      return;
    }
    if (++stale_ >= patience_) {
      lr_ /= factor_;
      stale_ = 0;
    }
  }
  double lr() const { return lr_; }

private:
  double lr_;
  int patience_;
  double factor_;
  double best_ = -std::numeric_limits<double>::infinity();
  int stale_ = 0;
};

// ---------------------------------------------------------------------------
// Windows

struct Window {
  Index start = 0;
  Index len = 0;
};

/// `per_epoch` contiguous ranges [s, s + window_len) with s uniform on
/// [0, T - window_len].
template <class Rng>
std::vector<Window> make_windows(Index T, Index window_len, int per_epoch, Rng& rng) {
  if (window_len < 1 || window_len > T || per_epoch < 0)
    throw InvalidWindow("window length must lie in [1, T]");
  std::uniform_int_distribution<Index> start(0, T - window_len);
  std::vector<Window> out;
  out.reserve(static_cast<std::size_t>(per_epoch));
  for (int i = 0; i < per_epoch; ++i) out.push_back({start(rng), window_len});
  return out;
}

/// Factor T / window_len that puts a window ELBO on the full-series scale.
inline double window_scale(Index T, Index window_len) {
  return static_cast<double>(T) / static_cast<double>(window_len);
}

// ---------------------------------------------------------------------------
// ELBO

struct ElboResult {
  double value = 0.0;
  ThetaFree grad_theta;
  PosteriorParams grad_phi;
};

inline std::vector<VectorXd> standard_normal_draws(std::mt19937_64& rng, Index dim, int count) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<VectorXd> out(static_cast<std::size_t>(count), VectorXd(dim));
  for (auto& e : out)
    for (Index i = 0; i < dim; ++i) e[i] = normal(rng);
  return out;
}

/// scale * (H(q) + mean_l log p(x, z_l)) with z_l = mu + R^{-T} eps_l, and its
/// gradients. The entropy is the closed form; `with_entropy = false` drops it.
inline ElboResult elbo_with_noise(const GenerativeParams& theta, const PosteriorParams& phi,
                                  const Dataset& data, const std::vector<VectorXd>& eps,
                                  double scale = 1.0, bool with_entropy = true) {
  if (eps.empty()) throw InvalidParams("need at least one noise draw");
  const GaussianPosterior q = build_posterior(phi, data.x, true);
  const double inv_L = 1.0 / static_cast<double>(eps.size());

  ElboResult r;
  r.grad_theta = zeros_like(ThetaFree::from(theta));
  std::vector<VectorXd> grad_z;
  grad_z.reserve(eps.size());
  double lp = 0.0;
  for (const auto& e : eps) {
    const VectorXd z = posterior_sample(q, e);
    lp += log_joint(theta, data, z);
    grad_z.push_back(scale * inv_L * log_joint_grad_z(theta, data, z));
    if (theta.family != Family::nonlin1d) {
      const ThetaFree g = ThetaFree::from_grad(theta, log_joint_grad_theta(theta, data, z));
      r.grad_theta = params_axpy(r.grad_theta, scale * inv_L, g);
    }
  }
  const double H = with_entropy ? posterior_entropy(q) : 0.0;
  r.value = scale * (H + inv_L * lp);
  r.grad_phi = posterior_backward(q, grad_z, eps, with_entropy ? scale : 0.0);
  return r;
}

/// ELBO value only.
inline double elbo_value(const GenerativeParams& theta, const PosteriorParams& phi,
                         const Dataset& data, const std::vector<VectorXd>& eps) {
  const GaussianPosterior q = build_posterior(phi, data.x, false);
  double lp = 0.0;
  for (const auto& e : eps) lp += log_joint(theta, data, posterior_sample(q, e));
  return posterior_entropy(q) + lp / static_cast<double>(eps.size());
}

/// SGVB estimate on one window with L fresh standard-normal draws.
inline ElboResult elbo_estimate(const GenerativeParams& theta, const PosteriorParams& phi,
                                const Dataset& window, int L, std::mt19937_64& rng,
                                double scale = 1.0) {
  if (L < 1) throw InvalidParams("L must be at least 1");
  if (window.T() < 1) throw InvalidWindow("empty window");
  const auto eps = standard_normal_draws(rng, window.T() * latent_dim(phi), L);
  return elbo_with_noise(theta, phi, window, eps, scale);
}

// ---------------------------------------------------------------------------
// Fit loop

struct EpochRecord {
  int epoch = 0;
  double wall_seconds = 0.0;
  double elbo = 0.0;
  double lr_scale = 0.0;
  int cholesky_failures = 0;
  double spectral_radius_A = 0.0;
};

struct FitResult {
  GenerativeParams theta;
  PosteriorParams phi;
  double initial_elbo = 0.0;
  std::vector<EpochRecord> epochs;
  int cholesky_failures = 0;

  std::vector<double> elbo_trace() const {
    std::vector<double> v;
    for (const auto& e : epochs) v.push_back(e.elbo);
    return v;
  }
};

inline double spectral_radius(const MatrixXd& A) {
  if (A.size() == 0) return 0.0;
  Eigen::EigenSolver<MatrixXd> es(A, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

namespace detail {

/// Calls `f(phi)`, doubling phi's alpha after each factorization failure.
/// The alpha that finally worked is left in `phi`.
template <class F>
auto with_alpha_retry(PosteriorParams& phi, int max_doublings, int& failures, F&& f) {
  for (int k = 0;; ++k) {
    try {
      return f(static_cast<const PosteriorParams&>(phi));
    } catch (const NotPositiveDefinite&) {
      ++failures;
      if (k >= max_doublings) throw;
      set_alpha(phi, 2.0 * alpha_of(phi));
    }
  }
}

}  // namespace detail

inline constexpr std::uint64_t kEvalSeedSalt = 0x9e3779b97f4a7c15ULL;

namespace detail {

inline double evaluation_elbo_inplace(const GenerativeParams& theta, PosteriorParams& phi,
                                      const Dataset& data, std::uint64_t seed, int& failures,
                                      int max_doublings) {
  std::mt19937_64 rng(seed ^ kEvalSeedSalt);
  const auto eps = standard_normal_draws(rng, data.T() * latent_dim(phi), 1);
  return with_alpha_retry(phi, max_doublings, failures, [&](const PosteriorParams& p) {
    return elbo_value(theta, p, data, eps);
  });
}

}  // namespace detail

/// Full-series ELBO at the fixed evaluation noise used by fit().
inline double evaluation_elbo(const GenerativeParams& theta, const PosteriorParams& phi,
                              const Dataset& data, std::uint64_t seed, int* failures = nullptr,
                              int max_doublings = 30) {
  int local = 0;
  PosteriorParams trial = phi;
  return detail::evaluation_elbo_inplace(theta, trial, data, seed, failures ? *failures : local,
                                         max_doublings);
}

/// Called after each epoch with the record just appended.
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs the configured number of epochs. A step whose posterior cannot be
/// factorized is retried with doubled alpha for that step only, and an update
/// that breaks the factorization on its own window is rolled back. The
/// returned phi carries the alpha its last full-series evaluation needed, so
/// it always factorizes on `data`. Running out of doublings or a non-finite
/// ELBO aborts with NonFiniteObjective.
inline FitResult fit(const FitConfig& cfg, const Dataset& data, const GenerativeParams& theta_init,
                     const PosteriorParams& phi_init, const EpochCallback& on_epoch = {}) {
  theta_init.validate();
  if (data.m() != theta_init.m()) throw DimensionMismatch("data width differs from model m");
  if (!data.x.allFinite()) throw InvalidParams("observations contain non-finite values");
  if (cfg.L < 1) throw InvalidParams("L must be at least 1");
  if (cfg.window < 1 || cfg.window > data.T()) throw InvalidWindow("window length must lie in [1, T]");
  if (latent_dim(phi_init) != theta_init.n()) throw DimensionMismatch("posterior and model latent dims differ");

  const auto t0 = std::chrono::steady_clock::now();
  const bool learn_theta = cfg.learn_theta && theta_init.family != Family::nonlin1d;

  FitResult res;
  res.theta = theta_init;
  res.phi = phi_init;
  ThetaFree theta_free = ThetaFree::from(theta_init);
  VectorXd theta_vec = flatten(theta_free);
  VectorXd phi_vec = flatten_posterior(res.phi);
  AdadeltaState theta_opt = AdadeltaState::zeros(theta_vec.size());
  AdadeltaState phi_opt = AdadeltaState::zeros(phi_vec.size());
  LrSchedule sched(cfg.base_lr, cfg.patience, cfg.decay_factor);
  std::mt19937_64 rng(cfg.seed);

  auto abort = [&](const std::string& what, int epoch) -> NonFiniteObjective {
    const int last_good = static_cast<int>(res.epochs.size());
    return NonFiniteObjective(what + " at epoch " + std::to_string(epoch) + " (last good epoch " +
                                  std::to_string(last_good) + ")",
                              last_good);
  };
  double eval_alpha = alpha_of(res.phi);
  auto evaluate = [&](int epoch, int& failures) {
    double v;
    PosteriorParams probe = res.phi;
    try {
      v = detail::evaluation_elbo_inplace(res.theta, probe, data, cfg.seed, failures,
                                          cfg.max_alpha_doublings);
      eval_alpha = alpha_of(probe);
    } catch (const NotPositiveDefinite&) {
      throw abort("posterior factorization failed", epoch);
    }
    if (!std::isfinite(v)) throw abort("ELBO became non-finite", epoch);
    return v;
  };

  int init_failures = 0;
  res.initial_elbo = evaluate(0, init_failures);
  res.cholesky_failures = init_failures;
  sched.start(res.initial_elbo);

  const double scale = window_scale(data.T(), cfg.window);
  const int per_epoch = cfg.minibatches_per_epoch > 0
                            ? cfg.minibatches_per_epoch
                            : static_cast<int>((data.T() + cfg.window - 1) / cfg.window);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = sched.lr();
    int failures = 0;
    const auto windows = make_windows(data.T(), cfg.window, per_epoch, rng);
    for (const auto& w : windows) {
      const Dataset win = data.slice(w.start, w.len);
      ElboResult r;
      PosteriorParams trial = res.phi;
      try {
        r = detail::with_alpha_retry(trial, cfg.max_alpha_doublings, failures,
                                     [&](const PosteriorParams& p) {
                                       return elbo_estimate(res.theta, p, win, cfg.L, rng, scale);
                                     });
      } catch (const NotPositiveDefinite&) {
        throw abort("posterior factorization failed", epoch);
      }
      if (cfg.learn_phi) {
        const VectorXd keep_vec = phi_vec;
        const AdadeltaState keep_opt = phi_opt;
        adadelta_step(phi_opt, phi_vec, flatten_posterior(r.grad_phi), lr);
        unflatten_posterior(res.phi, phi_vec);
        // reject an update that leaves this window without a valid factor
        try {
          build_posterior(res.phi, win.x, false);
        } catch (const NotPositiveDefinite&) {
          ++failures;
          phi_vec = keep_vec;
          phi_opt = keep_opt;
          unflatten_posterior(res.phi, phi_vec);
        }
      }
      if (learn_theta) {
        adadelta_step(theta_opt, theta_vec, flatten(r.grad_theta), lr);
        unflatten_into(theta_free, theta_vec);
        res.theta = theta_free.apply_to(theta_init);
      }
    }

    const double elbo = evaluate(epoch, failures);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.elbo = elbo;
    rec.lr_scale = lr;
    rec.cholesky_failures = failures;
    if (const auto* mp = std::get_if<VildsMultParams>(&res.phi))
      rec.spectral_radius_A = spectral_radius(mp->prior_A);
    else
      rec.spectral_radius_A = res.theta.family == Family::nonlin1d ? 0.0 : spectral_radius(res.theta.A);
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.cholesky_failures += rec.cholesky_failures;
    res.epochs.push_back(rec);
    sched.observe(elbo);
    if (on_epoch) on_epoch(rec);
  }
  set_alpha(res.phi, eval_alpha);
  return res;
}

}  // namespace vilds
