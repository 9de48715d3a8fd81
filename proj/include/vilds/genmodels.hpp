#pragma once

// Generative state-space models p(x, z): linear-Gaussian (LDS), Poisson
// observations through an exponential link (PLDS), and a fixed scalar
// nonlinear system (NONLIN1D). Latent trajectories are stacked vectors of
// length n * T; observations are T x m matrices, one row per time step.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "vilds/common.hpp"
#include "vilds/errors.hpp"

namespace vilds {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Family { lds, plds, nonlin1d };

inline std::string_view to_string(Family f) {
  switch (f) {
    case Family::lds: return "lds";
    case Family::plds: return "plds";
    case Family::nonlin1d: return "nonlin1d";
  }
  return "?";
}

inline Family parse_family(std::string_view s) {
  if (s == "lds") return Family::lds;
  if (s == "plds") return Family::plds;
  if (s == "nonlin1d") return Family::nonlin1d;
  throw InvalidParams("unknown model family '" + std::string(s) + "'");
}

/// Constants of z_t = a z_{t-1} + b cos(c z_{t-1}) + innov_scale * e_t,
/// x_t = obs_gain z_t + obs_scale * eta_t.
struct NonlinConstants {
  double a = -0.5;
  double b = 5.0;
  double c = 0.5;
  double innov_scale = 0.5;
  double obs_gain = 0.5;
  double obs_scale = 0.5;

  double transition(double z) const { return a * z + b * std::cos(c * z); }
  double transition_deriv(double z) const { return a - b * c * std::sin(c * z); }
};

struct GenerativeParams {
  Family family = Family::lds;
  MatrixXd A;        // n x n
  MatrixXd Q;        // n x n, SPD
  VectorXd z1_mean;  // n
  MatrixXd z1_cov;   // n x n, SPD
  MatrixXd C;        // m x n
  VectorXd d;        // m, PLDS only
  VectorXd obs_var;  // m, LDS only
  NonlinConstants nonlin;

  Index n() const { return z1_mean.size(); }
  Index m() const { return family == Family::nonlin1d ? 1 : C.rows(); }

  void validate() const {
    const Index nn = n();
    if (nn < 1) throw InvalidParams("latent dimension must be positive");
    auto spd = [](const MatrixXd& M) {
      if (M.rows() != M.cols() || !M.isApprox(M.transpose(), 1e-10)) return false;
      Eigen::LLT<MatrixXd> llt(M);
      return llt.info() == Eigen::Success;
    };
    if (z1_cov.rows() != nn || !spd(z1_cov)) throw InvalidParams("z1_cov must be SPD n x n");
    if (family == Family::nonlin1d) {
      if (nn != 1) throw InvalidParams("nonlin1d requires n = m = 1");
      if (nonlin.innov_scale < 0.0 || nonlin.obs_scale < 0.0)
        throw InvalidParams("noise scales must be non-negative");
      return;
    }
    if (A.rows() != nn || A.cols() != nn) throw InvalidParams("A must be n x n");
    if (Q.rows() != nn || !spd(Q)) throw InvalidParams("Q must be SPD n x n");
    if (C.cols() != nn || C.rows() < 1) throw InvalidParams("C must be m x n");
    if (family == Family::lds) {
      if (obs_var.size() != C.rows() || (obs_var.array() <= 0.0).any())
        throw InvalidParams("obs_var must be a positive m-vector");
    } else if (d.size() != C.rows()) {
      throw InvalidParams("d must be an m-vector");
    }
  }

  static GenerativeParams nonlin1d_default() {
    GenerativeParams p;
    p.family = Family::nonlin1d;
    p.A = MatrixXd::Zero(1, 1);
    p.Q = MatrixXd::Constant(1, 1, p.nonlin.innov_scale * p.nonlin.innov_scale);
    p.z1_mean = VectorXd::Zero(1);
    p.z1_cov = MatrixXd::Constant(1, 1, 9.0);
    p.C = MatrixXd::Constant(1, 1, p.nonlin.obs_gain);
    return p;
  }
};

/// Cotangent of log_joint with respect to the learnable generative
/// parameters. Q is differentiated through its lower Cholesky factor.
struct ThetaGrad {
  MatrixXd A, Q_chol, C;
  VectorXd d, obs_var;
};

struct Dataset {
  MatrixXd x;                     // T x m
  std::optional<MatrixXd> z_true;  // T x n

  Index T() const { return x.rows(); }
  Index m() const { return x.cols(); }

  Dataset slice(Index start, Index len) const {
    if (start < 0 || len < 1 || start + len > T()) throw InvalidWindow("window out of range");
    Dataset out;
    out.x = x.middleRows(start, len);
    if (z_true) out.z_true = z_true->middleRows(start, len);
    return out;
  }
};

namespace detail {

inline MatrixXd spd_inverse(const MatrixXd& M) {
  Eigen::LLT<MatrixXd> llt(M);
  if (llt.info() != Eigen::Success) throw InvalidParams("matrix is not SPD");
  return llt.solve(MatrixXd::Identity(M.rows(), M.cols()));
}

inline double spd_logdet(const MatrixXd& M) {
  Eigen::LLT<MatrixXd> llt(M);
  if (llt.info() != Eigen::Success) throw InvalidParams("matrix is not SPD");
  return 2.0 * MatrixXd(llt.matrixL()).diagonal().array().log().sum();
}

inline void check_shapes(const GenerativeParams& th, const Dataset& data, const VectorXd& z) {
  if (data.m() != th.m()) throw DimensionMismatch("observation width differs from model m");
  if (z.size() != data.T() * th.n()) throw DimensionMismatch("latent vector must have length n * T");
  if (th.family == Family::plds && (data.x.array() < 0.0).any())
    throw NegativeCount("Poisson observations must be non-negative");
}

inline Eigen::Map<const MatrixXd> as_columns(const VectorXd& z, Index n) {
  return {z.data(), n, z.size() / n};
}

}  // namespace detail

inline constexpr int kNonlinBurnIn = 100;

/// Ancestral sampling. NONLIN1D starts at z = 0 and discards a 100-step
/// burn-in; the other families draw z_1 from N(z1_mean, z1_cov).
inline Dataset simulate(const GenerativeParams& th, Index T, std::uint64_t seed) {
  if (T < 1) throw InvalidParams("T must be at least 1");
  th.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Index n = th.n();
  const Index m = th.m();
  Dataset out;
  out.x.resize(T, m);
  MatrixXd Z(T, n);

  if (th.family == Family::nonlin1d) {
    const auto& k = th.nonlin;
    double z = 0.0;
    for (int i = 0; i < kNonlinBurnIn; ++i) z = k.transition(z) + k.innov_scale * normal(rng);
    for (Index t = 0; t < T; ++t) {
      z = k.transition(z) + k.innov_scale * normal(rng);
      Z(t, 0) = z;
      out.x(t, 0) = k.obs_gain * z + k.obs_scale * normal(rng);
    }
    out.z_true = std::move(Z);
    return out;
  }

  const MatrixXd LQ = Eigen::LLT<MatrixXd>(th.Q).matrixL();
  const MatrixXd L1 = Eigen::LLT<MatrixXd>(th.z1_cov).matrixL();
  auto draw = [&](Index k) {
    VectorXd e(k);
    for (Index i = 0; i < k; ++i) e[i] = normal(rng);
    return e;
  };
  VectorXd z = th.z1_mean + L1 * draw(n);
  for (Index t = 0; t < T; ++t) {
    if (t > 0) z = th.A * z + LQ * draw(n);
    Z.row(t) = z.transpose();
    if (th.family == Family::lds) {
      const VectorXd mean = th.C * z;
      for (Index k = 0; k < m; ++k) out.x(t, k) = mean[k] + std::sqrt(th.obs_var[k]) * normal(rng);
    } else {
      const VectorXd rate = (th.C * z + th.d).array().exp();
      for (Index k = 0; k < m; ++k) {
        std::poisson_distribution<long long> pois(rate[k]);
        out.x(t, k) = static_cast<double>(pois(rng));
      }
    }
  }
  out.z_true = std::move(Z);
  return out;
}

inline double poisson_logpmf(double x, double log_rate) {
  return x * log_rate - std::exp(log_rate) - std::lgamma(x + 1.0);
}

/// log p(x, z): initial-state density, transition densities and observation
/// densities (Poisson terms include -log x!).
inline double log_joint(const GenerativeParams& th, const Dataset& data, const VectorXd& z) {
  detail::check_shapes(th, data, z);
  const Index n = th.n();
  const Index T = data.T();
  const auto Z = detail::as_columns(z, n);
  using detail::kLog2Pi;

  double lp = 0.0;
  {
    const MatrixXd P1 = detail::spd_inverse(th.z1_cov);
    const VectorXd e = Z.col(0) - th.z1_mean;
    lp += -0.5 * (n * kLog2Pi + detail::spd_logdet(th.z1_cov) + e.dot(P1 * e));
  }

  if (th.family == Family::nonlin1d) {
    const auto& k = th.nonlin;
    const double s2 = k.innov_scale * k.innov_scale;
    const double o2 = k.obs_scale * k.obs_scale;
    for (Index t = 1; t < T; ++t) {
      const double e = Z(0, t) - k.transition(Z(0, t - 1));
      lp += -0.5 * (kLog2Pi + std::log(s2) + e * e / s2);
    }
    for (Index t = 0; t < T; ++t) {
      const double r = data.x(t, 0) - k.obs_gain * Z(0, t);
      lp += -0.5 * (kLog2Pi + std::log(o2) + r * r / o2);
    }
    return lp;
  }

  if (T > 1) {
    const MatrixXd Qi = detail::spd_inverse(th.Q);
    const MatrixXd E = Z.rightCols(T - 1) - th.A * Z.leftCols(T - 1);
    lp += -0.5 * static_cast<double>(T - 1) * (n * kLog2Pi + detail::spd_logdet(th.Q));
    lp += -0.5 * (E.array() * (Qi * E).array()).sum();
  }

  const MatrixXd Rt = th.C * Z;  // m x T
  const auto X = data.x.transpose();
  if (th.family == Family::lds) {
    const MatrixXd res = X - Rt;
    const Eigen::ArrayXd iv = th.obs_var.array().inverse();
    lp += -0.5 * static_cast<double>(T) * (th.m() * kLog2Pi + th.obs_var.array().log().sum());
    lp += -0.5 * (res.array().square().colwise() * iv).sum();
  } else {
    for (Index t = 0; t < T; ++t)
      for (Index k = 0; k < th.m(); ++k) lp += poisson_logpmf(X(k, t), Rt(k, t) + th.d[k]);
  }
  return lp;
}

/// d log p(x, z) / dz.
inline VectorXd log_joint_grad_z(const GenerativeParams& th, const Dataset& data,
                                 const VectorXd& z) {
  detail::check_shapes(th, data, z);
  const Index n = th.n();
  const Index T = data.T();
  const auto Z = detail::as_columns(z, n);
  VectorXd g = VectorXd::Zero(z.size());
  Eigen::Map<MatrixXd> G(g.data(), n, T);

  G.col(0) -= detail::spd_inverse(th.z1_cov) * (Z.col(0) - th.z1_mean);

  if (th.family == Family::nonlin1d) {
    const auto& k = th.nonlin;
    const double s2 = k.innov_scale * k.innov_scale;
    const double o2 = k.obs_scale * k.obs_scale;
    for (Index t = 1; t < T; ++t) {
      const double prev = Z(0, t - 1);
      const double e = Z(0, t) - k.transition(prev);
      G(0, t) -= e / s2;
      G(0, t - 1) += k.transition_deriv(prev) * e / s2;
    }
    for (Index t = 0; t < T; ++t)
      G(0, t) += k.obs_gain * (data.x(t, 0) - k.obs_gain * Z(0, t)) / o2;
    return g;
  }

  if (T > 1) {
    const MatrixXd Qi = detail::spd_inverse(th.Q);
    const MatrixXd W = Qi * (Z.rightCols(T - 1) - th.A * Z.leftCols(T - 1));
    G.rightCols(T - 1) -= W;
    G.leftCols(T - 1) += th.A.transpose() * W;
  }
  const auto X = data.x.transpose();
  if (th.family == Family::lds) {
    const MatrixXd res = ((X - th.C * Z).array().colwise() / th.obs_var.array()).matrix();
    G += th.C.transpose() * res;
  } else {
    MatrixXd r = th.C * Z;
    r.colwise() += th.d;
    G += th.C.transpose() * (X - MatrixXd(r.array().exp()));
  }
  return g;
}

/// Gradient of log p(x, z) with respect to A, chol(Q), C, d and obs_var.
/// NONLIN1D constants are frozen and yield empty cotangents.
inline ThetaGrad log_joint_grad_theta(const GenerativeParams& th, const Dataset& data,
                                      const VectorXd& z) {
  detail::check_shapes(th, data, z);
  ThetaGrad g;
  if (th.family == Family::nonlin1d) return g;
  const Index n = th.n();
  const Index T = data.T();
  const auto Z = detail::as_columns(z, n);

  g.A = MatrixXd::Zero(n, n);
  g.Q_chol = MatrixXd::Zero(n, n);
  if (T > 1) {
    const MatrixXd Qi = detail::spd_inverse(th.Q);
    const MatrixXd E = Z.rightCols(T - 1) - th.A * Z.leftCols(T - 1);
    const MatrixXd W = Qi * E;
    g.A = W * Z.leftCols(T - 1).transpose();
    const MatrixXd S = E * E.transpose();
    const MatrixXd Q_bar = -0.5 * static_cast<double>(T - 1) * Qi + 0.5 * Qi * S * Qi;
    const MatrixXd LQ = Eigen::LLT<MatrixXd>(th.Q).matrixL();
    g.Q_chol = MatrixXd(((Q_bar + Q_bar.transpose()) * LQ).triangularView<Eigen::Lower>());
  }

  const auto X = data.x.transpose();
  if (th.family == Family::lds) {
    const MatrixXd res = X - th.C * Z;
    const MatrixXd wres = (res.array().colwise() / th.obs_var.array()).matrix();
    g.C = wres * Z.transpose();
    const Eigen::ArrayXd v = th.obs_var.array();
    g.obs_var = (-0.5 * static_cast<double>(T) / v +
                 0.5 * res.array().square().rowwise().sum() / v.square())
                    .matrix();
    g.d = VectorXd::Zero(th.m());
  } else {
    MatrixXd r = th.C * Z;
    r.colwise() += th.d;
    const MatrixXd resid = X - MatrixXd(r.array().exp());
    g.C = resid * Z.transpose();
    g.d = resid.rowwise().sum();
    g.obs_var = VectorXd::Zero(th.m());
  }
  return g;
}

/// Stable rotational dynamics used for simulation defaults: 2 x 2 rotation
/// blocks with angles 0.1, 0.2, ... scaled by `radius`, and `radius` on a
/// trailing odd dimension.
inline MatrixXd rotational_dynamics(Index n, double radius) {
  MatrixXd A = MatrixXd::Zero(n, n);
  Index i = 0;
  for (int k = 1; i + 1 < n; i += 2, ++k) {
    const double w = 0.1 * k;
    A(i, i) = A(i + 1, i + 1) = radius * std::cos(w);
    A(i, i + 1) = -radius * std::sin(w);
    A(i + 1, i) = radius * std::sin(w);
  }
  if (i < n) A(i, i) = radius;
  return A;
}

/// Default simulation parameters for a family. LDS: A rotational with
/// radius 0.97, Q = 0.1 I, C ~ N(0, 1), unit observation noise. PLDS: same
/// dynamics, C ~ N(0, 0.3^2), d = log 2. NONLIN1D ignores n, m and seed.
inline GenerativeParams default_params(Family family, Index n, Index m, std::uint64_t seed) {
  if (family == Family::nonlin1d) return GenerativeParams::nonlin1d_default();
  if (n < 1 || m < 1) throw InvalidParams("n and m must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  GenerativeParams p;
  p.family = family;
  p.A = rotational_dynamics(n, 0.97);
  p.Q = 0.1 * MatrixXd::Identity(n, n);
  p.z1_mean = VectorXd::Zero(n);
  p.z1_cov = MatrixXd::Identity(n, n);
  const double c_scale = family == Family::lds ? 1.0 : 0.3;
  p.C.resize(m, n);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < m; ++i) p.C(i, j) = c_scale * normal(rng);
  if (family == Family::lds) {
    p.obs_var = VectorXd::Ones(m);
  } else {
    p.d = VectorXd::Constant(m, std::log(2.0));
  }
  return p;
}

/// Starting point for learning theta from observations alone: slow isotropic
/// dynamics with unit stationary variance, small random loadings, and
/// offsets (PLDS) or noise variances (LDS) matched to the per-channel
/// data moments.
inline GenerativeParams initial_params_from_data(Family family, const Dataset& data, Index n,
                                                 std::uint64_t seed) {
  if (family == Family::nonlin1d) return GenerativeParams::nonlin1d_default();
  const Index m = data.m();
  if (n < 1 || m < 1 || data.T() < 1) throw InvalidParams("n, m and T must be positive");
  GenerativeParams p = default_params(family, n, m, seed);
  p.A = 0.9 * MatrixXd::Identity(n, n);
  p.Q = (1.0 - 0.81) * MatrixXd::Identity(n, n);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < m; ++i) p.C(i, j) = normal(rng);
  const VectorXd mean = data.x.colwise().mean().transpose();
  if (family == Family::plds) {
    p.d = (mean.array() + 1e-2).log().matrix();
  } else {
    for (Index k = 0; k < m; ++k) {
      const double v = (data.x.col(k).array() - mean[k]).square().mean();
      p.obs_var[k] = std::max(v, 1e-6);
    }
  }
  return p;
}

}  // namespace vilds
