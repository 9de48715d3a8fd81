#pragma once

// Dense feed-forward networks: rectified-linear hidden layers, affine output
// layer, exact reverse-mode gradients. Batched entry points take one sample
// per column.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "vilds/errors.hpp"
#include "vilds/params.hpp"

namespace vilds {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct NetLayout {
  std::vector<Index> sizes;  // input, hidden..., output

  NetLayout() = default;
  explicit NetLayout(std::vector<Index> s) : sizes(std::move(s)) { validate(); }

  void validate() const {
    if (sizes.size() < 2) throw InvalidParams("network layout needs at least two entries");
    for (Index s : sizes)
      if (s < 1) throw InvalidParams("network layer sizes must be positive");
  }
  Index input_dim() const { return sizes.front(); }
  Index output_dim() const { return sizes.back(); }
  std::size_t num_layers() const { return sizes.size() - 1; }

  /// input -> `depth - 1` hidden layers of `width` -> output. depth counts
  /// affine layers.
  static NetLayout uniform(Index input, Index width, std::size_t depth, Index output) {
    std::vector<Index> s{input};
    for (std::size_t i = 1; i < depth; ++i) s.push_back(width);
    s.push_back(output);
    return NetLayout(std::move(s));
  }

  friend bool operator==(const NetLayout&, const NetLayout&) = default;
};

struct Mlp {
  std::vector<MatrixXd> W;  // out x in
  std::vector<VectorXd> b;

  NetLayout layout() const {
    std::vector<Index> s;
    if (W.empty()) return NetLayout{};
    s.push_back(W.front().cols());
    for (const auto& w : W) s.push_back(w.rows());
    return NetLayout(std::move(s));
  }
  Index input_dim() const { return W.front().cols(); }
  Index output_dim() const { return W.back().rows(); }

  template <class F>
  void for_each(F&& f) {
    for (std::size_t i = 0; i < W.size(); ++i) {
      f(W[i]);
      f(b[i]);
    }
  }
  template <class F>
  void for_each(F&& f) const {
    for (std::size_t i = 0; i < W.size(); ++i) {
      f(W[i]);
      f(b[i]);
    }
  }
};

/// He initialization: weights ~ N(0, 2 / fan_in), zero biases.
inline Mlp mlp_init(const NetLayout& layout, std::uint64_t seed) {
  layout.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Mlp net;
  for (std::size_t l = 0; l < layout.num_layers(); ++l) {
    const Index in = layout.sizes[l];
    const Index out = layout.sizes[l + 1];
    const double scale = std::sqrt(2.0 / static_cast<double>(in));
    MatrixXd w(out, in);
    for (Index j = 0; j < in; ++j)
      for (Index i = 0; i < out; ++i) w(i, j) = scale * normal(rng);
    net.W.push_back(std::move(w));
    net.b.push_back(VectorXd::Zero(out));
  }
  return net;
}

/// Layer inputs saved by the batched forward pass: acts[l] feeds layer l,
/// acts.back() is the network output.
struct MlpCache {
  std::vector<MatrixXd> acts;
};

inline MatrixXd mlp_forward(const Mlp& net, const MatrixXd& X, MlpCache* cache = nullptr) {
  detail::require_dim(X.rows() == net.input_dim(), "network input has wrong length");
  // Without a cache, run column blocks through all layers so the
  // intermediates stay resident; columns are independent.
  constexpr Index kBlock = 512;
  if (!cache && X.cols() > kBlock) {
    MatrixXd out(net.output_dim(), X.cols());
    for (Index c = 0; c < X.cols(); c += kBlock) {
      const Index w = std::min(kBlock, X.cols() - c);
      out.middleCols(c, w) = mlp_forward(net, X.middleCols(c, w));
    }
    return out;
  }
  MatrixXd h = X;
  if (cache) {
    cache->acts.clear();
    cache->acts.reserve(net.W.size() + 1);
  }
  for (std::size_t l = 0; l < net.W.size(); ++l) {
    if (cache) cache->acts.push_back(h);
    MatrixXd pre = net.W[l] * h;
    pre.colwise() += net.b[l];
    if (l + 1 < net.W.size()) pre = pre.cwiseMax(0.0);
    h = std::move(pre);
  }
  if (cache) cache->acts.push_back(h);
  return h;
}

/// Backward pass of mlp_forward. Adds the batch-summed parameter cotangent
/// into `grad` and returns the input cotangent. The rectifier's derivative at
/// exactly zero is taken as zero.
inline MatrixXd mlp_backward(const Mlp& net, const MlpCache& cache, const MatrixXd& Y_bar,
                             Mlp& grad) {
  detail::require_dim(Y_bar.rows() == net.output_dim(), "cotangent has wrong length");
  MatrixXd delta = Y_bar;
  for (std::size_t l = net.W.size(); l-- > 0;) {
    const MatrixXd& in = cache.acts[l];
    grad.W[l].noalias() += delta * in.transpose();
    grad.b[l] += delta.rowwise().sum();
    MatrixXd d_in = net.W[l].transpose() * delta;
    if (l > 0) d_in = d_in.cwiseProduct((in.array() > 0.0).cast<double>().matrix());
    delta = std::move(d_in);
  }
  return delta;
}

inline VectorXd mlp_apply(const Mlp& net, const VectorXd& input) {
  return mlp_forward(net, MatrixXd(input)).col(0);
}

/// Parameter and input cotangents of <cotangent, mlp_apply(net, input)>.
inline std::pair<Mlp, VectorXd> mlp_vjp(const Mlp& net, const VectorXd& input,
                                        const VectorXd& cotangent) {
  detail::require_dim(input.size() == net.input_dim(), "network input has wrong length");
  detail::require_dim(cotangent.size() == net.output_dim(), "cotangent has wrong length");
  MlpCache cache;
  mlp_forward(net, MatrixXd(input), &cache);
  Mlp grad = zeros_like(net);
  MatrixXd x_bar = mlp_backward(net, cache, MatrixXd(cotangent), grad);
  return {std::move(grad), x_bar.col(0)};
}

}  // namespace vilds
