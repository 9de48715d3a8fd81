#pragma once

// Generic operations over parameter containers. A container is any type with
// `for_each(f)` members (const and non-const) that call `f` on each Eigen
// matrix or vector it owns, in a fixed order.

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "vilds/errors.hpp"

namespace vilds {

template <class P>
std::vector<std::span<double>> param_spans(P& p) {
  std::vector<std::span<double>> out;
  p.for_each([&](auto& m) { out.emplace_back(m.data(), static_cast<std::size_t>(m.size())); });
  return out;
}

template <class P>
std::vector<std::span<const double>> param_spans(const P& p) {
  std::vector<std::span<const double>> out;
  p.for_each([&](const auto& m) {
    out.emplace_back(m.data(), static_cast<std::size_t>(m.size()));
  });
  return out;
}

template <class P>
std::size_t param_count(const P& p) {
  std::size_t n = 0;
  for (auto s : param_spans(p)) n += s.size();
  return n;
}

namespace detail {
template <class A, class B>
void require_same_shape(const std::vector<A>& a, const std::vector<B>& b) {
  if (a.size() != b.size()) throw ShapeMismatch("parameter containers differ in block count");
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].size() != b[i].size()) throw ShapeMismatch("parameter blocks differ in size");
}
}  // namespace detail

/// Copy of `p` with every entry set to zero.
template <class P>
P zeros_like(const P& p) {
  P z = p;
  z.for_each([](auto& m) { m.setZero(); });
  return z;
}

/// dst + scale * src, elementwise.
template <class P>
P params_axpy(const P& dst, double scale, const P& src) {
  P out = dst;
  auto o = param_spans(out);
  auto s = param_spans(src);
  detail::require_same_shape(o, s);
  for (std::size_t i = 0; i < o.size(); ++i)
    for (std::size_t k = 0; k < o[i].size(); ++k) o[i][k] += scale * s[i][k];
  return out;
}

template <class P>
Eigen::VectorXd flatten(const P& p) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(param_count(p)));
  Eigen::Index k = 0;
  for (auto s : param_spans(p))
    for (double x : s) v[k++] = x;
  return v;
}

/// Overwrites the entries of `p` from a flat vector produced by flatten().
template <class P>
void unflatten_into(P& p, const Eigen::VectorXd& v) {
  if (static_cast<std::size_t>(v.size()) != param_count(p))
    throw ShapeMismatch("flat vector length differs from parameter count");
  Eigen::Index k = 0;
  for (auto s : param_spans(p))
    for (double& x : s) x = v[k++];
}

template <class P>
P unflatten(const P& like, const Eigen::VectorXd& v) {
  P out = like;
  unflatten_into(out, v);
  return out;
}

}  // namespace vilds
