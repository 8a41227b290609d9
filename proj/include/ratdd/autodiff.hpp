// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode automatic differentiation over a dynamically built graph.
//
// Every backward rule is written in terms of the same differentiable ops, so
// the gradient of a gradient is available by passing `create_graph = true`.
// Hessian-vector products needed to differentiate through optimizer updates
// fall out of this without ever forming a Hessian.
//
// Graphs are confined to the thread that built them. The grad-mode and
// validation switches are thread-local.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ratdd/errors.hpp"
#include "ratdd/tensor.hpp"

namespace ratdd::ad {

namespace detail {

struct ThreadState {
  bool grad_enabled = true;
  bool validate = false;
  long live_nodes = 0;
};

inline ThreadState& thread_state() {
  thread_local ThreadState state;
  return state;
}

}  // namespace detail

inline bool grad_enabled() { return detail::thread_state().grad_enabled; }
inline bool validation_enabled() { return detail::thread_state().validate; }

/// Number of graph nodes alive on this thread.
inline long live_node_count() { return detail::thread_state().live_nodes; }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::thread_state().grad_enabled) {
    detail::thread_state().grad_enabled = false;
  }
  ~NoGradGuard() { detail::thread_state().grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Re-enables recording inside a NoGradGuard scope (local gradients of a
/// step that is itself not differentiated through).
class EnableGradGuard {
 public:
  EnableGradGuard() : prev_(detail::thread_state().grad_enabled) {
    detail::thread_state().grad_enabled = true;
  }
  ~EnableGradGuard() { detail::thread_state().grad_enabled = prev_; }
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool prev_;
};

/// Enables debug validation (non-finite results, log/div domain checks).
class ValidationGuard {
 public:
  explicit ValidationGuard(bool on = true)
      : prev_(detail::thread_state().validate) {
    detail::thread_state().validate = on;
  }
  ~ValidationGuard() { detail::thread_state().validate = prev_; }
  ValidationGuard(const ValidationGuard&) = delete;
  ValidationGuard& operator=(const ValidationGuard&) = delete;

 private:
  bool prev_;
};

struct Node;
class Var;

using NeedsMask = std::vector<bool>;

/// Backward rule: given dL/d(out), return dL/d(input_i) for each input whose
/// `needs` flag is set (others may be left undefined).
using BackwardFn = std::function<std::vector<Var>(
    const Var& grad_out, const Var& out, const std::vector<Var>& inputs,
    const NeedsMask& needs)>;

/// Handle to a graph value. Copies share the node.
class Var {
 public:
  Var() = default;

  /// Leaf holding `value`.
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
  bool is_leaf() const;
  const std::string& op() const;

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  friend struct Node;
  friend Var make_op(Tensor, const char*, std::vector<Var>, BackwardFn);
  friend std::vector<Var> gradient(const Var&, const std::vector<Var>&, bool,
                                   bool);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  std::shared_ptr<Node> node_;
};

struct Node : std::enable_shared_from_this<Node> {
  Tensor value;
  std::string op;
  std::vector<Var> parents;
  BackwardFn backward;
  bool requires_grad = false;
  bool freed = false;

  Node(Tensor v, std::string op_name, bool rg)
      : value(std::move(v)), op(std::move(op_name)), requires_grad(rg) {
    ++detail::thread_state().live_nodes;
  }

  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Long unrolled chains would overflow the stack under recursive
  // shared_ptr teardown; release ancestors iteratively instead.
  ~Node() {
    --detail::thread_state().live_nodes;
    std::vector<std::shared_ptr<Node>> pending;
    for (auto& p : parents) pending.push_back(std::move(p.node_));
    parents.clear();
    while (!pending.empty()) {
      std::shared_ptr<Node> n = std::move(pending.back());
      pending.pop_back();
      if (n && n.use_count() == 1) {
        for (auto& p : n->parents) pending.push_back(std::move(p.node_));
        n->parents.clear();
      }
    }
  }
};

inline Var::Var(Tensor value, bool requires_grad)
    : node_(std::make_shared<Node>(std::move(value), "leaf", requires_grad)) {}

inline const Tensor& Var::value() const {
  if (!node_) throw ContractError("Var: access to undefined value");
  return node_->value;
}
inline bool Var::requires_grad() const {
  return node_ && node_->requires_grad;
}
inline bool Var::is_leaf() const { return node_ && node_->parents.empty(); }
inline const std::string& Var::op() const {
  if (!node_) throw ContractError("Var: access to undefined value");
  return node_->op;
}

/// Value-level constant: same numbers, no history, never requires grad.
inline Var detach(const Var& x) { return Var(x.value(), false); }

/// Fresh leaf carrying the values of `x` and requiring grad.
inline Var detach_leaf(const Var& x) { return Var(x.value(), true); }

inline Var make_op(Tensor value, const char* op, std::vector<Var> inputs,
                   BackwardFn backward) {
  if (validation_enabled() && !value.all_finite())
    throw DomainError(std::string(op) + ": produced non-finite values");
  bool rg = false;
  if (grad_enabled())
    for (const auto& in : inputs) rg = rg || in.requires_grad();
  if (!rg) return Var(std::move(value), false);
  auto node = std::make_shared<Node>(std::move(value), op, true);
  node->parents = std::move(inputs);
  node->backward = std::move(backward);
  return Var(std::move(node));
}

// ---------------------------------------------------------------------------
// Shape helpers

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

/// Result shape of an elementwise binary op under leading-axis broadcast.
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                       shape_str(b) + " do not broadcast");
}

inline void require_rank(const char* op, const Var& x, std::size_t rank) {
  if (x.shape().size() != rank)
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_str(x.shape()));
}

inline void require_axis(const char* op, const Var& x, std::size_t axis) {
  if (axis >= x.shape().size())
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(x.shape()));
}

/// (outer, axis length, inner) factorization around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, const Shape& out_shape,
                  F f) {
  Tensor out(out_shape);
  auto da = a.data();
  auto db = b.data();
  auto dst = out.data();
  const std::size_t na = da.size(), nb = db.size();
  if (na == dst.size() && nb == dst.size()) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = f(da[i], db[i]);
  } else {
    for (std::size_t i = 0; i < dst.size(); ++i)
      dst[i] = f(da[i % na], db[i % nb]);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Broadcast/reduction pair used by the binary ops' backward rules.

Var sum_to(const Var& x, const Shape& shape);

/// Tiles `x` over leading axes so that its shape becomes `shape`.
inline Var broadcast_to(const Var& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (!detail::is_suffix(x.shape(), shape))
    throw DimensionError("broadcast_to: " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
  Tensor out(shape);
  const auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[i % src.size()];
  Shape from = x.shape();
  return make_op(std::move(out), "broadcast_to", {x},
                 [from](const Var& g, const Var&, const std::vector<Var>&,
                        const NeedsMask&) {
                   return std::vector<Var>{sum_to(g, from)};
                 });
}

/// Sums leading-axis tiles of `x` down to the suffix shape `shape`.
inline Var sum_to(const Var& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (!detail::is_suffix(shape, x.shape()))
    throw DimensionError("sum_to: " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
  Tensor out(shape);
  const auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i % dst.size()] += src[i];
  Shape from = x.shape();
  return make_op(std::move(out), "sum_to", {x},
                 [from](const Var& g, const Var&, const std::vector<Var>&,
                        const NeedsMask&) {
                   return std::vector<Var>{broadcast_to(g, from)};
                 });
}

// ---------------------------------------------------------------------------
// Elementwise ops

Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& x);

inline Var add(const Var& a, const Var& b) {
  Shape s = detail::broadcast_shape("add", a.shape(), b.shape());
  Tensor out = detail::map_binary(a.value(), b.value(), s,
                                  [](double x, double y) { return x + y; });
  return make_op(std::move(out), "add", {a, b},
                 [](const Var& g, const Var&, const std::vector<Var>& in,
                    const NeedsMask& needs) {
                   std::vector<Var> r(2);
                   if (needs[0]) r[0] = sum_to(g, in[0].shape());
                   if (needs[1]) r[1] = sum_to(g, in[1].shape());
                   return r;
                 });
}

inline Var sub(const Var& a, const Var& b) {
  Shape s = detail::broadcast_shape("sub", a.shape(), b.shape());
  Tensor out = detail::map_binary(a.value(), b.value(), s,
                                  [](double x, double y) { return x - y; });
  return make_op(std::move(out), "sub", {a, b},
                 [](const Var& g, const Var&, const std::vector<Var>& in,
                    const NeedsMask& needs) {
                   std::vector<Var> r(2);
                   if (needs[0]) r[0] = sum_to(g, in[0].shape());
                   if (needs[1]) r[1] = sum_to(neg(g), in[1].shape());
                   return r;
                 });
}

inline Var mul(const Var& a, const Var& b) {
  Shape s = detail::broadcast_shape("mul", a.shape(), b.shape());
  Tensor out = detail::map_binary(a.value(), b.value(), s,
                                  [](double x, double y) { return x * y; });
  return make_op(std::move(out), "mul", {a, b},
                 [](const Var& g, const Var&, const std::vector<Var>& in,
                    const NeedsMask& needs) {
                   std::vector<Var> r(2);
                   if (needs[0]) r[0] = sum_to(mul(g, in[1]), in[0].shape());
                   if (needs[1]) r[1] = sum_to(mul(g, in[0]), in[1].shape());
                   return r;
                 });
}

inline Var div(const Var& a, const Var& b) {
  Shape s = detail::broadcast_shape("div", a.shape(), b.shape());
  if (validation_enabled())
    for (double v : b.value().data())
      if (v == 0.0) throw DomainError("div: division by zero");
  Tensor out = detail::map_binary(a.value(), b.value(), s,
                                  [](double x, double y) { return x / y; });
  return make_op(
      std::move(out), "div", {a, b},
      [](const Var& g, const Var& out, const std::vector<Var>& in,
         const NeedsMask& needs) {
        std::vector<Var> r(2);
        if (needs[0]) r[0] = sum_to(div(g, in[1]), in[0].shape());
        // d(a/b)/db = -(a/b)/b
        if (needs[1]) r[1] = sum_to(neg(div(mul(g, out), in[1])), in[1].shape());
        return r;
      });
}

/// c * x for a constant c.
inline Var scale(const Var& x, double c) {
  Tensor out = detail::map_unary(x.value(), [c](double v) { return c * v; });
  return make_op(std::move(out), "scale", {x},
                 [c](const Var& g, const Var&, const std::vector<Var>&,
                     const NeedsMask&) {
                   return std::vector<Var>{scale(g, c)};
                 });
}

inline Var neg(const Var& x) { return scale(x, -1.0); }

/// x + c for a constant c.
inline Var add_scalar(const Var& x, double c) {
  Tensor out = detail::map_unary(x.value(), [c](double v) { return v + c; });
  return make_op(std::move(out), "add_scalar", {x},
                 [](const Var& g, const Var&, const std::vector<Var>&,
                    const NeedsMask&) { return std::vector<Var>{g}; });
}

inline Var exp(const Var& x) {
  Tensor out = detail::map_unary(x.value(), [](double v) { return std::exp(v); });
  return make_op(std::move(out), "exp", {x},
                 [](const Var& g, const Var& out, const std::vector<Var>&,
                    const NeedsMask&) { return std::vector<Var>{mul(g, out)}; });
}

inline Var log(const Var& x) {
  if (validation_enabled())
    for (double v : x.value().data())
      if (!(v > 0.0)) throw DomainError("log: nonpositive argument");
  Tensor out = detail::map_unary(x.value(), [](double v) { return std::log(v); });
  return make_op(std::move(out), "log", {x},
                 [](const Var& g, const Var&, const std::vector<Var>& in,
                    const NeedsMask&) { return std::vector<Var>{div(g, in[0])}; });
}

inline Var tanh(const Var& x) {
  Tensor out =
      detail::map_unary(x.value(), [](double v) { return std::tanh(v); });
  return make_op(std::move(out), "tanh", {x},
                 [](const Var& g, const Var& out, const std::vector<Var>&,
                    const NeedsMask&) {
                   // 1 - tanh^2
                   Var d = add_scalar(neg(mul(out, out)), 1.0);
                   return std::vector<Var>{mul(g, d)};
                 });
}

inline Var relu(const Var& x) {
  Tensor out =
      detail::map_unary(x.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  return make_op(std::move(out), "relu", {x},
                 [](const Var& g, const Var&, const std::vector<Var>& in,
                    const NeedsMask&) {
                   Var mask(detail::map_unary(in[0].value(), [](double v) {
                     return v > 0.0 ? 1.0 : 0.0;
                   }));
                   return std::vector<Var>{mul(g, mask)};
                 });
}

/// 1/x with the convention 1/0 := 0. Used by the sqrt backward rule so that
/// d sqrt(v)/dv at v = 0 contributes nothing instead of inf * 0.
inline Var reciprocal_safe(const Var& x) {
  Tensor out = detail::map_unary(
      x.value(), [](double v) { return v == 0.0 ? 0.0 : 1.0 / v; });
  return make_op(std::move(out), "reciprocal_safe", {x},
                 [](const Var& g, const Var& out, const std::vector<Var>&,
                    const NeedsMask&) {
                   return std::vector<Var>{neg(mul(g, mul(out, out)))};
                 });
}

inline Var sqrt(const Var& x) {
  if (validation_enabled())
    for (double v : x.value().data())
      if (v < 0.0) throw DomainError("sqrt: negative argument");
  Tensor out =
      detail::map_unary(x.value(), [](double v) { return std::sqrt(v); });
  return make_op(std::move(out), "sqrt", {x},
                 [](const Var& g, const Var& out, const std::vector<Var>&,
                    const NeedsMask&) {
                   return std::vector<Var>{scale(mul(g, reciprocal_safe(out)), 0.5)};
                 });
}

/// x^p for a constant exponent p.
inline Var pow(const Var& x, double p) {
  Tensor out =
      detail::map_unary(x.value(), [p](double v) { return std::pow(v, p); });
  return make_op(std::move(out), "pow", {x},
                 [p](const Var& g, const Var&, const std::vector<Var>& in,
                     const NeedsMask&) {
                   if (p == 0.0) return std::vector<Var>{scale(g, 0.0)};
                   return std::vector<Var>{mul(g, scale(pow(in[0], p - 1.0), p))};
                 });
}

inline Var square(const Var& x) { return mul(x, x); }

// ---------------------------------------------------------------------------
// Linear algebra

Var transpose(const Var& x);

inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not conform");
  Tensor out(Shape{m, n});
  const auto da = a.value().data();
  const auto db = b.value().data();
  auto dc = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = da[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = db.data() + p * n;
      double* crow = dc.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  return make_op(std::move(out), "matmul", {a, b},
                 [](const Var& g, const Var&, const std::vector<Var>& in,
                    const NeedsMask& needs) {
                   std::vector<Var> r(2);
                   if (needs[0]) r[0] = matmul(g, transpose(in[1]));
                   if (needs[1]) r[1] = matmul(transpose(in[0]), g);
                   return r;
                 });
}

inline Var transpose(const Var& x) {
  detail::require_rank("transpose", x, 2);
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  Tensor out(Shape{c, r});
  const auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  return make_op(std::move(out), "transpose", {x},
                 [](const Var& g, const Var&, const std::vector<Var>&,
                    const NeedsMask&) { return std::vector<Var>{transpose(g)}; });
}

// ---------------------------------------------------------------------------
// Reductions

Var expand_axis(const Var& x, std::size_t axis, std::size_t n);

/// Sum over every element; returns a scalar.
inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  Shape from = x.shape();
  return make_op(Tensor::scalar(s), "sum", {x},
                 [from](const Var& g, const Var&, const std::vector<Var>&,
                        const NeedsMask&) {
                   return std::vector<Var>{broadcast_to(g, from)};
                 });
}

inline Var mean(const Var& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

/// Sum over `axis`, removing it.
inline Var sum_axis(const Var& x, std::size_t axis) {
  detail::require_axis("sum_axis", x, axis);
  const auto sp = detail::split_at(x.shape(), axis);
  Shape s = x.shape();
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(s);
  const auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        dst[o * sp.inner + i] += src[(o * sp.len + l) * sp.inner + i];
  const std::size_t len = sp.len;
  return make_op(std::move(out), "sum_axis", {x},
                 [axis, len](const Var& g, const Var&, const std::vector<Var>&,
                             const NeedsMask&) {
                   return std::vector<Var>{expand_axis(g, axis, len)};
                 });
}

inline Var mean_axis(const Var& x, std::size_t axis) {
  detail::require_axis("mean_axis", x, axis);
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.shape()[axis]));
}

/// Inserts a new axis of length n at `axis`, repeating values along it.
inline Var expand_axis(const Var& x, std::size_t axis, std::size_t n) {
  if (axis > x.shape().size())
    throw DimensionError("expand_axis: axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(x.shape()));
  Shape s = x.shape();
  s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), n);
  const auto sp = detail::split_at(s, axis);
  Tensor out(s);
  const auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        dst[(o * sp.len + l) * sp.inner + i] = src[o * sp.inner + i];
  return make_op(std::move(out), "expand_axis", {x},
                 [axis](const Var& g, const Var&, const std::vector<Var>&,
                        const NeedsMask&) {
                   return std::vector<Var>{sum_axis(g, axis)};
                 });
}

/// Max over `axis`, removing it. Ties route the gradient to the first index.
inline Var max_axis(const Var& x, std::size_t axis) {
  detail::require_axis("max_axis", x, axis);
  const auto sp = detail::split_at(x.shape(), axis);
  if (sp.len == 0) throw DimensionError("max_axis: empty axis");
  Shape s = x.shape();
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(s);
  Tensor mask(x.shape());
  const auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      for (std::size_t l = 1; l < sp.len; ++l)
        if (src[(o * sp.len + l) * sp.inner + i] >
            src[(o * sp.len + best) * sp.inner + i])
          best = l;
      dst[o * sp.inner + i] = src[(o * sp.len + best) * sp.inner + i];
      mask[(o * sp.len + best) * sp.inner + i] = 1.0;
    }
  const std::size_t len = sp.len;
  return make_op(std::move(out), "max_axis", {x},
                 [axis, len, mask = Var(std::move(mask))](
                     const Var& g, const Var&, const std::vector<Var>&,
                     const NeedsMask&) {
                   return std::vector<Var>{mul(expand_axis(g, axis, len), mask)};
                 });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(const Var& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
  Shape from = x.shape();
  return make_op(x.value().reshaped(std::move(shape)), "reshape", {x},
                 [from](const Var& g, const Var&, const std::vector<Var>&,
                        const NeedsMask&) {
                   return std::vector<Var>{reshape(g, from)};
                 });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t end);

/// Places `x` at rows [offset, offset + rows(x)) of a zero tensor with
/// `total` rows. Adjoint of slice_rows.
inline Var pad_rows(const Var& x, std::size_t offset, std::size_t total) {
  if (x.shape().empty() || offset + x.shape()[0] > total)
    throw DimensionError("pad_rows: " + shape_str(x.shape()) + " at offset " +
                         std::to_string(offset) + " into " +
                         std::to_string(total) + " rows");
  Shape s = x.shape();
  const std::size_t rows = s[0];
  s[0] = total;
  Tensor out(s);
  const std::size_t stride = x.value().row_stride();
  std::copy(x.value().data().begin(), x.value().data().end(),
            out.data().begin() + static_cast<std::ptrdiff_t>(offset * stride));
  return make_op(std::move(out), "pad_rows", {x},
                 [offset, rows](const Var& g, const Var&,
                                const std::vector<Var>&, const NeedsMask&) {
                   return std::vector<Var>{slice_rows(g, offset, offset + rows)};
                 });
}

/// Rows [begin, end) along axis 0.
inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  const std::size_t total = x.shape().empty() ? 0 : x.shape()[0];
  Tensor out = x.value().rows(begin, end);
  return make_op(std::move(out), "slice_rows", {x},
                 [begin, total](const Var& g, const Var&,
                                const std::vector<Var>&, const NeedsMask&) {
                   return std::vector<Var>{pad_rows(g, begin, total)};
                 });
}

Var gather_rows(const Var& x, const std::vector<std::size_t>& index);

/// out[index[i]] += x[i]; output has `total` rows. Adjoint of gather_rows.
inline Var scatter_add_rows(const Var& x, const std::vector<std::size_t>& index,
                            std::size_t total) {
  if (x.shape().empty() || x.shape()[0] != index.size())
    throw DimensionError("scatter_add_rows: " + shape_str(x.shape()) +
                         " with " + std::to_string(index.size()) + " indices");
  Shape s = x.shape();
  s[0] = total;
  Tensor out(s);
  const std::size_t stride = x.value().row_stride();
  const auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= total)
      throw DimensionError("scatter_add_rows: index out of range");
    for (std::size_t j = 0; j < stride; ++j)
      dst[index[i] * stride + j] += src[i * stride + j];
  }
  return make_op(std::move(out), "scatter_add_rows", {x},
                 [index](const Var& g, const Var&, const std::vector<Var>&,
                         const NeedsMask&) {
                   return std::vector<Var>{gather_rows(g, index)};
                 });
}

/// Selects rows `index` along axis 0 (duplicates allowed).
inline Var gather_rows(const Var& x, const std::vector<std::size_t>& index) {
  if (x.shape().empty())
    throw DimensionError("gather_rows: scalar input");
  const std::size_t total = x.shape()[0];
  Shape s = x.shape();
  s[0] = index.size();
  Tensor out(s);
  const std::size_t stride = x.value().row_stride();
  const auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= total)
      throw DimensionError("gather_rows: index " + std::to_string(index[i]) +
                           " out of range for " + shape_str(x.shape()));
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(index[i] * stride),
                stride, dst.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return make_op(std::move(out), "gather_rows", {x},
                 [index, total](const Var& g, const Var&,
                                const std::vector<Var>&, const NeedsMask&) {
                   return std::vector<Var>{scatter_add_rows(g, index, total)};
                 });
}

/// Concatenates along axis 0; trailing shapes must agree.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape s = parts[0].shape();
  if (s.empty()) throw DimensionError("concat_rows: scalar input");
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    if (ps.size() != s.size() || !std::equal(ps.begin() + 1, ps.end(), s.begin() + 1))
      throw DimensionError("concat_rows: " + shape_str(ps) + " vs " +
                           shape_str(s));
    offsets.push_back(rows);
    rows += ps[0];
  }
  s[0] = rows;
  Tensor out(s);
  std::size_t pos = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(pos));
    pos += p.size();
  }
  return make_op(std::move(out), "concat_rows", parts,
                 [offsets](const Var& g, const Var&,
                           const std::vector<Var>& in, const NeedsMask& needs) {
                   std::vector<Var> r(in.size());
                   for (std::size_t i = 0; i < in.size(); ++i)
                     if (needs[i])
                       r[i] = slice_rows(g, offsets[i],
                                         offsets[i] + in[i].shape()[0]);
                   return r;
                 });
}

// ---------------------------------------------------------------------------
// Softmax family (composed, hence differentiable to any order)

/// log softmax over the last axis of a rank-2 tensor.
inline Var log_softmax(const Var& x) {
  detail::require_rank("log_softmax", x, 2);
  const std::size_t c = x.shape()[1];
  // Shift by the (constant) row max; exact for value and gradient.
  const std::size_t rows = x.shape()[0];
  Tensor row_max(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double m = x.value().at(r, 0);
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, x.value().at(r, j));
    row_max[r] = m;
  }
  Var shift = expand_axis(Var(std::move(row_max)), 1, c);
  Var z = sub(x, shift);
  Var lse = log(sum_axis(exp(z), 1));
  return sub(z, expand_axis(lse, 1, c));
}

inline Var softmax(const Var& x) { return exp(log_softmax(x)); }

// ---------------------------------------------------------------------------
// Image ops on channel-last tensors [B, H, W, C]

Var col2im3x3(const Var& cols, std::size_t b, std::size_t h, std::size_t w,
              std::size_t c);

/// 3x3 patches with zero padding 1 and stride 1: [B,H,W,C] -> [B*H*W, 9*C],
/// column index (ky*3 + kx)*C + channel.
inline Var im2col3x3(const Var& x) {
  detail::require_rank("im2col3x3", x, 4);
  const std::size_t b = x.shape()[0], h = x.shape()[1], w = x.shape()[2],
                    c = x.shape()[3];
  Tensor out(Shape{b * h * w, 9 * c});
  const auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const std::size_t row = (n * h + y) * w + xx;
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const long sy = static_cast<long>(y + ky) - 1;
            const long sx = static_cast<long>(xx + kx) - 1;
            if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) ||
                sx >= static_cast<long>(w))
              continue;
            const std::size_t s_off =
                ((n * h + static_cast<std::size_t>(sy)) * w +
                 static_cast<std::size_t>(sx)) * c;
            const std::size_t d_off = row * 9 * c + (ky * 3 + kx) * c;
            for (std::size_t ch = 0; ch < c; ++ch)
              dst[d_off + ch] = src[s_off + ch];
          }
      }
  return make_op(std::move(out), "im2col3x3", {x},
                 [b, h, w, c](const Var& g, const Var&, const std::vector<Var>&,
                              const NeedsMask&) {
                   return std::vector<Var>{col2im3x3(g, b, h, w, c)};
                 });
}

/// Adjoint of im2col3x3.
inline Var col2im3x3(const Var& cols, std::size_t b, std::size_t h,
                     std::size_t w, std::size_t c) {
  if (cols.shape() != Shape{b * h * w, 9 * c})
    throw DimensionError("col2im3x3: got " + shape_str(cols.shape()));
  Tensor out(Shape{b, h, w, c});
  const auto src = cols.value().data();
  auto dst = out.data();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const std::size_t row = (n * h + y) * w + xx;
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const long sy = static_cast<long>(y + ky) - 1;
            const long sx = static_cast<long>(xx + kx) - 1;
            if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) ||
                sx >= static_cast<long>(w))
              continue;
            const std::size_t d_off =
                ((n * h + static_cast<std::size_t>(sy)) * w +
                 static_cast<std::size_t>(sx)) * c;
            const std::size_t s_off = row * 9 * c + (ky * 3 + kx) * c;
            for (std::size_t ch = 0; ch < c; ++ch)
              dst[d_off + ch] += src[s_off + ch];
          }
      }
  return make_op(std::move(out), "col2im3x3", {cols},
                 [](const Var& g, const Var&, const std::vector<Var>&,
                    const NeedsMask&) {
                   return std::vector<Var>{im2col3x3(g)};
                 });
}

Var avg_pool2_adjoint(const Var& g, std::size_t h, std::size_t w);

/// 2x2 average pooling, stride 2: [B,H,W,C] -> [B,H/2,W/2,C] (floor).
inline Var avg_pool2(const Var& x) {
  detail::require_rank("avg_pool2", x, 4);
  const std::size_t b = x.shape()[0], h = x.shape()[1], w = x.shape()[2],
                    c = x.shape()[3];
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0)
    throw DimensionError("avg_pool2: spatial size too small in " +
                         shape_str(x.shape()));
  Tensor out(Shape{b, oh, ow, c});
  const auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t s_off =
                ((n * h + 2 * y + dy) * w + 2 * xx + dx) * c;
            const std::size_t d_off = ((n * oh + y) * ow + xx) * c;
            for (std::size_t ch = 0; ch < c; ++ch)
              dst[d_off + ch] += 0.25 * src[s_off + ch];
          }
  return make_op(std::move(out), "avg_pool2", {x},
                 [h, w](const Var& g, const Var&, const std::vector<Var>&,
                        const NeedsMask&) {
                   return std::vector<Var>{avg_pool2_adjoint(g, h, w)};
                 });
}

/// Adjoint of avg_pool2 back to spatial size (h, w).
inline Var avg_pool2_adjoint(const Var& g, std::size_t h, std::size_t w) {
  detail::require_rank("avg_pool2_adjoint", g, 4);
  const std::size_t b = g.shape()[0], oh = g.shape()[1], ow = g.shape()[2],
                    c = g.shape()[3];
  if (oh != h / 2 || ow != w / 2)
    throw DimensionError("avg_pool2_adjoint: " + shape_str(g.shape()));
  Tensor out(Shape{b, h, w, c});
  const auto src = g.value().data();
  auto dst = out.data();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t d_off =
                ((n * h + 2 * y + dy) * w + 2 * xx + dx) * c;
            const std::size_t s_off = ((n * oh + y) * ow + xx) * c;
            for (std::size_t ch = 0; ch < c; ++ch)
              dst[d_off + ch] = 0.25 * src[s_off + ch];
          }
  return make_op(std::move(out), "avg_pool2_adjoint", {g},
                 [](const Var& gg, const Var&, const std::vector<Var>&,
                    const NeedsMask&) { return std::vector<Var>{avg_pool2(gg)}; });
}

// ---------------------------------------------------------------------------
// Operators

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& x) { return scale(x, c); }
inline Var operator*(const Var& x, double c) { return scale(x, c); }

// ---------------------------------------------------------------------------
// Reverse sweep

/// d(output)/d(wrt[i]) for each i.
///
/// With `create_graph` the results are graph values that can be
/// differentiated again and the forward graph is kept. Without it the
/// results are constants and every interior node visited is released;
/// differentiating through a released node again is a ContractError.
/// Entries of `wrt` that `output` does not depend on get zeros.
///
/// With `stop_at_targets` the sweep does not look past a `wrt` node: targets
/// are treated as independent inputs, which is exact whenever no target is
/// an ancestor of another (e.g. the parameters of one training step) and
/// keeps the cost proportional to the graph above them.
inline std::vector<Var> gradient(const Var& output, const std::vector<Var>& wrt,
                                 bool create_graph = false,
                                 bool stop_at_targets = false) {
  if (!output.defined() || output.size() != 1)
    throw ContractError("gradient: output must be a scalar, got shape " +
                        (output.defined() ? shape_str(output.shape())
                                          : std::string("<undefined>")));

  std::vector<Var> result(wrt.size());
  auto zeros_for = [](const Var& w) { return Var(Tensor(w.shape())); };
  if (!output.requires_grad()) {
    if (output.node_->freed)
      throw ContractError("gradient: graph already freed by a previous "
                          "backward pass without create_graph");
    for (std::size_t i = 0; i < wrt.size(); ++i) result[i] = zeros_for(wrt[i]);
    return result;
  }

  std::unordered_map<const Node*, std::size_t> target_slot;
  for (std::size_t i = 0; i < wrt.size(); ++i)
    if (wrt[i].defined()) target_slot.emplace(wrt[i].node_.get(), i);

  // Iterative post-order DFS over nodes that require grad.
  std::vector<Node*> order;
  std::unordered_map<const Node*, bool> reaches;
  {
    struct Frame {
      Node* node;
      std::size_t next;
    };
    std::vector<Frame> stack;
    std::unordered_map<const Node*, bool> seen;
    stack.push_back({output.node_.get(), 0});
    seen[output.node_.get()] = true;
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.node->freed)
        throw ContractError("gradient: graph already freed by a previous "
                            "backward pass without create_graph");
      const bool stop = stop_at_targets && target_slot.count(f.node) > 0;
      if (!stop && f.next < f.node->parents.size()) {
        Node* p = f.node->parents[f.next++].node_.get();
        if (p->requires_grad && !seen[p]) {
          seen[p] = true;
          stack.push_back({p, 0});
        }
        continue;
      }
      bool r = target_slot.count(f.node) > 0;
      if (!stop)
        for (const auto& p : f.node->parents)
          if (p.node_->requires_grad && reaches[p.node_.get()]) r = true;
      reaches[f.node] = r;
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node*, Var> grads;
  {
    std::unique_ptr<NoGradGuard> no_grad;
    if (!create_graph) no_grad = std::make_unique<NoGradGuard>();

    grads[output.node_.get()] = Var(Tensor(output.shape(), 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (!reaches[n] || !n->backward) continue;
      if (stop_at_targets && target_slot.count(n)) continue;
      auto git = grads.find(n);
      if (git == grads.end()) continue;
      NeedsMask needs(n->parents.size());
      bool any = false;
      for (std::size_t i = 0; i < n->parents.size(); ++i) {
        const Node* p = n->parents[i].node_.get();
        needs[i] = p->requires_grad && reaches[p];
        any = any || needs[i];
      }
      if (!any) continue;
      // Keep `n` alive as an output handle while its rule runs.
      Var out(n->shared_from_this());
      std::vector<Var> pg = n->backward(git->second, out, n->parents, needs);
      for (std::size_t i = 0; i < n->parents.size(); ++i) {
        if (!needs[i] || !pg[i].defined()) continue;
        const Node* p = n->parents[i].node_.get();
        auto [slot, inserted] = grads.try_emplace(p, pg[i]);
        if (!inserted) slot->second = add(slot->second, pg[i]);
      }
      if (!create_graph && !target_slot.count(n)) grads.erase(n);
    }
  }

  for (std::size_t i = 0; i < wrt.size(); ++i) {
    if (!wrt[i].defined()) continue;
    auto it = grads.find(wrt[i].node_.get());
    result[i] = it == grads.end() ? zeros_for(wrt[i]) : it->second;
  }

  if (!create_graph) {
    for (Node* n : order) {
      if (n->parents.empty()) continue;
      n->backward = nullptr;
      n->parents.clear();
      n->freed = true;
    }
  }
  return result;
}

/// Gradient values only (no graph), one Tensor per `wrt` entry.
inline std::vector<Tensor> gradient_values(const Var& output,
                                           const std::vector<Var>& wrt) {
  std::vector<Var> g = gradient(output, wrt, false);
  std::vector<Tensor> out;
  out.reserve(g.size());
  for (auto& v : g) out.push_back(v.value());
  return out;
}

/// Number of distinct graph nodes reachable from `root` (including leaves).
inline std::size_t graph_size(const Var& root) {
  if (!root.defined()) return 0;
  std::vector<const Node*> stack{root.node().get()};
  std::unordered_map<const Node*, bool> seen{{root.node().get(), true}};
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    for (const auto& p : n->parents)
      if (!seen[p.node().get()]) {
        seen[p.node().get()] = true;
        stack.push_back(p.node().get());
      }
  }
  return seen.size();
}

}  // namespace ratdd::ad
