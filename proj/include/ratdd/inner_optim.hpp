// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Optimizer updates written as graph ops, so an unrolled training run is one
// differentiable computation.

#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "ratdd/autodiff.hpp"
#include "ratdd/errors.hpp"
#include "ratdd/models.hpp"

namespace ratdd {

enum class InnerOptKind { sgd, adam };

struct InnerOptConfig {
  InnerOptKind kind = InnerOptKind::adam;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ContractError("inner optimizer: lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ContractError("inner optimizer: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ContractError("inner optimizer: eps must be > 0");
  }

  friend bool operator==(const InnerOptConfig&, const InnerOptConfig&) = default;
};

/// First/second moment estimates and step counter.
struct AdamState {
  std::vector<ad::Var> m, v;
  long t = 0;
};

inline AdamState init_adam_state(const ParamVector& params) {
  AdamState s;
  for (const auto& p : params.values) {
    s.m.emplace_back(Tensor(p.shape()));
    s.v.emplace_back(Tensor(p.shape()));
  }
  return s;
}

inline AdamState detach(const AdamState& s) {
  AdamState out;
  out.t = s.t;
  for (const auto& m : s.m) out.m.push_back(ad::detach(m));
  for (const auto& v : s.v) out.v.push_back(ad::detach(v));
  return out;
}

namespace detail {

inline void check_grads(const char* op, const ParamVector& params,
                        const std::vector<ad::Var>& grads) {
  if (grads.size() != params.size())
    throw DimensionError(std::string(op) + ": " +
                         std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (grads[i].shape() != params.values[i].shape())
      throw DimensionError(std::string(op) + ": gradient " +
                           shape_str(grads[i].shape()) + " for parameter " +
                           params.names[i] + " " +
                           shape_str(params.values[i].shape()));
}

}  // namespace detail

/// theta' = theta - lr * g
inline ParamVector sgd_step(const ParamVector& params,
                            const std::vector<ad::Var>& grads,
                            const InnerOptConfig& cfg) {
  detail::check_grads("sgd_step", params, grads);
  ParamVector out{params.names, {}};
  out.values.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    out.values.push_back(ad::sub(params.values[i], ad::scale(grads[i], cfg.lr)));
  return out;
}

/// Adam with bias correction.
inline std::pair<ParamVector, AdamState> adam_step(
    const ParamVector& params, const std::vector<ad::Var>& grads,
    const AdamState& state, const InnerOptConfig& cfg) {
  detail::check_grads("adam_step", params, grads);
  if (state.t < 0) throw ContractError("adam_step: negative step counter");
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw DimensionError("adam_step: optimizer state does not match parameters");
  AdamState next;
  next.t = state.t + 1;
  const double t = static_cast<double>(next.t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  ParamVector out{params.names, {}};
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ad::Var& g = grads[i];
    ad::Var m = ad::add(ad::scale(state.m[i], cfg.beta1),
                        ad::scale(g, 1.0 - cfg.beta1));
    ad::Var v = ad::add(ad::scale(state.v[i], cfg.beta2),
                        ad::scale(ad::square(g), 1.0 - cfg.beta2));
    ad::Var denom = ad::add_scalar(ad::sqrt(ad::scale(v, 1.0 / bc2)), cfg.eps);
    ad::Var update = ad::div(ad::scale(m, cfg.lr / bc1), denom);
    out.values.push_back(ad::sub(params.values[i], update));
    next.m.push_back(std::move(m));
    next.v.push_back(std::move(v));
  }
  return {std::move(out), std::move(next)};
}

/// Dispatches on cfg.kind. SGD leaves `state` untouched apart from the
/// step counter.
inline std::pair<ParamVector, AdamState> inner_step(
    const ParamVector& params, const std::vector<ad::Var>& grads,
    const AdamState& state, const InnerOptConfig& cfg) {
  if (cfg.kind == InnerOptKind::adam) return adam_step(params, grads, state, cfg);
  AdamState next = state;
  ++next.t;
  return {sgd_step(params, grads, cfg), std::move(next)};
}

}  // namespace ratdd
