// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Meta-gradient estimators for the distillation objective
//
//   min_U  L(theta_N(U), D),   theta_{n+1} = step(theta_n, grad l(u_n; theta_n))
//
// Every estimator unrolls the inner training run for N steps but only tracks
// the graph inside a window [N - M, N):
//
//   bptt     N = T,            window [0, T)
//   tbptt    N = T,            window [T - M, T)
//   rbptt    N ~ U{1..T},      window [0, N)
//   ratbptt  N ~ U{M..T},      window [N - M, N)
//
// Steps before the window run on plain values; at the window start the
// parameters (and optimizer state) are cut from their history, so the
// gradient only carries the Hessian-vector products of the window steps.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "ratdd/autodiff.hpp"
#include "ratdd/distilled.hpp"
#include "ratdd/errors.hpp"
#include "ratdd/inner_optim.hpp"
#include "ratdd/models.hpp"
#include "ratdd/rng.hpp"

namespace ratdd {

enum class Estimator { bptt, tbptt, rbptt, ratbptt };
enum class ResamplePolicy { per_outer_step, per_outer_epoch };
enum class LossKind { soft_ce, mse };

inline const char* to_string(Estimator e) {
  switch (e) {
    case Estimator::bptt: return "bptt";
    case Estimator::tbptt: return "tbptt";
    case Estimator::rbptt: return "rbptt";
    case Estimator::ratbptt: return "ratbptt";
  }
  return "?";
}

struct UnrollConfig {
  std::size_t T = 30;  // total unroll steps
  std::size_t M = 10;  // window size; ignored (taken as the full run) by bptt/rbptt
  Estimator estimator = Estimator::ratbptt;
  InnerOptConfig inner_opt{};
  ResamplePolicy resample = ResamplePolicy::per_outer_step;
  std::size_t resample_every = 25;  // outer steps per window, per_outer_epoch
  bool reset_state_at_window = false;
  std::size_t inner_batch = 0;  // 0: all of U when |U| <= 500, else 500
  LossKind inner_loss = LossKind::soft_ce;
  LossKind outer_loss = LossKind::soft_ce;
  std::size_t n_inits = 1;  // theta_0 samples averaged per meta-gradient
  double divergence_bound = 1e6;

  void validate() const {
    if (T < 1) throw ContractError("unroll: T must be >= 1");
    if (M < 1 || M > T) throw ContractError("unroll: need 1 <= M <= T");
    if (n_inits < 1) throw ContractError("unroll: n_inits must be >= 1");
    if (resample == ResamplePolicy::per_outer_epoch && resample_every < 1)
      throw ContractError("unroll: resample_every must be >= 1");
    inner_opt.validate();
  }

  friend bool operator==(const UnrollConfig&, const UnrollConfig&) = default;
};

/// One unroll length and its tracked window [begin, N).
struct WindowSample {
  std::size_t N = 0;
  std::size_t begin = 0;
  std::size_t length() const { return N - begin; }
  friend bool operator==(const WindowSample&, const WindowSample&) = default;
};

inline WindowSample sample_window(const UnrollConfig& cfg, Rng& rng) {
  cfg.validate();
  switch (cfg.estimator) {
    case Estimator::bptt:
      return {cfg.T, 0};
    case Estimator::tbptt:
      return {cfg.T, cfg.T - cfg.M};
    case Estimator::rbptt: {
      std::uniform_int_distribution<std::size_t> d(1, cfg.T);
      return {d(rng), 0};
    }
    case Estimator::ratbptt: {
      std::uniform_int_distribution<std::size_t> d(cfg.M, cfg.T);
      const std::size_t n = d(rng);
      return {n, n - cfg.M};
    }
  }
  throw ContractError("sample_window: unknown estimator");
}

/// Outer gradient with respect to the distilled set plus diagnostics.
struct MetaGradient {
  Tensor input_grad;
  std::optional<Tensor> label_grad;
  double norm = 0.0;
  double outer_loss = 0.0;
  std::size_t N = 0;
  std::size_t window_begin = 0;
  std::size_t graph_nodes = 0;  // graph size behind the outer loss

  double compute_norm() const {
    double s = input_grad.squared_norm();
    if (label_grad) s += label_grad->squared_norm();
    return std::sqrt(s);
  }
};

/// A labelled batch of the target data.
struct TargetBatch {
  Tensor inputs;  // [b, input_shape...]
  Tensor labels;  // [b, classes], one-hot or soft
};

inline ad::Var task_loss(LossKind kind, const ad::Var& logits,
                         const ad::Var& labels) {
  return kind == LossKind::mse ? mse_loss(logits, labels)
                               : soft_cross_entropy(logits, labels);
}

/// Rows of U drawn for each inner step (sorted, without replacement).
inline std::vector<std::size_t> sample_inner_batch(const UnrollConfig& cfg,
                                                   std::size_t n, Rng& rng) {
  std::size_t b = cfg.inner_batch;
  if (b == 0) b = n <= 500 ? n : 500;
  b = std::min(b, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (b == n) return idx;
  for (std::size_t i = 0; i < b; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, n - 1);
    std::swap(idx[i], idx[d(rng)]);
  }
  idx.resize(b);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// State after an unroll: final parameters and the leaves that the window
/// depends on.
struct UnrollResult {
  ParamVector params;
  AdamState opt_state;
  ad::Var inputs_leaf;  // U inputs as tracked by the window
  ad::Var labels_leaf;  // U labels (requires grad only when learnable)
  std::vector<std::vector<std::size_t>> batches;  // rows used per step
};

/// Runs N inner steps from theta0 on U. Only steps in the window are recorded
/// in the graph; `batch_rng` drives the inner mini-batch draws.
inline UnrollResult unroll_inner(const ArchitectureSpec& spec,
                                 const ParamVector& theta0,
                                 const DistilledDataset& u,
                                 const UnrollConfig& cfg,
                                 const WindowSample& window, Rng& batch_rng) {
  if (window.begin > window.N)
    throw ContractError("unroll_inner: window begins after N");
  UnrollResult r;
  r.inputs_leaf = ad::Var(u.inputs, true);
  r.labels_leaf = ad::Var(u.soft_labels, u.labels_learnable);
  const ad::Var inputs_const(u.inputs);
  const ad::Var labels_const(u.soft_labels);

  ParamVector theta = detach(theta0);
  AdamState state = init_adam_state(theta);
  const bool record = ad::grad_enabled();  // false: plain forward unroll
  for (std::size_t n = 0; n < window.N; ++n) {
    auto rows = sample_inner_batch(cfg, u.size(), batch_rng);
    const bool tracked = record && n >= window.begin;
    if (n == window.begin) {
      theta = detach_leaves(theta);
      state = cfg.reset_state_at_window ? init_adam_state(theta) : detach(state);
    }
    if (tracked) {
      ad::Var x = ad::gather_rows(r.inputs_leaf, rows);
      ad::Var y = ad::gather_rows(r.labels_leaf, rows);
      ad::Var loss = task_loss(cfg.inner_loss, forward(spec, theta, x), y);
      auto g = ad::gradient(loss, theta.values, /*create_graph=*/true,
                            /*stop_at_targets=*/true);
      std::tie(theta, state) = inner_step(theta, g, state, cfg.inner_opt);
    } else {
      std::vector<ad::Var> g;
      {
        ad::EnableGradGuard local;
        ParamVector leaves = detach_leaves(theta);
        ad::Var x = ad::gather_rows(inputs_const, rows);
        ad::Var y = ad::gather_rows(labels_const, rows);
        ad::Var loss = task_loss(cfg.inner_loss, forward(spec, leaves, x), y);
        g = ad::gradient(loss, leaves.values, false, true);
      }
      ad::NoGradGuard no_grad;
      std::tie(theta, state) = inner_step(theta, g, state, cfg.inner_opt);
    }
    const auto [mag, finite] = theta.magnitude();
    if (!finite || mag > cfg.divergence_bound)
      throw DivergenceError("inner unroll diverged at step " +
                                std::to_string(n) + " (max |theta| = " +
                                std::to_string(mag) + ")",
                            static_cast<long>(n));
    r.batches.push_back(std::move(rows));
  }
  r.params = std::move(theta);
  r.opt_state = std::move(state);
  return r;
}

/// Meta-gradient for a fixed window and initialization.
inline MetaGradient meta_gradient_at(const DistilledDataset& u,
                                     const TargetBatch& target,
                                     const ArchitectureSpec& spec,
                                     const UnrollConfig& cfg,
                                     const WindowSample& window,
                                     const ParamVector& theta0, Rng& batch_rng) {
  if (target.inputs.rank() == 0 || target.inputs.dim(0) == 0)
    throw ContractError("meta_gradient: empty target batch");
  UnrollResult ur = unroll_inner(spec, theta0, u, cfg, window, batch_rng);
  ad::Var logits = forward(spec, ur.params, ad::Var(target.inputs));
  ad::Var loss = task_loss(cfg.outer_loss, logits, ad::Var(target.labels));

  MetaGradient mg;
  mg.N = window.N;
  mg.window_begin = window.begin;
  mg.outer_loss = loss.item();
  mg.graph_nodes = ad::graph_size(loss);
  std::vector<ad::Var> wrt{ur.inputs_leaf};
  if (u.labels_learnable) wrt.push_back(ur.labels_leaf);
  auto g = ad::gradient_values(loss, wrt);
  mg.input_grad = std::move(g[0]);
  if (u.labels_learnable) mg.label_grad = std::move(g[1]);
  mg.norm = mg.compute_norm();
  return mg;
}

/// Samples theta_0 (and the window unless one is given), unrolls, and
/// differentiates the outer loss. With cfg.n_inits > 1 the gradients of
/// several initializations sharing one window are averaged.
inline MetaGradient meta_gradient(const DistilledDataset& u,
                                  const TargetBatch& target,
                                  const ArchitectureSpec& spec,
                                  const UnrollConfig& cfg, Rng& rng,
                                  std::optional<WindowSample> fixed_window = {}) {
  cfg.validate();
  // The window has its own stream so that initializations do not depend on
  // whether (or how) a window was drawn.
  Rng window_rng(rng());
  const WindowSample window =
      fixed_window ? *fixed_window : sample_window(cfg, window_rng);
  if (window.N > cfg.T || window.begin > window.N)
    throw ContractError("meta_gradient: window outside [0, T]");
  MetaGradient total;
  for (std::size_t k = 0; k < cfg.n_inits; ++k) {
    const std::uint64_t init_seed = rng();
    Rng batch_rng(rng());
    ParamVector theta0 = init_params(spec, init_seed);
    MetaGradient mg =
        meta_gradient_at(u, target, spec, cfg, window, theta0, batch_rng);
    if (k == 0) {
      total = std::move(mg);
      continue;
    }
    for (std::size_t i = 0; i < total.input_grad.size(); ++i)
      total.input_grad[i] += mg.input_grad[i];
    if (total.label_grad)
      for (std::size_t i = 0; i < total.label_grad->size(); ++i)
        (*total.label_grad)[i] += (*mg.label_grad)[i];
    total.outer_loss += mg.outer_loss;
  }
  if (cfg.n_inits > 1) {
    const double inv = 1.0 / static_cast<double>(cfg.n_inits);
    for (double& v : total.input_grad.storage()) v *= inv;
    if (total.label_grad)
      for (double& v : total.label_grad->storage()) v *= inv;
    total.outer_loss *= inv;
    total.norm = total.compute_norm();
  }
  return total;
}

/// Summary of a stream of meta-gradient norms. `std` uses the population
/// convention (divide by n).
struct GradNormStats {
  double mean = 0.0;
  double std = 0.0;
  double max = 0.0;
  std::vector<double> series;

  double cv() const { return mean > 0.0 ? std / mean : 0.0; }
};

inline GradNormStats grad_norm_stats(const std::vector<double>& norms) {
  if (norms.empty()) throw ContractError("grad_norm_stats: empty stream");
  GradNormStats s;
  s.series = norms;
  const double n = static_cast<double>(norms.size());
  for (double v : norms) s.mean += v;
  s.mean /= n;
  double var = 0.0;
  for (double v : norms) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / n);
  s.max = *std::max_element(norms.begin(), norms.end());
  return s;
}

}  // namespace ratdd
