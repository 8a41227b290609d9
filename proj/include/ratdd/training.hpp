// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Plain (non-differentiated) network training, shared by evaluation and the
// hardness scores.

#pragma once

#include <functional>
#include <vector>

#include "ratdd/autodiff.hpp"
#include "ratdd/estimators.hpp"
#include "ratdd/inner_optim.hpp"
#include "ratdd/models.hpp"

namespace ratdd {

struct TrainConfig {
  InnerOptConfig opt{};
  std::size_t steps = 300;
  std::size_t batch = 0;  // 0: full batch
  LossKind loss = LossKind::soft_ce;
  double divergence_bound = 1e6;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Runs `cfg.steps` optimizer steps on (inputs, soft_labels). `on_step`, if
/// set, is called after each step with (step index, params).
inline ParamVector train_network(
    const ArchitectureSpec& spec, ParamVector params, const Tensor& inputs,
    const Tensor& soft_labels, const TrainConfig& cfg, Rng& batch_rng,
    const std::function<void(std::size_t, const ParamVector&)>& on_step = {}) {
  cfg.opt.validate();
  const std::size_t n = inputs.dim(0);
  AdamState state = init_adam_state(params);
  const ad::Var x_all(inputs), y_all(soft_labels);
  UnrollConfig sampler;
  sampler.inner_batch = cfg.batch == 0 ? n : cfg.batch;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    std::vector<ad::Var> g;
    {
      ad::EnableGradGuard local;
      ParamVector leaves = detach_leaves(params);
      ad::Var x = x_all, y = y_all;
      if (sampler.inner_batch < n) {
        auto rows = sample_inner_batch(sampler, n, batch_rng);
        x = ad::gather_rows(x_all, rows);
        y = ad::gather_rows(y_all, rows);
      }
      ad::Var loss = task_loss(cfg.loss, forward(spec, leaves, x), y);
      g = ad::gradient(loss, leaves.values, false, true);
    }
    {
      ad::NoGradGuard no_grad;
      std::tie(params, state) = inner_step(params, g, state, cfg.opt);
    }
    const auto [mag, finite] = params.magnitude();
    if (!finite || mag > cfg.divergence_bound)
      throw DivergenceError("training diverged at step " + std::to_string(s),
                            static_cast<long>(s));
    if (on_step) on_step(s, params);
  }
  return params;
}

/// Logits for `inputs`, evaluated in chunks without graph recording.
inline Tensor predict(const ArchitectureSpec& spec, const ParamVector& params,
                      const Tensor& inputs, std::size_t chunk = 4096) {
  ad::NoGradGuard no_grad;
  const std::size_t n = inputs.dim(0);
  if (n <= chunk) return forward(spec, params, ad::Var(inputs)).value();
  std::vector<double> out;
  out.reserve(n * spec.classes);
  for (std::size_t b = 0; b < n; b += chunk) {
    Tensor part =
        forward(spec, params, ad::Var(inputs.rows(b, std::min(n, b + chunk)))).value();
    out.insert(out.end(), part.storage().begin(), part.storage().end());
  }
  return Tensor(Shape{n, spec.classes}, std::move(out));
}

}  // namespace ratdd
