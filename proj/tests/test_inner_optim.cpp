// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "ratdd/inner_optim.hpp"
#include "test_util.hpp"

namespace ad = ratdd::ad;
using namespace ratdd;

namespace {

ParamVector single(double v) { return ParamVector{{"w"}, {ad::Var(Tensor::vector({v}), true)}}; }

}  // namespace

// One bias-corrected Adam step moves by lr * g / (|g| + eps).
TEST(InnerOptim, AdamFirstStepValue) {
  InnerOptConfig cfg;
  cfg.lr = 0.1;
  ParamVector p = single(1.0);
  const double g = 0.3;
  auto [next, st] = adam_step(p, {ad::Var(Tensor::vector({g}))}, init_adam_state(p), cfg);
  const double expect = 1.0 - 0.1 * g / (g + 1e-8);
  EXPECT_NEAR(next.values[0].value()[0], expect, 1e-15);
  EXPECT_EQ(st.t, 1);
  EXPECT_NEAR(st.m[0].value()[0], 0.1 * g, 1e-16);
  EXPECT_NEAR(st.v[0].value()[0], 0.001 * g * g, 1e-18);
}

// Second step, constant gradient: m_hat = g, v_hat = g^2 again.
TEST(InnerOptim, AdamSecondStepConstantGradient) {
  InnerOptConfig cfg;
  cfg.lr = 0.05;
  ParamVector p = single(0.0);
  AdamState s = init_adam_state(p);
  const ad::Var g(Tensor::vector({-2.0}));
  std::tie(p, s) = adam_step(p, {g}, s, cfg);
  std::tie(p, s) = adam_step(p, {g}, s, cfg);
  EXPECT_NEAR(p.values[0].value()[0], 2 * 0.05 * 2.0 / (2.0 + 1e-8), 1e-14);
}

TEST(InnerOptim, SgdStep) {
  InnerOptConfig cfg;
  cfg.kind = InnerOptKind::sgd;
  cfg.lr = 0.5;
  ParamVector p = single(1.0);
  auto [next, st] = inner_step(p, {ad::Var(Tensor::vector({4.0}))}, init_adam_state(p), cfg);
  EXPECT_DOUBLE_EQ(next.values[0].value()[0], -1.0);
}

TEST(InnerOptim, ConfigValidation) {
  InnerOptConfig cfg;
  cfg.lr = 0.0;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = {};
  cfg.beta1 = 1.0;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = {};
  cfg.eps = 0.0;
  EXPECT_THROW(cfg.validate(), ContractError);
}

TEST(InnerOptim, GradientCountMismatch) {
  ParamVector p = single(1.0);
  EXPECT_THROW((void)adam_step(p, {}, init_adam_state(p), InnerOptConfig{}), DimensionError);
}

// The Adam update is differentiable in its gradient input: d theta'/d g
// matches finite differences, including through the moment estimates.
TEST(InnerOptim, AdamStepDifferentiable) {
  InnerOptConfig cfg;
  cfg.lr = 0.2;
  const Tensor theta = tu::random_tensor({3}, 1), g1 = tu::random_tensor({3}, 2),
               g2 = tu::random_tensor({3}, 3);
  auto fn = [&](const std::vector<ad::Var>& v) {
    ParamVector p{{"w"}, {v[0]}};
    AdamState s = init_adam_state(p);
    std::tie(p, s) = adam_step(p, {ad::mul(v[1], v[0])}, s, cfg);
    std::tie(p, s) = adam_step(p, {ad::add(v[2], p.values[0])}, s, cfg);
    return p.values[0];
  };
  EXPECT_LE(tu::fd_check(fn, {theta, g1, g2}), 1e-6);
}
