// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "ratdd/models.hpp"
#include "test_util.hpp"

namespace ad = ratdd::ad;
using namespace ratdd;
using ratdd::tu::fd_check;
using ratdd::tu::random_tensor;

namespace {

ArchitectureSpec mlp(std::size_t in, std::vector<std::size_t> hidden, std::size_t classes) {
  ArchitectureSpec s;
  s.kind = ModelKind::mlp;
  s.input_shape = {in};
  s.hidden = std::move(hidden);
  s.classes = classes;
  return s;
}

ArchitectureSpec convnet(bool norm) {
  ArchitectureSpec s;
  s.kind = ModelKind::convnet;
  s.input_shape = {4, 4, 2};
  s.hidden = {3};
  s.classes = 3;
  s.norm = norm ? Normalization::instance : Normalization::none;
  s.activation = Activation::tanh;
  return s;
}

}  // namespace

TEST(Models, ParamCountMatchesLayout) {
  EXPECT_EQ(param_count(mlp(2, {32}, 3)), 2 * 32 + 32 + 32 * 3 + 3);
  EXPECT_EQ(param_count(mlp(5, {4, 6}, 2)), 5 * 4 + 4 + 4 * 6 + 6 + 6 * 2 + 2);
  // conv: 9*2*3 + 3, norm scale/shift 3 + 3, head: (2*2*3)*3 + 3
  EXPECT_EQ(param_count(convnet(true)), 54 + 3 + 6 + 36 + 3);
  EXPECT_EQ(param_count(convnet(false)), 54 + 3 + 36 + 3);
  ArchitectureSpec lin;
  lin.kind = ModelKind::linear;
  lin.hidden = {};
  lin.input_shape = {2};
  lin.classes = 2;
  EXPECT_EQ(param_count(lin), 6u);
}

TEST(Models, InvalidSpecsRejected) {
  ArchitectureSpec s = mlp(2, {}, 3);
  EXPECT_THROW(s.validate(), ContractError);
  s = mlp(2, {4}, 1);
  EXPECT_THROW(s.validate(), ContractError);
  s = mlp(2, {4}, 3);
  s.norm = Normalization::instance;
  EXPECT_THROW(s.validate(), ContractError);
  ArchitectureSpec c = convnet(false);
  c.input_shape = {1, 4, 1};  // height 1 cannot be pooled
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(Models, InitIsDeterministicHeNormal) {
  ArchitectureSpec s = mlp(400, {400}, 3);
  ParamVector a = init_params(s, 5), b = init_params(s, 5), c = init_params(s, 6);
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_TRUE(bit_identical(a.values[i].value(), b.values[i].value()));
  EXPECT_FALSE(bit_identical(a.values[0].value(), c.values[0].value()));
  // fc0.weight ~ N(0, 2/400): sample variance within a few percent.
  const Tensor& w = a.values[0].value();
  double sq = 0.0;
  for (double v : w.data()) sq += v * v;
  EXPECT_NEAR(sq / static_cast<double>(w.size()), 2.0 / 400.0, 0.1 * 2.0 / 400.0);
  EXPECT_EQ(a.values[1].value().max_abs(), 0.0);  // bias
}

TEST(Models, ForwardShapes) {
  ArchitectureSpec s = mlp(3, {5}, 4);
  auto out = forward(s, init_params(s, 1), ad::Var(random_tensor({7, 3}, 2)));
  EXPECT_EQ(out.shape(), (Shape{7, 4}));
  ArchitectureSpec c = convnet(true);
  auto co = forward(c, init_params(c, 1), ad::Var(random_tensor({2, 4, 4, 2}, 3)));
  EXPECT_EQ(co.shape(), (Shape{2, 3}));
  EXPECT_THROW((void)forward(s, init_params(s, 1), ad::Var(random_tensor({7, 4}, 2))),
               DimensionError);
}

TEST(Models, ParameterGradientsMatchFiniteDifferences) {
  for (const auto& spec : {mlp(3, {4, 5}, 3), convnet(true), convnet(false)}) {
    ArchitectureSpec s = spec;
    if (s.kind == ModelKind::mlp) s.activation = Activation::tanh;
    ParamVector p = init_params(s, 11);
    Shape in{3};
    in.insert(in.end(), s.input_shape.begin(), s.input_shape.end());
    Tensor x = random_tensor(in, 12);
    Tensor y = random_tensor({3, s.classes}, 13, 0.0, 1.0);
    auto fn = [&](const std::vector<ad::Var>& v) {
      ParamVector q{p.names, v};
      return soft_cross_entropy(forward(s, q, ad::Var(x)), ad::Var(y));
    };
    EXPECT_LE(fd_check(fn, p.tensors()), 1e-6);
  }
}

TEST(Models, InputGradientsMatchFiniteDifferences) {
  ArchitectureSpec s = convnet(true);
  ParamVector p = init_params(s, 21);
  Tensor x = random_tensor({2, 4, 4, 2}, 22);
  Tensor y = random_tensor({2, 3}, 23, 0.0, 1.0);
  auto fn = [&](const std::vector<ad::Var>& v) {
    return soft_cross_entropy(forward(s, p, v[0]), v[1]);
  };
  EXPECT_LE(fd_check(fn, {x, y}), 1e-6);
}

TEST(Models, InstanceNormStandardizesChannels) {
  Tensor x = random_tensor({2, 6, 3}, 30, -2.0, 5.0);
  Tensor y = instance_norm(ad::Var(x), 1e-7).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < 6; ++i) m += y[(b * 6 + i) * 3 + c];
      m /= 6.0;
      for (std::size_t i = 0; i < 6; ++i) sq += std::pow(y[(b * 6 + i) * 3 + c] - m, 2);
      EXPECT_NEAR(m, 0.0, 1e-12);
      EXPECT_NEAR(sq / 6.0, 1.0, 1e-5);
    }
}

TEST(Models, SoftCrossEntropyValues) {
  // Uniform logits: loss = log(classes) * sum(labels) averaged over rows.
  Tensor logits(Shape{2, 4});
  Tensor labels = Tensor::matrix(2, 4, {1, 0, 0, 0, 0, 0.5, 0.5, 0});
  EXPECT_NEAR(soft_cross_entropy(ad::Var(logits), ad::Var(labels)).item(), std::log(4.0),
              1e-14);
  Tensor bad = labels;
  bad[1] = -0.1;
  EXPECT_THROW((void)soft_cross_entropy(ad::Var(logits), ad::Var(bad)), DomainError);
  EXPECT_THROW((void)soft_cross_entropy(ad::Var(logits), ad::Var(Tensor(Shape{2, 3}))),
               DimensionError);
}

TEST(Models, MseLoss) {
  Tensor a = Tensor::matrix(1, 2, {1.0, 3.0}), b = Tensor::matrix(1, 2, {0.0, 1.0});
  EXPECT_NEAR(mse_loss(ad::Var(a), ad::Var(b)).item(), (1.0 + 4.0) / 2.0, 1e-15);
}

TEST(Models, ArgmaxTiesPickLowestIndex) {
  Tensor m = Tensor::matrix(3, 3, {1, 1, 0, 0, 2, 2, 5, 1, 5});
  EXPECT_EQ(argmax_rows(m), (std::vector<int>{0, 1, 0}));
  EXPECT_DOUBLE_EQ(accuracy(m, {0, 2, 0}), 2.0 / 3.0);
  Tensor oh = one_hot({2, 0}, 3);
  EXPECT_EQ(oh.storage(), (std::vector<double>{0, 0, 1, 1, 0, 0}));
}
