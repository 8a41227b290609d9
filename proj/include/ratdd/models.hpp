// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable classifiers and the losses used by the inner and outer loops.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ratdd/autodiff.hpp"
#include "ratdd/errors.hpp"
#include "ratdd/rng.hpp"
#include "ratdd/tensor.hpp"

namespace ratdd {

enum class ModelKind { linear, mlp, convnet };
enum class Activation { relu, tanh };
enum class Normalization { none, instance };

/// Network architecture. `hidden` holds layer widths (mlp) or channel counts
/// (convnet, one conv block per entry). Image inputs are channel-last:
/// input_shape = {H, W, C}.
struct ArchitectureSpec {
  ModelKind kind = ModelKind::mlp;
  std::vector<std::size_t> hidden{32};
  Shape input_shape{2};
  std::size_t classes = 3;
  Normalization norm = Normalization::none;
  Activation activation = Activation::relu;
  double norm_eps = 1e-7;

  std::size_t input_size() const { return shape_numel(input_shape); }

  void validate() const {
    if (classes < 2) throw ContractError("architecture: classes must be >= 2");
    if (input_shape.empty() || input_size() == 0)
      throw ContractError("architecture: empty input shape");
    if (kind == ModelKind::linear) {
      if (!hidden.empty())
        throw ContractError("architecture: linear model takes no hidden layers");
    } else if (hidden.empty()) {
      throw ContractError("architecture: at least one hidden layer required");
    }
    for (auto h : hidden)
      if (h == 0) throw ContractError("architecture: zero-width layer");
    if (norm == Normalization::instance && kind != ModelKind::convnet)
      throw ContractError("architecture: instance norm requires convnet");
    if (kind == ModelKind::convnet) {
      if (input_shape.size() != 3)
        throw ContractError("architecture: convnet input must be {H, W, C}");
      std::size_t h = input_shape[0], w = input_shape[1];
      for (std::size_t i = 0; i < hidden.size(); ++i) {
        h /= 2;
        w /= 2;
        if (h == 0 || w == 0)
          throw ContractError("architecture: too many pooling blocks for input");
      }
    }
  }

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) =
      default;
};

/// Ordered named parameters. Values are graph handles so that an unrolled
/// trajectory of ParamVectors forms one differentiable graph.
struct ParamVector {
  std::vector<std::string> names;
  std::vector<ad::Var> values;

  std::size_t size() const { return values.size(); }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& v : values) n += v.size();
    return n;
  }
  std::vector<Tensor> tensors() const {
    std::vector<Tensor> t;
    t.reserve(values.size());
    for (const auto& v : values) t.push_back(v.value());
    return t;
  }
  /// Largest |entry| and whether every entry is finite.
  std::pair<double, bool> magnitude() const {
    double m = 0.0;
    for (const auto& v : values) {
      if (!v.value().all_finite()) return {m, false};
      m = std::max(m, v.value().max_abs());
    }
    return {m, true};
  }
};

inline ParamVector detach(const ParamVector& p) {
  ParamVector out{p.names, {}};
  for (const auto& v : p.values) out.values.push_back(ad::detach(v));
  return out;
}

/// Fresh leaves (requires_grad) carrying the same values.
inline ParamVector detach_leaves(const ParamVector& p) {
  ParamVector out{p.names, {}};
  for (const auto& v : p.values) out.values.push_back(ad::detach_leaf(v));
  return out;
}

namespace detail {

struct ParamLayout {
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::size_t> fan_in;  // 0 marks a bias-like tensor
  std::vector<double> fill;         // constant init for fan_in == 0
};

inline ParamLayout param_layout(const ArchitectureSpec& spec) {
  spec.validate();
  ParamLayout l;
  auto add = [&](std::string name, Shape s, std::size_t fan, double fill) {
    l.names.push_back(std::move(name));
    l.shapes.push_back(std::move(s));
    l.fan_in.push_back(fan);
    l.fill.push_back(fill);
  };
  if (spec.kind == ModelKind::convnet) {
    std::size_t c = spec.input_shape[2], h = spec.input_shape[0],
                w = spec.input_shape[1];
    for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
      const std::string p = "conv" + std::to_string(i);
      add(p + ".weight", {9 * c, spec.hidden[i]}, 9 * c, 0.0);
      add(p + ".bias", {spec.hidden[i]}, 0, 0.0);
      if (spec.norm == Normalization::instance) {
        add("norm" + std::to_string(i) + ".scale", {spec.hidden[i]}, 0, 1.0);
        add("norm" + std::to_string(i) + ".shift", {spec.hidden[i]}, 0, 0.0);
      }
      c = spec.hidden[i];
      h /= 2;
      w /= 2;
    }
    add("head.weight", {h * w * c, spec.classes}, h * w * c, 0.0);
    add("head.bias", {spec.classes}, 0, 0.0);
    return l;
  }
  std::size_t in = spec.input_size();
  for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
    const std::string p = "fc" + std::to_string(i);
    add(p + ".weight", {in, spec.hidden[i]}, in, 0.0);
    add(p + ".bias", {spec.hidden[i]}, 0, 0.0);
    in = spec.hidden[i];
  }
  add("head.weight", {in, spec.classes}, in, 0.0);
  add("head.bias", {spec.classes}, 0, 0.0);
  return l;
}

}  // namespace detail

inline std::size_t param_count(const ArchitectureSpec& spec) {
  const auto l = detail::param_layout(spec);
  std::size_t n = 0;
  for (const auto& s : l.shapes) n += shape_numel(s);
  return n;
}

/// He-normal weights N(0, 2/fan_in), zero biases, unit norm scales.
/// Deterministic in (spec, seed).
inline ParamVector init_params(const ArchitectureSpec& spec, std::uint64_t seed) {
  const auto l = detail::param_layout(spec);
  Rng rng(derive_seed(seed, "init_params"));
  std::normal_distribution<double> normal(0.0, 1.0);
  ParamVector p;
  for (std::size_t i = 0; i < l.names.size(); ++i) {
    Tensor t(l.shapes[i], l.fill[i]);
    if (l.fan_in[i] > 0) {
      const double sd = std::sqrt(2.0 / static_cast<double>(l.fan_in[i]));
      for (double& v : t.storage()) v = sd * normal(rng);
    }
    p.names.push_back(l.names[i]);
    p.values.emplace_back(std::move(t), false);
  }
  return p;
}

namespace detail {

inline ad::Var activate(const ArchitectureSpec& spec, const ad::Var& x) {
  return spec.activation == Activation::relu ? ad::relu(x) : ad::tanh(x);
}

}  // namespace detail

/// Instance normalization over the spatial axis of x = [B, S, C]: per
/// (sample, channel) zero mean and unit variance.
inline ad::Var instance_norm(const ad::Var& x, double eps) {
  ad::detail::require_rank("instance_norm", x, 3);
  const std::size_t s = x.shape()[1];
  ad::Var mu = ad::expand_axis(ad::mean_axis(x, 1), 1, s);
  ad::Var centered = ad::sub(x, mu);
  ad::Var var = ad::mean_axis(ad::square(centered), 1);
  ad::Var sd = ad::sqrt(ad::add_scalar(var, eps));
  return ad::div(centered, ad::expand_axis(sd, 1, s));
}

/// Logits [B, classes] for inputs [B, input_shape...].
inline ad::Var forward(const ArchitectureSpec& spec, const ParamVector& params,
                       const ad::Var& inputs) {
  const Shape& in = inputs.shape();
  if (in.size() != spec.input_shape.size() + 1 ||
      !std::equal(spec.input_shape.begin(), spec.input_shape.end(),
                  in.begin() + 1))
    throw DimensionError("forward: inputs " + shape_str(in) +
                         " do not match input shape " +
                         shape_str(spec.input_shape));
  const std::size_t batch = in[0];
  const auto& v = params.values;
  std::size_t k = 0;

  if (spec.kind == ModelKind::convnet) {
    std::size_t h = spec.input_shape[0], w = spec.input_shape[1],
                c = spec.input_shape[2];
    ad::Var x = inputs;
    for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
      const std::size_t co = spec.hidden[i];
      ad::Var y = ad::matmul(ad::im2col3x3(x), v[k++]);  // [B*H*W, co]
      y = ad::add(y, v[k++]);
      y = ad::reshape(y, {batch, h * w, co});
      if (spec.norm == Normalization::instance) {
        y = instance_norm(y, spec.norm_eps);
        y = ad::add(ad::mul(y, v[k]), v[k + 1]);
        k += 2;
      }
      y = detail::activate(spec, y);
      x = ad::avg_pool2(ad::reshape(y, {batch, h, w, co}));
      h /= 2;
      w /= 2;
      c = co;
    }
    ad::Var flat = ad::reshape(x, {batch, h * w * c});
    return ad::add(ad::matmul(flat, v[k]), v[k + 1]);
  }

  ad::Var x = ad::reshape(inputs, {batch, spec.input_size()});
  for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
    x = ad::add(ad::matmul(x, v[k]), v[k + 1]);
    k += 2;
    x = detail::activate(spec, x);
  }
  return ad::add(ad::matmul(x, v[k]), v[k + 1]);
}

/// Mean over the batch of -sum_c y_c log softmax(logits)_c. Label weights are
/// used as given (no normalization) and must be nonnegative.
inline ad::Var soft_cross_entropy(const ad::Var& logits, const ad::Var& labels) {
  if (logits.shape() != labels.shape() || logits.shape().size() != 2)
    throw DimensionError("soft_cross_entropy: logits " +
                         shape_str(logits.shape()) + " vs labels " +
                         shape_str(labels.shape()));
  for (double y : labels.value().data())
    if (y < 0.0) throw DomainError("soft_cross_entropy: negative label weight");
  const double inv_batch = 1.0 / static_cast<double>(logits.shape()[0]);
  return ad::scale(ad::sum(ad::mul(labels, ad::log_softmax(logits))),
                   -inv_batch);
}

/// Mean squared error over all entries.
inline ad::Var mse_loss(const ad::Var& logits, const ad::Var& targets) {
  if (logits.shape() != targets.shape())
    throw DimensionError("mse_loss: " + shape_str(logits.shape()) + " vs " +
                         shape_str(targets.shape()));
  return ad::mean(ad::square(ad::sub(logits, targets)));
}

/// Row argmax; ties go to the lowest index.
inline std::vector<int> argmax_rows(const Tensor& m) {
  if (m.rank() != 2) throw DimensionError("argmax_rows: need rank 2");
  std::vector<int> out(m.dim(0));
  for (std::size_t r = 0; r < m.dim(0); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < m.dim(1); ++c)
      if (m.at(r, c) > m.at(r, best)) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

/// Per-row correctness of argmax(logits) against `labels`.
inline std::vector<bool> correctness(const Tensor& logits,
                                     const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("accuracy: " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const auto pred = argmax_rows(logits);
  std::vector<bool> ok(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= logits.dim(1))
      throw DomainError("accuracy: label " + std::to_string(labels[i]) +
                        " out of range");
    ok[i] = pred[i] == labels[i];
  }
  return ok;
}

/// Fraction of rows whose argmax equals the label (lowest-index tie-break).
inline double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const auto ok = correctness(logits, labels);
  if (ok.empty()) return 0.0;
  std::size_t n = 0;
  for (bool b : ok) n += b;
  return static_cast<double>(n) / static_cast<double>(ok.size());
}

/// One-hot matrix [labels.size(), classes].
inline Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
  Tensor t(Shape{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw DomainError("one_hot: label out of range");
    t.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return t;
}

}  // namespace ratdd
