// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>

#include "ratdd/errors.hpp"
#include "ratdd/tensor.hpp"

namespace ratdd {

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every
/// coordinate of `point`. `f` must be deterministic.
inline Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f,
                                   const Tensor& point, double eps = 1e-5) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_gradient: eps must be > 0");
  Tensor grad(point.shape());
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double x = point[i];
    probe[i] = x + eps;
    const double up = f(probe);
    probe[i] = x - eps;
    const double down = f(probe);
    probe[i] = x;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

}  // namespace ratdd
