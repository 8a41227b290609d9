// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "ratdd/errors.hpp"
#include "ratdd/models.hpp"
#include "ratdd/rng.hpp"
#include "ratdd/tensor.hpp"

namespace ratdd {

/// The learnable synthetic training set.
///
/// `block_boundaries` are fenceposts: block b covers rows
/// [block_boundaries[b], block_boundaries[b+1]). A single block by default.
/// `block_lr_scale[b]` multiplies the outer learning rate of block b.
struct DistilledDataset {
  Tensor inputs;       // [n, input_shape...]
  Tensor soft_labels;  // [n, classes]
  bool labels_learnable = false;
  std::vector<std::size_t> block_boundaries;
  std::vector<double> block_lr_scale;

  std::size_t size() const { return inputs.rank() ? inputs.dim(0) : 0; }
  std::size_t classes() const {
    return soft_labels.rank() == 2 ? soft_labels.dim(1) : 0;
  }
  std::size_t num_blocks() const { return block_lr_scale.size(); }
  Shape input_shape() const {
    return Shape(inputs.shape().begin() + 1, inputs.shape().end());
  }

  std::size_t block_of(std::size_t row) const {
    for (std::size_t b = 0; b + 1 < block_boundaries.size(); ++b)
      if (row < block_boundaries[b + 1]) return b;
    throw ContractError("block_of: row out of range");
  }

  /// Argmax class of each soft label (lowest index on ties).
  std::vector<int> hard_labels() const { return argmax_rows(soft_labels); }

  void validate() const {
    const std::size_t n = size();
    if (inputs.rank() < 2)
      throw ContractError("distilled dataset: inputs need rank >= 2");
    if (soft_labels.rank() != 2 || soft_labels.dim(0) != n)
      throw ContractError("distilled dataset: labels " +
                          shape_str(soft_labels.shape()) +
                          " do not match inputs " + shape_str(inputs.shape()));
    if (block_boundaries.size() != block_lr_scale.size() + 1 ||
        block_boundaries.front() != 0 || block_boundaries.back() != n ||
        !std::is_sorted(block_boundaries.begin(), block_boundaries.end()))
      throw ContractError("distilled dataset: block boundaries do not partition [0, n)");
    for (double s : block_lr_scale)
      if (!(s >= 0.0 && s <= 1.0))
        throw ContractError("distilled dataset: block lr scale outside [0, 1]");
    if (labels_learnable)
      for (double y : soft_labels.data())
        if (y < 0.0) throw ContractError("distilled dataset: negative soft label");
  }

  friend bool operator==(const DistilledDataset&, const DistilledDataset&) =
      default;
};

/// Balanced class layout (point i belongs to class i / ipc), inputs i.i.d.
/// standard Gaussian rescaled to unit L2 norm, one-hot labels.
inline DistilledDataset init_distilled(const Shape& input_shape,
                                       std::size_t classes, std::size_t ipc,
                                       bool labels_learnable,
                                       std::uint64_t seed) {
  if (ipc == 0 || classes == 0)
    throw ContractError("init_distilled: ipc and classes must be >= 1");
  const std::size_t n = ipc * classes;
  const std::size_t d = shape_numel(input_shape);
  Shape s{n};
  s.insert(s.end(), input_shape.begin(), input_shape.end());
  DistilledDataset u;
  u.inputs = Tensor(s);
  u.soft_labels = Tensor(Shape{n, classes});
  Rng rng(derive_seed(seed, "init_distilled"));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto data = u.inputs.data();
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = normal(rng);
      data[i * d + j] = v;
      sq += v * v;
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t j = 0; j < d; ++j) data[i * d + j] *= inv;
    u.soft_labels.at(i, i / ipc) = 1.0;
  }
  u.labels_learnable = labels_learnable;
  u.block_boundaries = {0, n};
  u.block_lr_scale = {1.0};
  return u;
}

/// Appends the rows of `block` as a new block with lr scale 1.
inline DistilledDataset append_block(const DistilledDataset& base,
                                     const DistilledDataset& block) {
  if (base.size() == 0) return block;
  if (base.input_shape() != block.input_shape() ||
      base.classes() != block.classes())
    throw DimensionError("append_block: shape mismatch");
  DistilledDataset u = base;
  Shape s = base.inputs.shape();
  s[0] += block.size();
  std::vector<double> in = base.inputs.storage();
  in.insert(in.end(), block.inputs.storage().begin(), block.inputs.storage().end());
  std::vector<double> lab = base.soft_labels.storage();
  lab.insert(lab.end(), block.soft_labels.storage().begin(),
             block.soft_labels.storage().end());
  u.inputs = Tensor(s, std::move(in));
  u.soft_labels = Tensor(Shape{s[0], base.classes()}, std::move(lab));
  u.block_boundaries.push_back(s[0]);
  u.block_lr_scale.push_back(1.0);
  return u;
}

/// First `k` blocks of `u`.
inline DistilledDataset prefix_blocks(const DistilledDataset& u, std::size_t k) {
  if (k == 0 || k > u.num_blocks())
    throw ContractError("prefix_blocks: k must be in [1, " +
                        std::to_string(u.num_blocks()) + "]");
  const std::size_t rows = u.block_boundaries[k];
  DistilledDataset p;
  p.inputs = u.inputs.rows(0, rows);
  p.soft_labels = u.soft_labels.rows(0, rows);
  p.labels_learnable = u.labels_learnable;
  p.block_boundaries.assign(u.block_boundaries.begin(),
                            u.block_boundaries.begin() + static_cast<std::ptrdiff_t>(k) + 1);
  p.block_lr_scale.assign(u.block_lr_scale.begin(),
                          u.block_lr_scale.begin() + static_cast<std::ptrdiff_t>(k));
  return p;
}

/// Rows `index` of `u` as a single-block dataset.
inline DistilledDataset select_rows(const DistilledDataset& u,
                                    const std::vector<std::size_t>& index) {
  DistilledDataset p;
  Shape s = u.inputs.shape();
  s[0] = index.size();
  const std::size_t d = u.inputs.row_stride(), c = u.classes();
  std::vector<double> in, lab;
  for (auto i : index) {
    if (i >= u.size()) throw ContractError("select_rows: index out of range");
    in.insert(in.end(), u.inputs.storage().begin() + static_cast<std::ptrdiff_t>(i * d),
              u.inputs.storage().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    lab.insert(lab.end(), u.soft_labels.storage().begin() + static_cast<std::ptrdiff_t>(i * c),
               u.soft_labels.storage().begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
  }
  p.inputs = Tensor(s, std::move(in));
  p.soft_labels = Tensor(Shape{index.size(), c}, std::move(lab));
  p.labels_learnable = u.labels_learnable;
  p.block_boundaries = {0, index.size()};
  p.block_lr_scale = {1.0};
  return p;
}

}  // namespace ratdd
