// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Boosted distillation: grow the distilled set one block at a time. Earlier
// blocks keep training with a reduced ("stale") learning rate beta * lr, so
// with beta = 0 every prefix of blocks is exactly a set distilled on its own.

#pragma once

#include <cstdint>
#include <vector>

#include "ratdd/distilled.hpp"
#include "ratdd/driver.hpp"
#include "ratdd/errors.hpp"

namespace ratdd {

struct BoostConfig {
  std::size_t block_size = 3;   // points per block, a multiple of the class count
  std::size_t blocks = 3;       // J
  double beta = 0.0;            // boosting strength
  std::size_t stage_steps = 300;
  bool continue_optimizer = false;  // carry outer-Adam moments across stages
  DistillationConfig base{};

  void validate(std::size_t classes) const {
    if (blocks < 1) throw ContractError("boost: need >= 1 block");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("boost: beta must lie in [0, 1]");
    if (block_size < classes || block_size % classes != 0)
      throw ContractError("boost: block size must be a positive multiple of the class count");
  }

  friend bool operator==(const BoostConfig&, const BoostConfig&) = default;
};

/// Per-block lr scales at stage j (1-based): [beta, ..., beta, 1].
inline std::vector<double> stage_lr_scales(std::size_t j, std::size_t J, double beta) {
  if (j < 1 || j > J) throw ContractError("stage_lr_scales: need 1 <= j <= J");
  std::vector<double> s(j, beta);
  s.back() = 1.0;
  return s;
}

struct BoostResult {
  DistilledDataset u;
  std::vector<History> stage_histories;
  std::vector<DistilledDataset> stage_snapshots;  // U at the end of each stage
};

/// Seed used by stage j; stage 1 uses the base seed so that a single-stage
/// boost is the plain run.
inline std::uint64_t boost_stage_seed(const BoostConfig& cfg, std::size_t j) {
  return j == 1 ? cfg.base.seed : derive_seed(cfg.base.seed, "boost/stage", j);
}

inline BoostResult boost_distill(const BoostConfig& cfg, const DatasetSplit& train,
                                 const DatasetSplit& test) {
  cfg.validate(train.classes);
  const std::size_t ipc = cfg.block_size / train.classes;
  BoostResult res;
  DistillState st;
  for (std::size_t j = 1; j <= cfg.blocks; ++j) {
    DistillationConfig stage = cfg.base;
    stage.seed = boost_stage_seed(cfg, j);
    stage.ipc = ipc;
    stage.outer_steps = cfg.stage_steps;
    DistilledDataset block = initial_distilled(stage, train);
    if (j == 1) {
      st = make_distill_state(std::move(block));
    } else {
      DistilledDataset grown = append_block(st.u, block);
      OuterAdamState opt = init_outer_adam(grown);
      if (cfg.continue_optimizer) {
        auto carry = [](Tensor& dst, const Tensor& src) {
          std::copy(src.storage().begin(), src.storage().end(), dst.storage().begin());
        };
        carry(opt.m_inputs, st.opt.m_inputs);
        carry(opt.v_inputs, st.opt.v_inputs);
        carry(opt.m_labels, st.opt.m_labels);
        carry(opt.v_labels, st.opt.v_labels);
        opt.t = st.opt.t;
      }
      st.u = std::move(grown);
      st.opt = std::move(opt);
      st.clip = {};
      st.sampler.reset();
    }
    st.u.block_lr_scale = stage_lr_scales(j, cfg.blocks, cfg.beta);
    try {
      res.stage_histories.push_back(run_from(st, stage, train, test));
    } catch (const DistillationAborted& e) {
      throw DistillationAborted("boost stage " + std::to_string(j) + ": " + e.what(),
                                e.step(), e.history());
    }
    res.stage_snapshots.push_back(st.u);
  }
  res.u = std::move(st.u);
  return res;
}

}  // namespace ratdd
