// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Outer loop: sample a target batch, estimate the meta-gradient, clip it
// against a running norm average and take an Adam step on the distilled set.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ratdd/data.hpp"
#include "ratdd/distilled.hpp"
#include "ratdd/errors.hpp"
#include "ratdd/estimators.hpp"
#include "ratdd/evaluation.hpp"
#include "ratdd/hardness.hpp"
#include "ratdd/models.hpp"
#include "ratdd/rng.hpp"

namespace ratdd {

/// Hardness-weighted target sampling, switched on at `activation_step` and
/// re-scored every `refresh_every` outer steps.
struct HardnessSamplerConfig {
  bool enabled = false;
  double thr = 1.0;
  std::size_t activation_step = 0;
  std::size_t refresh_every = 50;
  std::size_t n_nets = 8;
  bool half_nets_center = false;  // center n_nets/2 instead of 4

  friend bool operator==(const HardnessSamplerConfig&,
                         const HardnessSamplerConfig&) = default;
};

struct DistillationConfig {
  ArchitectureSpec arch{};
  UnrollConfig unroll{};
  std::size_t ipc = 1;
  double outer_lr = 0.001;
  std::size_t outer_steps = 300;
  std::size_t target_batch = 512;
  std::size_t eval_every = 50;
  std::uint64_t seed = 0;
  bool learn_labels = false;
  double clip_factor = 2.0;
  double ema_decay = 0.9;
  bool flip_augment = false;
  EvalConfig eval{};
  HardnessSamplerConfig hardness{};

  void validate() const {
    arch.validate();
    unroll.validate();
    if (ipc < 1) throw ContractError("distill: ipc must be >= 1");
    if (!(outer_lr > 0.0)) throw ContractError("distill: outer_lr must be > 0");
    if (eval_every < 1) throw ContractError("distill: eval_every must be >= 1");
    if (target_batch < 1) throw ContractError("distill: target_batch must be >= 1");
    if (!(clip_factor > 0.0)) throw ContractError("distill: clip_factor must be > 0");
    if (!(ema_decay > 0.0 && ema_decay < 1.0))
      throw ContractError("distill: ema_decay must lie in (0, 1)");
    if (eval.n_seeds < 1) throw ContractError("distill: eval.n_seeds must be >= 1");
  }

  friend bool operator==(const DistillationConfig&, const DistillationConfig&) =
      default;
};

// ---------------------------------------------------------------------------
// EMA clipping

struct EmaClipState {
  double ema_norm = 0.0;
  bool initialized = false;
};

inline void rescale(MetaGradient& g, double factor) {
  for (double& v : g.input_grad.storage()) v *= factor;
  if (g.label_grad)
    for (double& v : g.label_grad->storage()) v *= factor;
  g.norm = g.compute_norm();
}

/// First call seeds the average with |g|. Afterwards a gradient above
/// c * ema is rescaled to norm c * ema, and the average absorbs the clipped
/// norm: ema' = rho * ema + (1 - rho) * min(|g|, c * ema).
inline std::pair<MetaGradient, EmaClipState> ema_clip(MetaGradient g,
                                                      EmaClipState state,
                                                      double c, double rho) {
  if (!(c > 0.0) || !(rho > 0.0 && rho < 1.0))
    throw ContractError("ema_clip: need c > 0 and 0 < rho < 1");
  const double norm = g.compute_norm();
  if (!state.initialized) {
    // A zero first gradient carries no scale information; wait for one that does.
    if (norm > 0.0) state = {norm, true};
    return {std::move(g), state};
  }
  const double cap = c * state.ema_norm;
  if (norm > cap) rescale(g, cap / norm);
  state.ema_norm = rho * state.ema_norm + (1.0 - rho) * std::min(norm, cap);
  return {std::move(g), state};
}

// ---------------------------------------------------------------------------
// Outer Adam

struct OuterAdamState {
  Tensor m_inputs, v_inputs, m_labels, v_labels;
  long t = 0;
};

inline OuterAdamState init_outer_adam(const DistilledDataset& u) {
  return {Tensor(u.inputs.shape()), Tensor(u.inputs.shape()),
          Tensor(u.soft_labels.shape()), Tensor(u.soft_labels.shape()), 0};
}

namespace detail {

/// Adam on the rows of `x`; row r moves with lr * scale[block(r)]. Rows in
/// blocks with scale 0 are never written.
inline void outer_adam_rows(Tensor& x, const Tensor& g, Tensor& m, Tensor& v,
                            long t, double lr, const DistilledDataset& u) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  const std::size_t stride = x.row_stride();
  for (std::size_t b = 0; b < u.num_blocks(); ++b) {
    const double scale = u.block_lr_scale[b];
    for (std::size_t r = u.block_boundaries[b]; r < u.block_boundaries[b + 1]; ++r)
      for (std::size_t j = r * stride; j < (r + 1) * stride; ++j) {
        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
        if (scale == 0.0) continue;
        const double step = lr * scale * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
        x[j] -= step;
      }
  }
}

}  // namespace detail

/// One outer Adam step with per-block learning-rate scaling. Soft labels
/// are kept nonnegative.
inline void outer_adam_step(DistilledDataset& u, const MetaGradient& g,
                            OuterAdamState& s, double lr) {
  ++s.t;
  detail::outer_adam_rows(u.inputs, g.input_grad, s.m_inputs, s.v_inputs, s.t, lr, u);
  if (u.labels_learnable && g.label_grad) {
    detail::outer_adam_rows(u.soft_labels, *g.label_grad, s.m_labels, s.v_labels,
                            s.t, lr, u);
    for (double& y : u.soft_labels.storage()) y = std::max(y, 0.0);
  }
}

// ---------------------------------------------------------------------------
// Steps and runs

struct StepMetrics {
  std::size_t step = 0;
  double outer_loss = 0.0;
  double grad_norm = 0.0;     // before clipping
  double clipped_norm = 0.0;  // after clipping
  std::size_t N = 0;
  std::size_t window_begin = 0;
  std::size_t graph_nodes = 0;
  bool hardness_sampling = false;
  std::optional<double> eval_acc;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"step", step}, {"outer_loss", outer_loss},
                        {"grad_norm", grad_norm}, {"N", N}};
    if (eval_acc) j["eval_acc"] = *eval_acc;
    return j;
  }
};

struct History {
  std::vector<StepMetrics> steps;
  std::vector<std::pair<std::size_t, double>> evals;  // (step, accuracy)

  std::string jsonl() const {
    std::string out;
    for (const auto& s : steps) out += s.to_json().dump() + "\n";
    return out;
  }
};

/// Raised when a run aborts; carries the history up to the failure.
class DistillationAborted : public Error {
 public:
  DistillationAborted(const std::string& what, std::size_t step, History h)
      : Error(what), step_(step), history_(std::move(h)) {}
  std::size_t step() const noexcept { return step_; }
  const History& history() const noexcept { return history_; }

 private:
  std::size_t step_;
  History history_;
};

/// Everything the outer loop threads from step to step.
struct DistillState {
  DistilledDataset u;
  EmaClipState clip;
  OuterAdamState opt;
  std::optional<SamplerWeights> sampler;
};

inline DistillState make_distill_state(DistilledDataset u) {
  OuterAdamState opt = init_outer_adam(u);
  return {std::move(u), {}, std::move(opt), std::nullopt};
}

/// Target batch of the real data: uniform without replacement, or
/// proportional to hardness-sampler weights.
inline TargetBatch sample_target(const DatasetSplit& train, std::size_t size,
                                 const SamplerWeights* weights, bool flip,
                                 Rng& rng) {
  const std::size_t b = std::min(size, train.size());
  std::vector<std::size_t> idx;
  if (weights) {
    idx = weighted_batch(weights->weights, b, rng);
  } else {
    UnrollConfig sampler;
    sampler.inner_batch = b;
    idx = sample_inner_batch(sampler, train.size(), rng);
  }
  DatasetSplit part = subset(train, idx);
  TargetBatch t{part.inputs, one_hot(part.labels, train.classes)};
  if (flip && t.inputs.rank() == 4) {
    Tensor flipped = flip_horizontal(t.inputs);
    std::bernoulli_distribution coin(0.5);
    const std::size_t stride = t.inputs.row_stride();
    for (std::size_t i = 0; i < b; ++i)
      if (coin(rng))
        std::copy_n(flipped.storage().begin() + static_cast<std::ptrdiff_t>(i * stride),
                    stride,
                    t.inputs.storage().begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return t;
}

/// Window used at outer step `step`: drawn fresh every step, or once per
/// block of `resample_every` steps.
inline WindowSample window_for_step(const DistillationConfig& cfg,
                                    std::size_t step) {
  const std::uint64_t slot = cfg.unroll.resample == ResamplePolicy::per_outer_step
                                 ? step
                                 : step / cfg.unroll.resample_every;
  Rng rng = make_rng(cfg.seed, "distill/window", slot);
  return sample_window(cfg.unroll, rng);
}

/// One outer update of `st.u`. All randomness derives from (cfg.seed, step).
inline StepMetrics distill_step(DistillState& st, const DistillationConfig& cfg,
                                const DatasetSplit& train, std::size_t step) {
  StepMetrics m;
  m.step = step;
  const bool sampling = cfg.hardness.enabled && st.sampler &&
                        step >= cfg.hardness.activation_step;
  m.hardness_sampling = sampling;
  Rng target_rng = make_rng(cfg.seed, "distill/target", step);
  TargetBatch target = sample_target(train, cfg.target_batch,
                                     sampling ? &*st.sampler : nullptr,
                                     cfg.flip_augment, target_rng);
  Rng mg_rng = make_rng(cfg.seed, "distill/meta", step);
  MetaGradient g;
  try {
    g = meta_gradient(st.u, target, cfg.arch, cfg.unroll, mg_rng,
                      window_for_step(cfg, step));
  } catch (const DivergenceError& e) {
    throw DivergenceError("outer step " + std::to_string(step) + ": " + e.what(),
                          static_cast<long>(step));
  }
  m.outer_loss = g.outer_loss;
  m.grad_norm = g.norm;
  m.N = g.N;
  m.window_begin = g.window_begin;
  m.graph_nodes = g.graph_nodes;
  std::tie(g, st.clip) = ema_clip(std::move(g), st.clip, cfg.clip_factor, cfg.ema_decay);
  m.clipped_norm = g.norm;
  outer_adam_step(st.u, g, st.opt, cfg.outer_lr);
  return m;
}

/// Re-scores the hardness sampler when due.
inline void refresh_sampler(DistillState& st, const DistillationConfig& cfg,
                            const DatasetSplit& train, std::size_t step) {
  if (!cfg.hardness.enabled || step < cfg.hardness.activation_step) return;
  const std::size_t since = step - cfg.hardness.activation_step;
  if (st.sampler && since % cfg.hardness.refresh_every != 0) return;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < cfg.hardness.n_nets; ++i)
    seeds.push_back(derive_seed(cfg.seed, "hardness/nets", step * 1000 + i));
  HardnessTable t = adaptive_hardness(st.u, train, cfg.arch, cfg.eval.train, seeds);
  const double center =
      cfg.hardness.half_nets_center ? static_cast<double>(cfg.hardness.n_nets) / 2.0 : 4.0;
  st.sampler = sampler_weights(t, cfg.hardness.thr, center);
  st.sampler->activation_step = cfg.hardness.activation_step;
}

struct RunResult {
  DistilledDataset u;
  History history;
};

/// Runs cfg.outer_steps outer updates on `st`. Evaluation runs after step s
/// (1-based) when s % eval_every == 0 and after the last step.
inline History run_from(DistillState& st, const DistillationConfig& cfg,
                        const DatasetSplit& train, const DatasetSplit& test,
                        const std::function<void(const StepMetrics&)>& on_step = {}) {
  cfg.validate();
  train.validate();
  st.u.validate();
  History h;
  const auto seeds = eval_seeds(cfg.seed, cfg.eval.n_seeds);
  for (std::size_t s = 0; s < cfg.outer_steps; ++s) {
    StepMetrics m;
    try {
      refresh_sampler(st, cfg, train, s);
      m = distill_step(st, cfg, train, s);
    } catch (const DivergenceError& e) {
      throw DistillationAborted(e.what(), s, std::move(h));
    }
    const std::size_t done = s + 1;
    if (done % cfg.eval_every == 0 || done == cfg.outer_steps) {
      m.eval_acc = evaluate_distilled(st.u, test, cfg.arch, cfg.eval, seeds).mean;
      h.evals.emplace_back(done, *m.eval_acc);
    }
    if (on_step) on_step(m);
    h.steps.push_back(std::move(m));
  }
  return h;
}

/// Default starting point of a run: balanced Gaussian unit-norm inputs.
inline DistilledDataset initial_distilled(const DistillationConfig& cfg,
                                          const DatasetSplit& train) {
  return init_distilled(train.input_shape(), train.classes, cfg.ipc,
                        cfg.learn_labels, derive_seed(cfg.seed, "distill/init"));
}

/// Full run from `init` (or initial_distilled) with a fresh optimizer.
inline RunResult run_distillation(
    const DistillationConfig& cfg, const DatasetSplit& train,
    const DatasetSplit& test, std::optional<DistilledDataset> init = {},
    const std::function<void(const StepMetrics&)>& on_step = {}) {
  DistillState st =
      make_distill_state(init ? std::move(*init) : initial_distilled(cfg, train));
  History h = run_from(st, cfg, train, test, on_step);
  return {std::move(st.u), std::move(h)};
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   "DDC1" | version u32 | n_points u32 | classes u32 | rank u32 |
//   dims u32[rank] | labels_learnable u8 | n_blocks u32 |
//   boundaries u32[n_blocks + 1] | lr scales f64[n_blocks] |
//   inputs f64[] | labels f64[]
//
// All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::size_t checkpoint_size(const DistilledDataset& u) {
  const std::size_t rank = u.input_shape().size();
  return 4 + 4 + 4 + 4 + 4 + 4 * rank + 1 + 4 + 4 * (u.num_blocks() + 1) +
         8 * u.num_blocks() + 8 * u.inputs.size() + 8 * u.soft_labels.size();
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : b_(bytes) {}
  std::size_t offset() const { return off_; }
  void need(std::size_t n, const char* what) const {
    if (off_ + n > b_.size())
      throw FormatError("checkpoint: truncated reading " + std::string(what) +
                        " at offset " + std::to_string(off_));
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(b_[off_++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= std::uint32_t{static_cast<unsigned char>(b_[off_ + i])} << (8 * i);
    off_ += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= std::uint64_t{static_cast<unsigned char>(b_[off_ + i])} << (8 * i);
    off_ += 8;
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  bool at_end() const { return off_ == b_.size(); }

 private:
  const std::string& b_;
  std::size_t off_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const DistilledDataset& u) {
  u.validate();
  std::string out = "DDC1";
  out.reserve(checkpoint_size(u));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(u.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(u.classes()));
  const Shape in = u.input_shape();
  detail::put_u32(out, static_cast<std::uint32_t>(in.size()));
  for (auto d : in) detail::put_u32(out, static_cast<std::uint32_t>(d));
  out.push_back(u.labels_learnable ? 1 : 0);
  detail::put_u32(out, static_cast<std::uint32_t>(u.num_blocks()));
  for (auto b : u.block_boundaries) detail::put_u32(out, static_cast<std::uint32_t>(b));
  for (double s : u.block_lr_scale) detail::put_f64(out, s);
  for (double v : u.inputs.data()) detail::put_f64(out, v);
  for (double v : u.soft_labels.data()) detail::put_f64(out, v);
  return out;
}

inline DistilledDataset decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  r.need(4, "magic");
  if (bytes.compare(0, 4, "DDC1") != 0)
    throw FormatError("checkpoint: bad magic at offset 0");
  (void)r.u32("magic");
  const std::size_t version_off = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) +
                      " at offset " + std::to_string(version_off));
  const std::uint32_t n = r.u32("n_points");
  const std::uint32_t classes = r.u32("classes");
  const std::size_t rank_off = r.offset();
  const std::uint32_t rank = r.u32("input rank");
  if (rank == 0 || rank > 8)
    throw FormatError("checkpoint: bad input rank " + std::to_string(rank) +
                      " at offset " + std::to_string(rank_off));
  Shape shape{n};
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32("input dims"));
  const std::size_t flag_off = r.offset();
  const std::uint8_t learnable = r.u8("labels_learnable");
  if (learnable > 1)
    throw FormatError("checkpoint: bad labels_learnable flag at offset " +
                      std::to_string(flag_off));
  const std::uint32_t blocks = r.u32("n_blocks");
  if (blocks == 0 || blocks > n + 1)
    throw FormatError("checkpoint: bad block count at offset " +
                      std::to_string(r.offset() - 4));
  DistilledDataset u;
  u.labels_learnable = learnable == 1;
  for (std::uint32_t i = 0; i <= blocks; ++i)
    u.block_boundaries.push_back(r.u32("block boundaries"));
  for (std::uint32_t i = 0; i < blocks; ++i)
    u.block_lr_scale.push_back(r.f64("block lr scales"));
  const std::size_t n_in = shape_numel(shape);
  r.need(8 * n_in, "inputs");
  std::vector<double> in(n_in);
  for (auto& v : in) v = r.f64("inputs");
  const std::size_t n_lab = std::size_t{n} * classes;
  r.need(8 * n_lab, "labels");
  std::vector<double> lab(n_lab);
  for (auto& v : lab) v = r.f64("labels");
  if (!r.at_end())
    throw FormatError("checkpoint: trailing bytes at offset " +
                      std::to_string(r.offset()));
  u.inputs = Tensor(shape, std::move(in));
  u.soft_labels = Tensor(Shape{n, classes}, std::move(lab));
  try {
    u.validate();
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint: inconsistent content: ") + e.what());
  }
  return u;
}

inline void save_checkpoint(const DistilledDataset& u, const std::string& path) {
  const std::string bytes = encode_checkpoint(u);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline DistilledDataset load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace ratdd
