// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Example hardness: forgetting events along training, disagreement across
// networks trained on the distilled set, and the hardness-weighted sampler.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <future>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "ratdd/data.hpp"
#include "ratdd/distilled.hpp"
#include "ratdd/errors.hpp"
#include "ratdd/models.hpp"
#include "ratdd/rng.hpp"
#include "ratdd/training.hpp"

namespace ratdd {

/// Correctness of every example at the end of every epoch.
struct PredictionTrace {
  std::size_t epochs = 0;
  std::size_t examples = 0;
  std::vector<bool> correct;  // row-major, epochs x examples

  bool at(std::size_t epoch, std::size_t example) const {
    return correct[epoch * examples + example];
  }
  std::vector<bool> row(std::size_t example) const {
    std::vector<bool> r(epochs);
    for (std::size_t e = 0; e < epochs; ++e) r[e] = at(e, example);
    return r;
  }
};

enum class HardnessKind { forgetting, disagreement };

struct HardnessTable {
  std::vector<int> scores;   // rounded, used for strata
  std::vector<double> raw;   // mean over runs (equals scores for disagreement)
  HardnessKind kind = HardnessKind::forgetting;
  std::size_t n_runs = 0;

  std::size_t size() const { return scores.size(); }
};

/// Number of t with correct[t] && !correct[t+1].
inline int forgetting_events(const std::vector<bool>& correct) {
  if (correct.empty()) throw ContractError("forgetting_events: empty sequence");
  int n = 0;
  for (std::size_t t = 0; t + 1 < correct.size(); ++t)
    if (correct[t] && !correct[t + 1]) ++n;
  return n;
}

struct ForgettingConfig {
  TrainConfig train{};  // train.steps is ignored; epochs drive the length
  std::size_t epochs = 20;
  std::size_t batch = 64;
  std::size_t n_seeds = 10;
  std::size_t jobs = 1;
};

/// Trains one network and records training-set correctness after each epoch.
inline PredictionTrace training_trace(const DatasetSplit& train,
                                      const ArchitectureSpec& spec,
                                      const ForgettingConfig& cfg,
                                      std::uint64_t seed) {
  const std::size_t n = train.size();
  const std::size_t batch = std::min(cfg.batch == 0 ? n : cfg.batch, n);
  const std::size_t steps_per_epoch = (n + batch - 1) / batch;
  TrainConfig tc = cfg.train;
  tc.steps = steps_per_epoch * cfg.epochs;
  tc.batch = batch;
  PredictionTrace trace;
  trace.epochs = cfg.epochs;
  trace.examples = n;
  trace.correct.reserve(cfg.epochs * n);
  Rng batch_rng = make_rng(seed, "forgetting/batches");
  train_network(spec, init_params(spec, seed), train.inputs,
                one_hot(train.labels, train.classes), tc, batch_rng,
                [&](std::size_t s, const ParamVector& p) {
                  if ((s + 1) % steps_per_epoch != 0) return;
                  auto ok = correctness(predict(spec, p, train.inputs), train.labels);
                  trace.correct.insert(trace.correct.end(), ok.begin(), ok.end());
                });
  return trace;
}

/// Forgetting events per example, averaged over `seeds`; scores are the
/// averages rounded to the nearest integer.
inline HardnessTable forgetting_scores(const DatasetSplit& train,
                                       const ArchitectureSpec& spec,
                                       const ForgettingConfig& cfg,
                                       const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ContractError("forgetting_scores: need >= 1 seed");
  std::vector<PredictionTrace> traces(seeds.size());
  if (cfg.jobs > 1) {
    std::vector<std::future<PredictionTrace>> fut;
    for (auto s : seeds)
      fut.push_back(std::async(std::launch::async, training_trace, std::cref(train),
                               std::cref(spec), std::cref(cfg), s));
    for (std::size_t i = 0; i < fut.size(); ++i) traces[i] = fut[i].get();
  } else {
    for (std::size_t i = 0; i < seeds.size(); ++i)
      traces[i] = training_trace(train, spec, cfg, seeds[i]);
  }
  HardnessTable t;
  t.kind = HardnessKind::forgetting;
  t.n_runs = seeds.size();
  t.raw.assign(train.size(), 0.0);
  for (const auto& tr : traces)
    for (std::size_t i = 0; i < train.size(); ++i)
      t.raw[i] += forgetting_events(tr.row(i));
  for (double& r : t.raw) r /= static_cast<double>(seeds.size());
  for (double r : t.raw) t.scores.push_back(static_cast<int>(std::lround(r)));
  return t;
}

/// Per target example, the number of networks (trained on U with the given
/// seeds) that misclassify it.
inline HardnessTable adaptive_hardness(const DistilledDataset& u,
                                       const DatasetSplit& target,
                                       const ArchitectureSpec& spec,
                                       const TrainConfig& train_cfg,
                                       const std::vector<std::uint64_t>& seeds) {
  if (seeds.size() < 2) throw ContractError("adaptive_hardness: need >= 2 networks");
  HardnessTable t;
  t.kind = HardnessKind::disagreement;
  t.n_runs = seeds.size();
  t.scores.assign(target.size(), 0);
  for (auto seed : seeds) {
    Rng batch_rng = make_rng(seed, "adaptive/batches");
    ParamVector p = train_network(spec, init_params(spec, seed), u.inputs,
                                  u.soft_labels, train_cfg, batch_rng);
    auto ok = correctness(predict(spec, p, target.inputs), target.labels);
    for (std::size_t i = 0; i < ok.size(); ++i) t.scores[i] += ok[i] ? 0 : 1;
  }
  t.raw.assign(t.scores.begin(), t.scores.end());
  return t;
}

struct SamplerWeights {
  std::vector<double> weights;
  double thr = 1.0;
  double center = 4.0;
  std::size_t activation_step = 0;
};

/// w(x) = thr + |HS(x) - center|, center 4 by default.
inline SamplerWeights sampler_weights(const HardnessTable& table, double thr,
                                      double center = 4.0) {
  if (!(thr > 0.0)) throw ContractError("sampler_weights: thr must be > 0");
  SamplerWeights w;
  w.thr = thr;
  w.center = center;
  w.weights.reserve(table.size());
  for (int s : table.scores)
    w.weights.push_back(thr + std::abs(static_cast<double>(s) - center));
  return w;
}

/// `batch` distinct indices drawn with probability proportional to
/// `weights`, sequentially without replacement (Efraimidis-Spirakis keys).
/// Zero-weight entries are never drawn.
inline std::vector<std::size_t> weighted_batch(const std::vector<double>& weights,
                                               std::size_t batch, Rng& rng) {
  double total = 0.0;
  std::size_t positive = 0;
  for (double w : weights) {
    if (w < 0.0 || !std::isfinite(w))
      throw ContractError("weighted_batch: weights must be finite and >= 0");
    total += w;
    positive += w > 0.0;
  }
  if (!(total > 0.0)) throw ContractError("weighted_batch: weights sum to zero");
  if (batch > positive)
    throw ContractError("weighted_batch: batch of " + std::to_string(batch) +
                        " exceeds population of " + std::to_string(positive));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::pair<double, std::size_t>> keys;
  keys.reserve(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    double u = unif(rng);
    if (weights[i] == 0.0) continue;
    while (u == 0.0) u = unif(rng);
    keys.emplace_back(std::log(u) / weights[i], i);
  }
  std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(batch),
                    keys.end(), [](const auto& a, const auto& b) {
                      return a.first > b.first || (a.first == b.first && a.second < b.second);
                    });
  std::vector<std::size_t> out;
  out.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) out.push_back(keys[i].second);
  return out;
}

/// CSV with columns example_index, score, raw_mean.
inline void write_hardness_csv(const HardnessTable& t, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path);
  out.precision(17);
  out << "example_index,score,raw_mean\n";
  for (std::size_t i = 0; i < t.size(); ++i)
    out << i << ',' << t.scores[i] << ',' << t.raw[i] << '\n';
}

}  // namespace ratdd
