// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Evaluation protocol: train fresh networks on a distilled set and report
// test accuracy mean and std over seeds.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ratdd/data.hpp"
#include "ratdd/distilled.hpp"
#include "ratdd/hardness.hpp"
#include "ratdd/models.hpp"
#include "ratdd/rng.hpp"
#include "ratdd/training.hpp"

namespace ratdd {

struct EvalConfig {
  TrainConfig train{};
  std::size_t n_seeds = 10;
  std::size_t jobs = 1;

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

/// Accuracy statistics over seeds. `std` uses the population convention.
/// Seeds whose training diverged are listed in `diverged_seeds` and left out
/// of the statistics.
struct EvalReport {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> per_seed;
  std::vector<std::uint64_t> seeds;
  std::vector<std::uint64_t> diverged_seeds;
  std::size_t n_seeds = 0;
  std::size_t steps = 0;
  double lr = 0.0;

  nlohmann::json to_json() const {
    return {{"mean", mean},   {"std", std},
            {"per_seed", per_seed}, {"seeds", seeds},
            {"diverged_seeds", diverged_seeds}, {"n_seeds", n_seeds},
            {"steps", steps}, {"lr", lr}};
  }
};

/// Seeds for evaluation networks derived from a root seed.
inline std::vector<std::uint64_t> eval_seeds(std::uint64_t root, std::size_t n) {
  std::vector<std::uint64_t> s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(derive_seed(root, "eval", i));
  return s;
}

/// Test accuracy of one network trained on (inputs, labels) from `seed`.
inline double train_and_score(const Tensor& inputs, const Tensor& soft_labels,
                              const DatasetSplit& test,
                              const ArchitectureSpec& spec,
                              const TrainConfig& cfg, std::uint64_t seed) {
  Rng batch_rng = make_rng(seed, "eval/batches");
  ParamVector p = train_network(spec, init_params(spec, seed), inputs,
                                soft_labels, cfg, batch_rng);
  return accuracy(predict(spec, p, test.inputs), test.labels);
}

namespace detail {

inline EvalReport evaluate_sets(const Tensor& inputs, const Tensor& soft_labels,
                                const DatasetSplit& test,
                                const ArchitectureSpec& spec,
                                const EvalConfig& cfg,
                                const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ContractError("evaluate: need >= 1 seed");
  std::vector<std::optional<double>> acc(seeds.size());
  auto run = [&](std::size_t i) -> std::optional<double> {
    try {
      return train_and_score(inputs, soft_labels, test, spec, cfg.train, seeds[i]);
    } catch (const DivergenceError&) {
      return std::nullopt;
    }
  };
  if (cfg.jobs > 1) {
    for (std::size_t base = 0; base < seeds.size(); base += cfg.jobs) {
      std::vector<std::future<std::optional<double>>> fut;
      for (std::size_t i = base; i < std::min(seeds.size(), base + cfg.jobs); ++i)
        fut.push_back(std::async(std::launch::async, run, i));
      for (std::size_t k = 0; k < fut.size(); ++k) acc[base + k] = fut[k].get();
    }
  } else {
    for (std::size_t i = 0; i < seeds.size(); ++i) acc[i] = run(i);
  }
  EvalReport r;
  r.steps = cfg.train.steps;
  r.lr = cfg.train.opt.lr;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (!acc[i]) {
      r.diverged_seeds.push_back(seeds[i]);
      continue;
    }
    r.per_seed.push_back(*acc[i]);
    r.seeds.push_back(seeds[i]);
  }
  r.n_seeds = r.per_seed.size();
  if (r.n_seeds == 0) return r;
  for (double a : r.per_seed) r.mean += a;
  r.mean /= static_cast<double>(r.n_seeds);
  double var = 0.0;
  for (double a : r.per_seed) var += (a - r.mean) * (a - r.mean);
  r.std = std::sqrt(var / static_cast<double>(r.n_seeds));
  return r;
}

}  // namespace detail

/// Trains one network per seed on U and measures accuracy on `test`.
inline EvalReport evaluate_distilled(const DistilledDataset& u,
                                     const DatasetSplit& test,
                                     const ArchitectureSpec& spec,
                                     const EvalConfig& cfg,
                                     const std::vector<std::uint64_t>& seeds) {
  return detail::evaluate_sets(u.inputs, u.soft_labels, test, spec, cfg, seeds);
}

/// Same protocol on real data with one-hot labels.
inline EvalReport evaluate_real(const DatasetSplit& train, const DatasetSplit& test,
                                const ArchitectureSpec& spec,
                                const EvalConfig& cfg,
                                const std::vector<std::uint64_t>& seeds) {
  return detail::evaluate_sets(train.inputs, one_hot(train.labels, train.classes),
                               test, spec, cfg, seeds);
}

/// Random class-balanced subset of U with `per_class` rows of each class
/// (class = argmax of the soft label).
inline DistilledDataset balanced_subset(const DistilledDataset& u,
                                        std::size_t per_class, Rng& rng) {
  auto idx = balanced_sample(u.hard_labels(), u.classes(), per_class, rng);
  return select_rows(u, idx);
}

struct SubsampleRow {
  std::size_t size = 0;  // per class
  EvalReport distilled_sub;
  EvalReport real;
  std::optional<EvalReport> direct;
};

/// For each per-class size: a random balanced subset of U, a random balanced
/// subset of real data of the same size, and (if given) a directly distilled
/// set of that size, all evaluated with the same seeds.
inline std::vector<SubsampleRow> subsample_eval(
    const DistilledDataset& u, const std::vector<std::size_t>& sizes,
    const DatasetSplit& real_train, const DatasetSplit& test,
    const ArchitectureSpec& spec, const EvalConfig& cfg,
    const std::vector<std::uint64_t>& seeds, Rng& rng,
    const std::map<std::size_t, DistilledDataset>& direct = {}) {
  const auto counts = class_indices(u.hard_labels(), u.classes());
  std::size_t ipc = counts.empty() ? 0 : counts[0].size();
  for (const auto& c : counts) ipc = std::min(ipc, c.size());
  std::vector<SubsampleRow> rows;
  for (std::size_t s : sizes) {
    if (s == 0 || s > ipc)
      throw ContractError("subsample_eval: size " + std::to_string(s) +
                          " infeasible for ipc " + std::to_string(ipc));
    SubsampleRow row;
    row.size = s;
    DistilledDataset sub = s == ipc ? u : balanced_subset(u, s, rng);
    row.distilled_sub = evaluate_distilled(sub, test, spec, cfg, seeds);
    auto real_idx = balanced_sample(real_train.labels, real_train.classes, s, rng);
    row.real = evaluate_real(subset(real_train, real_idx), test, spec, cfg, seeds);
    if (auto it = direct.find(s); it != direct.end())
      row.direct = evaluate_distilled(it->second, test, spec, cfg, seeds);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string subsample_csv(const std::vector<SubsampleRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "size,distilled_sub_mean,distilled_sub_std,real_mean,real_std,direct_mean\n";
  for (const auto& r : rows) {
    os << r.size << ',' << r.distilled_sub.mean << ',' << r.distilled_sub.std
       << ',' << r.real.mean << ',' << r.real.std << ',';
    if (r.direct) os << r.direct->mean;
    os << '\n';
  }
  return os.str();
}

/// Accuracy per integer hardness score, plus the score histogram. Scores
/// with no examples are omitted.
struct StratifiedAccuracy {
  std::map<int, double> accuracy;
  std::map<int, std::size_t> histogram;
};

inline StratifiedAccuracy stratified_accuracy(const std::vector<bool>& correct,
                                              const HardnessTable& table) {
  if (correct.size() != table.size())
    throw DimensionError("stratified_accuracy: " + std::to_string(correct.size()) +
                         " predictions for " + std::to_string(table.size()) +
                         " scores");
  StratifiedAccuracy s;
  std::map<int, std::size_t> hits;
  for (std::size_t i = 0; i < correct.size(); ++i) {
    ++s.histogram[table.scores[i]];
    hits[table.scores[i]] += correct[i];
  }
  for (const auto& [score, count] : s.histogram)
    s.accuracy[score] = static_cast<double>(hits[score]) / static_cast<double>(count);
  return s;
}

}  // namespace ratdd
