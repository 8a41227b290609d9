// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "ratdd/evaluation.hpp"
#include "ratdd/hardness.hpp"

using namespace ratdd;

namespace {

struct Blobs {
  DatasetSplit train, test;
  Blobs() {
    SyntheticParams p;
    p.train_per_class = 20;
    p.test_per_class = 20;
    std::tie(train, test) = make_synthetic(SyntheticKind::gaussian_blobs, p, 2);
  }
};

ArchitectureSpec mlp() {
  ArchitectureSpec s;
  s.hidden = {8};
  return s;
}

EvalConfig quick() {
  EvalConfig c;
  c.train.steps = 60;
  c.train.opt.lr = 0.05;
  return c;
}

}  // namespace

TEST(EvalSeeds, DistinctAndStable) {
  auto a = eval_seeds(9, 5);
  EXPECT_EQ(a, eval_seeds(9, 5));
  std::sort(a.begin(), a.end());
  EXPECT_EQ(std::unique(a.begin(), a.end()), a.end());
  EXPECT_NE(eval_seeds(9, 1), eval_seeds(10, 1));
}

TEST(Evaluate, ReportStatisticsMatchPerSeedRuns) {
  Blobs b;
  const auto seeds = eval_seeds(3, 4);
  EvalReport r = evaluate_real(b.train, b.test, mlp(), quick(), seeds);
  ASSERT_EQ(r.per_seed.size(), 4u);
  double mean = 0, sq = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double a = train_and_score(b.train.inputs, one_hot(b.train.labels, 3), b.test,
                                     mlp(), quick().train, seeds[i]);
    EXPECT_EQ(a, r.per_seed[i]);
    mean += a;
  }
  mean /= 4;
  for (double a : r.per_seed) sq += (a - mean) * (a - mean);
  EXPECT_NEAR(r.mean, mean, 1e-15);
  EXPECT_NEAR(r.std, std::sqrt(sq / 4), 1e-15);
  EXPECT_GT(r.mean, 0.8);
  EXPECT_EQ(r.steps, 60u);
  EXPECT_EQ(r.lr, 0.05);
  EvalConfig par = quick();
  par.jobs = 2;
  EXPECT_EQ(evaluate_real(b.train, b.test, mlp(), par, seeds).per_seed, r.per_seed);
}

TEST(Evaluate, DivergedSeedsExcluded) {
  Blobs b;
  EvalConfig c = quick();
  c.train.opt.lr = 1e6;
  c.train.divergence_bound = 1e3;
  EvalReport r = evaluate_real(b.train, b.test, mlp(), c, eval_seeds(1, 3));
  EXPECT_EQ(r.n_seeds, r.per_seed.size());
  EXPECT_EQ(r.diverged_seeds.size() + r.per_seed.size(), 3u);
  EXPECT_FALSE(r.diverged_seeds.empty());
}

TEST(Subsample, RowsAndInfeasibleSizes) {
  Blobs b;
  DistilledDataset u = init_distilled({2}, 3, 4, false, 1);
  Rng rng(2);
  const auto seeds = eval_seeds(1, 2);
  auto rows = subsample_eval(u, {1, 4}, b.train, b.test, mlp(), quick(), seeds, rng);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].distilled_sub.per_seed,
            evaluate_distilled(u, b.test, mlp(), quick(), seeds).per_seed);
  EXPECT_FALSE(rows[0].direct.has_value());
  const std::string csv = subsample_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "size,distilled_sub_mean,distilled_sub_std,real_mean,real_std,direct_mean");
  EXPECT_THROW((void)subsample_eval(u, {5}, b.train, b.test, mlp(), quick(), seeds, rng),
               ContractError);
  EXPECT_THROW((void)subsample_eval(u, {0}, b.train, b.test, mlp(), quick(), seeds, rng),
               ContractError);
}

TEST(BalancedSubset, KeepsClassBalance) {
  DistilledDataset u = init_distilled({3}, 4, 5, true, 2);
  Rng rng(3);
  DistilledDataset s = balanced_subset(u, 2, rng);
  EXPECT_EQ(s.size(), 8u);
  std::vector<int> per(4);
  for (int c : s.hard_labels()) ++per[c];
  EXPECT_EQ(per, (std::vector<int>{2, 2, 2, 2}));
}

TEST(Stratified, AccuracyPerScore) {
  HardnessTable t;
  t.scores = {0, 0, 1, 2, 2, 2};
  t.raw.assign(t.scores.begin(), t.scores.end());
  auto s = stratified_accuracy({true, false, true, true, true, false}, t);
  EXPECT_EQ(s.histogram, (std::map<int, std::size_t>{{0, 2}, {1, 1}, {2, 3}}));
  EXPECT_DOUBLE_EQ(s.accuracy[0], 0.5);
  EXPECT_DOUBLE_EQ(s.accuracy[1], 1.0);
  EXPECT_DOUBLE_EQ(s.accuracy[2], 2.0 / 3.0);
  EXPECT_THROW((void)stratified_accuracy({true}, t), DimensionError);
}
