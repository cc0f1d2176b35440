// Copyright 2026 The patchkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "patchkit/eval.hpp"

#include <cmath>
#include <set>
#include <vector>

#include "gtest/gtest.h"
#include "patchkit/errors.hpp"
#include "patchkit/rng.hpp"

namespace patchkit {
namespace {

// O(n^2) pair counting with one half per tie.
double PairwiseAuc(const std::vector<int>& y, const std::vector<double>& s) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

double Trapezoid(const std::vector<RocPoint>& roc) {
  double a = 0;
  for (std::size_t i = 1; i < roc.size(); ++i) {
    a += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) / 2;
  }
  return a;
}

TEST(MetricsTest, HandCase) {
  const auto m = metrics_from_counts({3, 4, 1, 2});
  EXPECT_EQ(m.acc, 0.7);
  EXPECT_EQ(m.sen, 0.6);
  EXPECT_EQ(m.spe, 0.8);
  // The same counts from scores.
  const std::vector<int> y{1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
  const std::vector<double> s{0.9, 0.8, 0.7, 0.2, 0.1, 0.6, 0.4, 0.3, 0.2, 0.1};
  const auto c = confusion(y, s);
  EXPECT_EQ(c, (ConfusionCounts{3, 4, 1, 2}));
}

TEST(MetricsTest, PerfectAndAllPositive) {
  const std::vector<int> y{0, 1, 0, 1};
  const auto perfect = metrics(y, std::vector<double>{0.1, 0.9, 0.2, 0.8});
  EXPECT_EQ(perfect.acc, 1.0);
  EXPECT_EQ(perfect.sen, 1.0);
  EXPECT_EQ(perfect.spe, 1.0);
  const auto pos = metrics(y, std::vector<double>(4, 0.99));
  EXPECT_EQ(pos.acc, 0.5);
  EXPECT_EQ(pos.sen, 1.0);
  EXPECT_EQ(pos.spe, 0.0);
}

TEST(MetricsTest, UndefinedRatiosAreNaN) {
  const auto m = metrics(std::vector<int>{0, 0}, std::vector<double>{0.1, 0.7});
  EXPECT_TRUE(std::isnan(m.sen));
  EXPECT_EQ(m.spe, 0.5);
  EXPECT_THROW(metrics(std::vector<int>{}, std::vector<double>{}), InvalidArgument);
  EXPECT_THROW(metrics(std::vector<int>{0, 2}, std::vector<double>{0.1, 0.2}), InvalidArgument);
  EXPECT_THROW(metrics(std::vector<int>{0, 1}, std::vector<double>{0.1}), InvalidArgument);
}

TEST(AucTest, SeparatedTiedAndSingleClass) {
  EXPECT_EQ(auc(std::vector<int>{0, 0, 1, 1}, std::vector<double>{0.1, 0.2, 0.3, 0.9}), 1.0);
  EXPECT_EQ(auc(std::vector<int>{0, 0, 1, 1}, std::vector<double>{0.9, 0.8, 0.3, 0.1}), 0.0);
  EXPECT_EQ(auc(std::vector<int>{0, 1, 0, 1, 1}, std::vector<double>(5, 0.4)), 0.5);
  EXPECT_THROW(auc(std::vector<int>{1, 1}, std::vector<double>{0.1, 0.2}), UndefinedMetric);
  EXPECT_THROW(roc_curve(std::vector<int>{0, 0}, std::vector<double>{0.1, 0.2}), UndefinedMetric);
}

TEST(AucTest, MatchesPairCountingAndTrapezoid) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 4 + rng.below(40);
    std::vector<int> y(n);
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = i < 2 ? int(i) : int(rng.below(2));
      s[i] = double(rng.below(6)) / 5.0;  // many ties
    }
    const double a = auc(y, s);
    EXPECT_NEAR(a, PairwiseAuc(y, s), 1e-12);
    EXPECT_NEAR(a, Trapezoid(roc_curve(y, s)), 1e-12);
  }
}

TEST(AucTest, IndependentScoresGiveHalf) {
  Rng rng(2);
  const std::size_t n = 10000;
  std::vector<int> y(2 * n);
  std::vector<double> s(2 * n);
  for (std::size_t i = 0; i < 2 * n; ++i) {
    y[i] = int(i % 2);
    s[i] = rng.uniform();
  }
  EXPECT_NEAR(auc(y, s), 0.5, 0.02);
}

TEST(RocTest, CurveShape) {
  const std::vector<int> y{1, 0, 1, 0};
  const std::vector<double> s{0.9, 0.9, 0.5, 0.1};
  const auto roc = roc_curve(y, s);
  ASSERT_EQ(roc.size(), 4u);
  EXPECT_EQ(roc[0], (RocPoint{0, 0}));
  EXPECT_EQ(roc[1], (RocPoint{0.5, 0.5}));
  EXPECT_EQ(roc[2], (RocPoint{0.5, 1.0}));
  EXPECT_EQ(roc[3], (RocPoint{1.0, 1.0}));
  EXPECT_EQ(roc_point(y, s, 0.5), (RocPoint{0.5, 1.0}));
  EXPECT_EQ(roc_csv(roc).substr(0, 8), "fpr,tpr\n");
}

TEST(KFoldTest, StratifiedBalancedFolds) {
  std::vector<int> y(100);
  for (std::size_t i = 0; i < 100; ++i) y[i] = int(i % 2);
  const auto fa = kfold(y, 5, 3, 42);
  ASSERT_EQ(fa.fold_of.size(), 3u);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t f = 0; f < 5; ++f) {
      const auto test = fa.test_indices(r, f);
      std::size_t pos = 0;
      for (std::size_t i : test) pos += y[i];
      EXPECT_EQ(test.size(), 20u);
      EXPECT_EQ(pos, 10u);
      EXPECT_EQ(fa.train_indices(r, f).size(), 80u);
    }
  }
  EXPECT_NE(fa.fold_of[0], fa.fold_of[1]);
}

TEST(KFoldTest, UnevenClassesStayWithinOne) {
  std::vector<int> y(23, 0);
  for (std::size_t i = 0; i < 9; ++i) y[i] = 1;
  const auto fa = kfold(y, 4, 1, 7);
  for (std::size_t f = 0; f < 4; ++f) {
    std::size_t pos = 0, all = fa.test_indices(0, f).size();
    for (std::size_t i : fa.test_indices(0, f)) pos += y[i];
    EXPECT_GE(pos, 2u);
    EXPECT_LE(pos, 3u);
    EXPECT_GE(all, 5u);
    EXPECT_LE(all, 6u);
  }
}

TEST(KFoldTest, LeaveOneOutPartition) {
  const std::vector<int> y{0, 1, 0, 1, 1, 0};
  const auto fa = kfold(y, 6, 2, 3, false);
  for (std::size_t r = 0; r < 2; ++r) {
    std::set<std::size_t> seen;
    for (std::size_t f = 0; f < 6; ++f) {
      const auto t = fa.test_indices(r, f);
      ASSERT_EQ(t.size(), 1u);
      seen.insert(t[0]);
    }
    EXPECT_EQ(seen.size(), 6u);
  }
}

TEST(KFoldTest, SeededAndValidated) {
  std::vector<int> y(40);
  for (std::size_t i = 0; i < 40; ++i) y[i] = int(i % 2);
  EXPECT_EQ(kfold(y, 5, 2, 9).fold_of, kfold(y, 5, 2, 9).fold_of);
  EXPECT_NE(kfold(y, 5, 1, 9).fold_of, kfold(y, 5, 1, 10).fold_of);
  EXPECT_THROW(kfold(y, 21, 1, 9), InvalidArgument);
  EXPECT_THROW(kfold(y, 1, 1, 9), InvalidArgument);
}

TEST(SplitTest, StratifiedHoldout) {
  std::vector<int> y(200);
  for (std::size_t i = 0; i < 200; ++i) y[i] = int(i % 2);
  const auto [train, test] = stratified_split(y, 0.2, 5);
  EXPECT_EQ(train.size(), 160u);
  EXPECT_EQ(test.size(), 40u);
  std::size_t pos = 0;
  for (std::size_t i : test) pos += y[i];
  EXPECT_EQ(pos, 20u);
  std::set<std::size_t> all(train.begin(), train.end());
  all.insert(test.begin(), test.end());
  EXPECT_EQ(all.size(), 200u);
  EXPECT_THROW(stratified_split(y, 1.0, 5), InvalidArgument);
}

TEST(ReportTest, PoolsAndSummarises) {
  const std::vector<ScoredSet> sets{
      {0, 0, {0, 1, 0, 1}, {0.1, 0.9, 0.2, 0.8}},
      {0, 1, {0, 1, 0, 1}, {0.6, 0.9, 0.2, 0.3}},
  };
  const auto r = make_report(sets);
  EXPECT_EQ(r.folds.size(), 2u);
  EXPECT_EQ(r.folds[0].m.acc, 1.0);
  EXPECT_EQ(r.folds[1].m.acc, 0.5);
  EXPECT_DOUBLE_EQ(r.acc.mean, 0.75);
  EXPECT_NEAR(r.acc.std, std::sqrt(0.125), 1e-15);
  EXPECT_EQ(r.pooled.counts.total(), 8u);
  const json j = r;
  EXPECT_EQ(j["summary"]["acc"]["mean"], 0.75);
  EXPECT_EQ(j["folds"].size(), 2u);
}

}  // namespace
}  // namespace patchkit
