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

#pragma once

// Binary classification metrics (positive class = label 1, score >= 0.5 is a
// positive call), ROC/AUC, and repeated stratified k-fold assignment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "patchkit/errors.hpp"
#include "patchkit/json_io.hpp"
#include "patchkit/rng.hpp"

namespace patchkit {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct ConfusionCounts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::size_t total() const { return tp + tn + fp + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct Metrics {
  ConfusionCounts counts;
  double acc = kNaN, sen = kNaN, spe = kNaN;  // NaN when the ratio is undefined
};

inline Metrics metrics_from_counts(const ConfusionCounts& c) {
  auto ratio = [](std::size_t num, std::size_t den) {
    return den == 0 ? kNaN : static_cast<double>(num) / static_cast<double>(den);
  };
  return {c, ratio(c.tp + c.tn, c.total()), ratio(c.tp, c.tp + c.fn),
          ratio(c.tn, c.tn + c.fp)};
}

namespace detail {
inline void check_binary(std::span<const int> labels, std::size_t n_scores) {
  if (labels.empty()) throw InvalidArgument("no samples to score");
  if (labels.size() != n_scores) throw InvalidArgument("labels and scores differ in length");
  for (int l : labels) {
    if (l != 0 && l != 1) throw InvalidArgument("labels must be 0 or 1");
  }
}
}  // namespace detail

inline ConfusionCounts confusion(std::span<const int> labels, std::span<const double> scores,
                                 double threshold = 0.5) {
  detail::check_binary(labels, scores.size());
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pos = scores[i] >= threshold;
    if (labels[i] == 1) {
      (pos ? c.tp : c.fn)++;
    } else {
      (pos ? c.fp : c.tn)++;
    }
  }
  return c;
}

inline Metrics metrics(std::span<const int> labels, std::span<const double> scores,
                       double threshold = 0.5) {
  return metrics_from_counts(confusion(labels, scores, threshold));
}

struct RocPoint {
  double fpr = 0.0, tpr = 0.0;
  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

inline RocPoint roc_point(std::span<const int> labels, std::span<const double> scores,
                          double threshold) {
  const auto c = confusion(labels, scores, threshold);
  if (c.tp + c.fn == 0 || c.tn + c.fp == 0) {
    throw UndefinedMetric("ROC needs both classes present");
  }
  return {static_cast<double>(c.fp) / static_cast<double>(c.fp + c.tn),
          static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn)};
}

// One point per distinct score threshold (score >= t is positive), from
// (0,0) to (1,1).
inline std::vector<RocPoint> roc_curve(std::span<const int> labels,
                                       std::span<const double> scores) {
  detail::check_binary(labels, scores.size());
  std::size_t pos = 0;
  for (int l : labels) pos += l == 1;
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetric("ROC needs both classes present");
  std::vector<std::size_t> idx(labels.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> curve{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const double s = scores[idx[i]];
    for (; i < idx.size() && scores[idx[i]] == s; ++i) (labels[idx[i]] == 1 ? tp : fp)++;
    curve.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                     static_cast<double>(tp) / static_cast<double>(pos)});
  }
  return curve;
}

// Rank formulation (Mann-Whitney U with average ranks for ties); equals the
// trapezoidal area under roc_curve().
inline double auc(std::span<const int> labels, std::span<const double> scores) {
  detail::check_binary(labels, scores.size());
  std::size_t pos = 0;
  for (int l : labels) pos += l == 1;
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetric("AUC needs both classes present");
  std::vector<std::size_t> idx(labels.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      if (labels[idx[t]] == 1) rank_sum += avg_rank;
    }
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

// ---------------------------------------------------------------------------
// Cross-validation.

// fold_of[r][i] is the test fold of sample i in repeat r.
struct FoldAssignment {
  std::size_t k = 0;
  std::vector<std::vector<std::size_t>> fold_of;

  std::vector<std::size_t> test_indices(std::size_t repeat, std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of[repeat].size(); ++i) {
      if (fold_of[repeat][i] == fold) out.push_back(i);
    }
    return out;
  }
  std::vector<std::size_t> train_indices(std::size_t repeat, std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of[repeat].size(); ++i) {
      if (fold_of[repeat][i] != fold) out.push_back(i);
    }
    return out;
  }
};

// Stratified: each class is shuffled and dealt round-robin, the second class
// continuing where the first stopped so fold sizes also differ by at most 1.
inline FoldAssignment kfold(std::span<const int> labels, std::size_t k, std::size_t repeats,
                            std::uint64_t seed, bool stratified = true) {
  if (k < 2) throw InvalidArgument("k must be >= 2");
  std::vector<std::size_t> cls[2];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw InvalidArgument("labels must be 0 or 1");
    cls[labels[i]].push_back(i);
  }
  if (stratified) {
    if (k > cls[0].size() || k > cls[1].size()) {
      throw InvalidArgument("k exceeds the size of a class");
    }
  } else if (k > labels.size()) {
    throw InvalidArgument("k exceeds the number of samples");
  }
  FoldAssignment fa;
  fa.k = k;
  for (std::size_t r = 0; r < repeats; ++r) {
    Rng rng(seed, r);
    std::vector<std::size_t> fold(labels.size());
    std::size_t next = 0;
    auto deal = [&](std::vector<std::size_t> items) {
      rng.shuffle(std::span<std::size_t>(items));
      for (std::size_t i : items) fold[i] = next++ % k;
    };
    if (stratified) {
      deal(cls[0]);
      deal(cls[1]);
    } else {
      std::vector<std::size_t> all(labels.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      deal(all);
    }
    fa.fold_of.push_back(std::move(fold));
  }
  return fa;
}

// Stratified single split: returns (train, test) with round(fraction * n_c)
// test samples from each class c.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    std::span<const int> labels, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw InvalidArgument("test fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> train, test;
  Rng rng(seed);
  for (int c = 0; c <= 1; ++c) {
    std::vector<std::size_t> items;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) items.push_back(i);
    }
    rng.shuffle(std::span<std::size_t>(items));
    const auto n_test = static_cast<std::size_t>(
        std::llround(test_fraction * static_cast<double>(items.size())));
    for (std::size_t i = 0; i < items.size(); ++i) (i < n_test ? test : train).push_back(items[i]);
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

struct FoldReport {
  std::size_t repeat = 0, fold = 0;
  Metrics m;
  double auc = kNaN;
};

struct MeanStd {
  double mean = kNaN, std = kNaN;
};

inline MeanStd mean_std(std::span<const double> xs) {
  std::vector<double> v;
  for (double x : xs) {
    if (!std::isnan(x)) v.push_back(x);
  }
  if (v.empty()) return {};
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

struct EvalReport {
  Metrics pooled;  // counts and ratios over every scored sample
  std::vector<RocPoint> roc;
  double auc = kNaN;
  std::vector<FoldReport> folds;
  MeanStd acc, sen, spe, fold_auc;
};

// Scores for one evaluation unit (a fold, or a single held-out split).
struct ScoredSet {
  std::size_t repeat = 0, fold = 0;
  std::vector<int> labels;
  std::vector<double> scores;
};

inline EvalReport make_report(std::span<const ScoredSet> sets) {
  if (sets.empty()) throw InvalidArgument("nothing to report");
  EvalReport r;
  std::vector<int> all_labels;
  std::vector<double> all_scores;
  std::vector<double> accs, sens, spes, aucs;
  for (const auto& s : sets) {
    FoldReport f{s.repeat, s.fold, metrics(s.labels, s.scores), kNaN};
    try {
      f.auc = auc(s.labels, s.scores);
    } catch (const UndefinedMetric&) {
    }
    accs.push_back(f.m.acc);
    sens.push_back(f.m.sen);
    spes.push_back(f.m.spe);
    aucs.push_back(f.auc);
    r.folds.push_back(f);
    all_labels.insert(all_labels.end(), s.labels.begin(), s.labels.end());
    all_scores.insert(all_scores.end(), s.scores.begin(), s.scores.end());
  }
  r.pooled = metrics(all_labels, all_scores);
  try {
    r.auc = auc(all_labels, all_scores);
    r.roc = roc_curve(all_labels, all_scores);
  } catch (const UndefinedMetric&) {
  }
  r.acc = mean_std(accs);
  r.sen = mean_std(sens);
  r.spe = mean_std(spes);
  r.fold_auc = mean_std(aucs);
  return r;
}

namespace detail {
inline json num_or_null(double x) { return std::isnan(x) ? json(nullptr) : json(x); }
inline json ms_json(const MeanStd& m) {
  return {{"mean", num_or_null(m.mean)}, {"std", num_or_null(m.std)}};
}
}  // namespace detail

inline void to_json(json& j, const Metrics& m) {
  j = json{{"tp", m.counts.tp}, {"tn", m.counts.tn}, {"fp", m.counts.fp},
           {"fn", m.counts.fn}, {"acc", detail::num_or_null(m.acc)},
           {"sen", detail::num_or_null(m.sen)}, {"spe", detail::num_or_null(m.spe)}};
}

inline void to_json(json& j, const EvalReport& r) {
  json folds = json::array();
  for (const auto& f : r.folds) {
    json fj = f.m;
    fj["repeat"] = f.repeat;
    fj["fold"] = f.fold;
    fj["auc"] = detail::num_or_null(f.auc);
    folds.push_back(fj);
  }
  json roc = json::array();
  for (const auto& p : r.roc) roc.push_back({p.fpr, p.tpr});
  j = json{{"pooled", r.pooled},
           {"auc", detail::num_or_null(r.auc)},
           {"roc", roc},
           {"summary",
            {{"acc", detail::ms_json(r.acc)},
             {"sen", detail::ms_json(r.sen)},
             {"spe", detail::ms_json(r.spe)},
             {"auc", detail::ms_json(r.fold_auc)}}},
           {"folds", folds}};
}

inline std::string roc_csv(std::span<const RocPoint> roc) {
  std::string out = "fpr,tpr\n";
  char line[64];
  for (const auto& p : roc) {
    std::snprintf(line, sizeof(line), "%.17g,%.17g\n", p.fpr, p.tpr);
    out += line;
  }
  return out;
}

}  // namespace patchkit
