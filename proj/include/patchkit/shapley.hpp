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

// Perturbation-based Shapley attribution over volume regions with a zero-fill
// baseline: exact enumeration, sibling-restricted estimation, and the
// recursive octree refinement that localises discriminative patches.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "patchkit/errors.hpp"
#include "patchkit/json_io.hpp"
#include "patchkit/parallel.hpp"
#include "patchkit/phantom.hpp"
#include "patchkit/volume.hpp"

namespace patchkit {

using Probabilities = std::array<double, 2>;

// f(v) with a fixed volume and a variable set of zero-filled regions.
class BoundPredictor {
 public:
  virtual ~BoundPredictor() = default;
  virtual Probabilities operator()(std::span<const Region> zeroed) const = 0;
};

// Black-box two-class classifier. The explained scalar is predict(v)[1].
class Predictor {
 public:
  virtual ~Predictor() = default;

  virtual Probabilities predict(const Volume& v) const = 0;

  // False when predict() must not be called from several threads at once;
  // the engine then evaluates coalitions serially.
  virtual bool concurrent_safe() const { return true; }

  // Generic route: materialise the perturbed volume and call predict().
  // Models with pooled features override this with something cheaper; the
  // result must equal predict(perturb_zero(v, zeroed)).
  virtual std::unique_ptr<BoundPredictor> bind(const Volume& v) const {
    struct Generic final : BoundPredictor {
      Generic(const Predictor& p, const Volume& v) : p(p), v(v) {}
      Probabilities operator()(std::span<const Region> zeroed) const override {
        return zeroed.empty() ? p.predict(v) : p.predict(perturb_zero(v, zeroed));
      }
      const Predictor& p;
      const Volume& v;
    };
    return std::make_unique<Generic>(*this, v);
  }
};

// Adapts a callable Volume -> P(class 1) into a Predictor.
class FunctionPredictor final : public Predictor {
 public:
  explicit FunctionPredictor(std::function<double(const Volume&)> fn,
                             bool concurrent = true)
      : fn_(std::move(fn)), concurrent_(concurrent) {}
  Probabilities predict(const Volume& v) const override {
    const double p = fn_(v);
    return {1.0 - p, p};
  }
  bool concurrent_safe() const override { return concurrent_; }

 private:
  std::function<double(const Volume&)> fn_;
  bool concurrent_;
};

inline double checked_readout(const Probabilities& p) {
  constexpr double kTol = 1e-6;
  for (double x : p) {
    if (!std::isfinite(x) || x < -kTol || x > 1.0 + kTol) {
      throw ContractViolation("predictor returned a non-probability: " +
                              std::to_string(x));
    }
  }
  if (std::abs(p[0] + p[1] - 1.0) > kTol) {
    throw ContractViolation("predictor probabilities sum to " +
                            std::to_string(p[0] + p[1]));
  }
  return p[1];
}

struct ShapleyOptions {
  std::size_t threads = 1;
  std::size_t max_players = 20;
};

struct ShapleyValues {
  std::vector<double> values;
  std::size_t evaluations = 0;
};

namespace detail {

// weight[k] = k! (n-k-1)! / n! = 1 / (n * C(n-1, k)).
inline std::vector<double> shapley_weights(std::size_t n) {
  std::vector<double> w(n);
  double binom = 1.0;  // C(n-1, k)
  for (std::size_t k = 0; k < n; ++k) {
    w[k] = 1.0 / (static_cast<double>(n) * binom);
    binom = binom * static_cast<double>(n - 1 - k) / static_cast<double>(k + 1);
  }
  return w;
}

// value[mask] = f(v with context and every player whose bit is clear zeroed).
inline std::vector<double> coalition_values(const Predictor& f,
                                            const BoundPredictor& bound,
                                            std::span<const Region> players,
                                            std::span<const Region> context,
                                            std::size_t threads) {
  const std::size_t n = players.size();
  const std::size_t count = std::size_t{1} << n;
  std::vector<double> values(count);
  parallel_for(count, f.concurrent_safe() ? threads : 1, [&](std::size_t mask) {
    std::vector<Region> zeroed(context.begin(), context.end());
    for (std::size_t i = 0; i < n; ++i) {
      if (!(mask & (std::size_t{1} << i))) zeroed.push_back(players[i]);
    }
    values[mask] = checked_readout(bound(zeroed));
  });
  return values;
}

// Reduction in ascending coalition order, so the result does not depend on
// how the coalition values were scheduled.
inline std::vector<double> shapley_from_values(std::span<const double> values,
                                               std::size_t n) {
  const auto w = shapley_weights(n);
  std::vector<double> s(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    for (std::size_t mask = 0; mask < values.size(); ++mask) {
      if (mask & bit) continue;
      const auto k = static_cast<std::size_t>(std::popcount(mask));
      s[i] += w[k] * (values[mask | bit] - values[mask]);
    }
  }
  return s;
}

}  // namespace detail

// Exact Shapley values of `regions` as players, coalition value = f on v with
// the absent players zero-filled. Costs 2^n predictor calls.
inline ShapleyValues exact_shapley(const Predictor& f, const Volume& v,
                                   std::span<const Region> regions,
                                   const ShapleyOptions& opts = {}) {
  const std::size_t n = regions.size();
  if (n > opts.max_players || n >= 63) {
    throw BudgetExceeded("exact Shapley over " + std::to_string(n) +
                         " regions exceeds the cap of " +
                         std::to_string(opts.max_players));
  }
  for (const Region& r : regions) require_inside(r, v.dims());
  if (n == 0) return {};
  const auto bound = f.bind(v);
  const auto values =
      detail::coalition_values(f, *bound, regions, {}, opts.threads);
  return {detail::shapley_from_values(values, n), values.size()};
}

// Shapley restricted to at most 8 sibling regions, with `context` regions
// zero-filled in every coalition.
inline ShapleyValues sibling_shapley(const Predictor& f, const BoundPredictor& bound,
                                     const Dims& dims,
                                     std::span<const Region> siblings,
                                     std::span<const Region> context,
                                     std::size_t threads = 1) {
  if (siblings.size() > 8) {
    throw InvalidArgument("sibling_shapley takes at most 8 siblings");
  }
  for (const Region& r : siblings) require_inside(r, dims);
  for (const Region& r : context) require_inside(r, dims);
  if (siblings.empty()) return {};
  const auto values =
      detail::coalition_values(f, bound, siblings, context, threads);
  return {detail::shapley_from_values(values, siblings.size()), values.size()};
}

inline ShapleyValues sibling_shapley(const Predictor& f, const Volume& v,
                                     std::span<const Region> siblings,
                                     std::span<const Region> context,
                                     std::size_t threads = 1) {
  const auto bound = f.bind(v);
  return sibling_shapley(f, *bound, v.dims(), siblings, context, threads);
}

// ---------------------------------------------------------------------------
// Recursive partition attribution.

enum class RefineRule {
  refine_below,        // refine a node when S < tau
  refine_at_or_above,  // refine a node when S >= tau
};

inline std::string to_string(RefineRule r) {
  return r == RefineRule::refine_below ? "refine_below" : "refine_at_or_above";
}

inline RefineRule parse_refine_rule(const std::string& s) {
  if (s == "refine_below") return RefineRule::refine_below;
  if (s == "refine_at_or_above") return RefineRule::refine_at_or_above;
  throw InvalidArgument("unknown refinement rule \"" + s + "\"");
}

struct RecursiveOptions {
  std::size_t leaf_edge = 8;
  double tau = 0.0;
  RefineRule rule = RefineRule::refine_below;
  std::size_t max_depth = 3;  // levels below the root
  std::size_t budget = 100000;
  std::size_t threads = 1;
};

struct AttributionMap {
  PatchGrid grid;
  std::vector<double> values;       // per leaf
  std::size_t evaluations = 0;      // predictor calls spent
  std::vector<bool> refined_mask;   // true: value computed at leaf level
  double tau = 0.0;
  RefineRule rule = RefineRule::refine_below;
};

inline void to_json(json& j, const AttributionMap& m) {
  j = json{{"grid", m.grid},
           {"values", m.values},
           {"evaluations", m.evaluations},
           {"tau", real_to_json(m.tau)},
           {"rule", to_string(m.rule)},
           {"refined_mask", m.refined_mask}};
}

inline void from_json(const json& j, AttributionMap& m) {
  m.grid = j.at("grid").get<PatchGrid>();
  m.values = j.at("values").get<std::vector<double>>();
  m.evaluations = j.at("evaluations").get<std::size_t>();
  m.tau = real_from_json(j.at("tau"));
  m.rule = parse_refine_rule(j.at("rule").get<std::string>());
  m.refined_mask = j.at("refined_mask").get<std::vector<bool>>();
  if (m.values.size() != m.grid.size() || m.refined_mask.size() != m.grid.size()) {
    throw InvalidArgument("attribution map length does not match its grid");
  }
}

// A node of the partition tree whose Shapley value has been computed.
struct AttributedNode {
  Region region;
  double value = 0.0;
  std::size_t level = 0;
};

struct RecursiveTrace {
  AttributionMap map;
  std::vector<AttributedNode> nodes;  // in computation order (breadth first)
};

inline bool rule_fires(RefineRule rule, double value, double tau) {
  return rule == RefineRule::refine_below ? value < tau : value >= tau;
}

// Level-1 nodes are the octants of the grid-covered extent. Every node's
// children are scored by sibling Shapley with everything outside the parent
// left intact. Leaves inherit the value of the deepest scored node containing
// their centre voxel.
inline RecursiveTrace recursive_attribution_trace(const Predictor& f,
                                                  const Volume& v,
                                                  const RecursiveOptions& opts) {
  if (!std::isfinite(opts.tau) && !std::isinf(opts.tau)) {
    throw InvalidArgument("tau must not be NaN");
  }
  const PatchGrid grid = make_grid(v.dims(), opts.leaf_edge);
  const Region root = grid.extent();
  const auto bound = f.bind(v);

  RecursiveTrace trace;
  std::size_t evaluations = 0;
  auto score = [&](std::span<const Region> siblings, std::size_t level,
                   std::vector<AttributedNode>& out) {
    const std::size_t cost = std::size_t{1} << siblings.size();
    if (evaluations + cost > opts.budget) {
      throw BudgetExceeded("recursive attribution needs more than " +
                           std::to_string(opts.budget) + " predictor calls");
    }
    const auto s = sibling_shapley(f, *bound, v.dims(), siblings, {}, opts.threads);
    evaluations += s.evaluations;
    for (std::size_t i = 0; i < siblings.size(); ++i) {
      out.push_back({siblings[i], s.values[i], level});
    }
  };

  std::vector<AttributedNode> frontier;
  if (root.size.max() <= opts.leaf_edge) {
    // A single leaf: it is its own (only) player.
    const Region only[] = {root};
    score(only, 1, frontier);
  } else {
    score(octree_children(root), 1, frontier);
  }
  while (!frontier.empty()) {
    std::vector<AttributedNode> next;
    for (const AttributedNode& node : frontier) {
      trace.nodes.push_back(node);
      if (node.level < opts.max_depth && node.region.size.max() > opts.leaf_edge &&
          rule_fires(opts.rule, node.value, opts.tau)) {
        score(octree_children(node.region), node.level + 1, next);
      }
    }
    frontier = std::move(next);
  }

  AttributionMap& map = trace.map;
  map.grid = grid;
  map.values.assign(grid.size(), 0.0);
  map.refined_mask.assign(grid.size(), false);
  map.evaluations = evaluations;
  map.tau = opts.tau;
  map.rule = opts.rule;
  // Nodes are stored shallow to deep, so later stamps are deeper.
  for (const AttributedNode& node : trace.nodes) {
    const bool leaf_level = node.region.size.max() <= opts.leaf_edge;
    for (std::size_t k = 0; k < grid.size(); ++k) {
      if (node.region.contains(grid.regions[k].center())) {
        map.values[k] = node.value;
        map.refined_mask[k] = leaf_level;
      }
    }
  }
  return trace;
}

inline AttributionMap recursive_attribution(const Predictor& f, const Volume& v,
                                            const RecursiveOptions& opts) {
  return recursive_attribution_trace(f, v, opts).map;
}

// Element-wise mean over the maps with include[i] set.
inline AttributionMap cohort_average(std::span<const AttributionMap> maps,
                                     const std::vector<bool>& include) {
  if (include.size() != maps.size()) {
    throw InvalidArgument("cohort mask length does not match map count");
  }
  const AttributionMap* first = nullptr;
  std::size_t count = 0;
  AttributionMap out;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (!include[i]) continue;
    const AttributionMap& m = maps[i];
    if (!first) {
      first = &m;
      out.grid = m.grid;
      out.values.assign(m.grid.size(), 0.0);
      out.refined_mask.assign(m.grid.size(), true);
      out.tau = m.tau;
      out.rule = m.rule;
    } else if (!(m.grid == first->grid)) {
      throw InvalidArgument("cohort maps are over different grids");
    }
    for (std::size_t k = 0; k < m.values.size(); ++k) {
      out.values[k] += m.values[k];
      out.refined_mask[k] = out.refined_mask[k] && m.refined_mask[k];
    }
    out.evaluations += m.evaluations;
    ++count;
  }
  if (count == 0) throw NoPositiveSamples("no attribution map passes the cohort mask");
  for (double& x : out.values) x /= static_cast<double>(count);
  return out;
}

// ---------------------------------------------------------------------------
// Patch selection.

enum class SelectionMethod { shap, ttest };

inline std::string to_string(SelectionMethod m) {
  return m == SelectionMethod::shap ? "shap" : "ttest";
}

inline SelectionMethod parse_selection_method(const std::string& s) {
  if (s == "shap") return SelectionMethod::shap;
  if (s == "ttest") return SelectionMethod::ttest;
  throw InvalidArgument("unknown selection method \"" + s + "\"");
}

// How SHAP values are ranked: by signed value, or by magnitude |S|.
enum class RankKey { signed_value, magnitude };

inline std::string to_string(RankKey k) {
  return k == RankKey::signed_value ? "signed" : "magnitude";
}

inline RankKey parse_rank_key(const std::string& s) {
  if (s == "signed") return RankKey::signed_value;
  if (s == "magnitude") return RankKey::magnitude;
  throw InvalidArgument("unknown rank key \"" + s + "\"");
}

struct SelectionResult {
  std::vector<std::size_t> chosen;  // leaf indices, best first
  SelectionMethod method = SelectionMethod::shap;
  std::vector<double> scores;       // ranking statistic of each chosen leaf
  PatchGrid grid;
  std::size_t zero_variance_patches = 0;  // t-test only

  std::size_t side() const {
    return static_cast<std::size_t>(std::llround(std::sqrt(chosen.size())));
  }
  // Chosen leaves in ascending grid order: the layout fed to the network.
  std::vector<std::size_t> grid_order() const {
    auto out = chosen;
    std::sort(out.begin(), out.end());
    return out;
  }
};

inline void to_json(json& j, const SelectionResult& s) {
  j = json{{"method", to_string(s.method)},
           {"M", s.chosen.size()},
           {"chosen", s.chosen},
           {"scores", s.scores},
           {"grid", s.grid},
           {"zero_variance_patches", s.zero_variance_patches}};
}

inline void from_json(const json& j, SelectionResult& s) {
  s.method = parse_selection_method(j.at("method").get<std::string>());
  s.chosen = j.at("chosen").get<std::vector<std::size_t>>();
  s.scores = j.at("scores").get<std::vector<double>>();
  s.grid = j.at("grid").get<PatchGrid>();
  s.zero_variance_patches = j.value("zero_variance_patches", std::size_t{0});
  for (std::size_t k : s.chosen) {
    if (k >= s.grid.size()) throw InvalidArgument("selected leaf out of range");
  }
}

inline bool is_perfect_square(std::size_t m) {
  if (m == 0) return false;
  const auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(m))));
  return r * r == m;
}

inline void require_square(std::size_t m) {
  if (!is_perfect_square(m)) {
    throw InvalidArgument("M must be a perfect square (got " + std::to_string(m) + ")");
  }
}

namespace detail {

// Indices of the M largest keys, ties broken by ascending index.
inline std::vector<std::size_t> top_indices(std::span<const double> keys,
                                            std::size_t m) {
  std::vector<std::size_t> idx(keys.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return keys[a] > keys[b];
  });
  idx.resize(m);
  return idx;
}

}  // namespace detail

inline SelectionResult select_top(const AttributionMap& map, std::size_t m,
                                  RankKey key = RankKey::magnitude) {
  require_square(m);
  if (m > map.values.size()) {
    throw InvalidArgument("M exceeds the number of leaves");
  }
  std::vector<double> keys(map.values);
  if (key == RankKey::magnitude) {
    for (double& x : keys) x = std::abs(x);
  }
  SelectionResult out;
  out.method = SelectionMethod::shap;
  out.grid = map.grid;
  out.chosen = detail::top_indices(keys, m);
  for (std::size_t k : out.chosen) out.scores.push_back(keys[k]);
  return out;
}

// Stand-in for |t| when within-class variance vanishes but means differ.
inline constexpr double kTSentinel = 1e12;

struct TStatistics {
  std::vector<double> t;
  std::size_t zero_variance = 0;
};

// Two-sample Student t (pooled variance) of patch-mean intensity, class 1
// minus class 0, per patch.
inline TStatistics ttest_statistics(const Dataset& ds, const PatchGrid& grid) {
  std::size_t n0 = 0, n1 = 0;
  for (int l : ds.labels) (l == 1 ? n1 : n0)++;
  if (n0 < 2 || n1 < 2) {
    throw InvalidArgument("t-test needs at least two samples per class");
  }
  const auto rows = patch_feature_table(ds, grid);
  TStatistics out;
  out.t.resize(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) {
    double m0 = 0, m1 = 0;
    for (std::size_t s = 0; s < rows.size(); ++s) {
      (ds.labels[s] == 1 ? m1 : m0) += rows[s][k];
    }
    m0 /= static_cast<double>(n0);
    m1 /= static_cast<double>(n1);
    double ss0 = 0, ss1 = 0;
    for (std::size_t s = 0; s < rows.size(); ++s) {
      const double x = rows[s][k];
      if (ds.labels[s] == 1) {
        ss1 += (x - m1) * (x - m1);
      } else {
        ss0 += (x - m0) * (x - m0);
      }
    }
    const double dof = static_cast<double>(n0 + n1 - 2);
    const double pooled = (ss0 + ss1) / dof;
    const double se = std::sqrt(pooled * (1.0 / static_cast<double>(n0) +
                                          1.0 / static_cast<double>(n1)));
    if (!(se > 0.0)) {
      ++out.zero_variance;
      out.t[k] = m1 == m0 ? 0.0 : std::copysign(kTSentinel, m1 - m0);
    } else {
      out.t[k] = (m1 - m0) / se;
    }
  }
  return out;
}

// Ranks patches by |t| (equivalently ascending p at the shared dof).
inline SelectionResult ttest_select(const Dataset& ds, const PatchGrid& grid,
                                    std::size_t m) {
  require_square(m);
  if (m > grid.size()) throw InvalidArgument("M exceeds the number of patches");
  const TStatistics stats = ttest_statistics(ds, grid);
  std::vector<double> keys(stats.t.size());
  for (std::size_t k = 0; k < keys.size(); ++k) keys[k] = std::abs(stats.t[k]);
  SelectionResult out;
  out.method = SelectionMethod::ttest;
  out.grid = grid;
  out.zero_variance_patches = stats.zero_variance;
  out.chosen = detail::top_indices(keys, m);
  for (std::size_t k : out.chosen) out.scores.push_back(keys[k]);
  return out;
}

}  // namespace patchkit
