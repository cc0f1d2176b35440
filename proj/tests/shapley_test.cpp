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

#include "patchkit/shapley.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "gtest/gtest.h"
#include "patchkit/errors.hpp"
#include "patchkit/rng.hpp"
#include "patchkit/surrogate.hpp"

namespace patchkit {
namespace {

Volume RandomVolume(Dims d, Rng& rng) {
  std::vector<float> v(d.product());
  for (float& x : v) x = static_cast<float>(rng.uniform(0.1, 1.0));
  return Volume(d, std::move(v));
}

// Disjoint boxes along x of a (4n x 3 x 2) volume.
std::vector<Region> Slabs(std::size_t n) {
  std::vector<Region> rs;
  for (std::size_t i = 0; i < n; ++i) rs.push_back({{4 * i, 0, 0}, {4, 3, 2}});
  return rs;
}

FunctionPredictor Additive(std::vector<Region> rs, std::vector<double> w, double bias) {
  return FunctionPredictor([rs, w, bias](const Volume& v) {
    double s = bias;
    for (std::size_t i = 0; i < rs.size(); ++i) s += w[i] * region_mean(v, rs[i]);
    return s;
  });
}

// Shapley by the permutation definition: average marginal contribution over
// every ordering of the players.
std::vector<double> PermutationShapley(const Predictor& f, const Volume& v,
                                       const std::vector<Region>& rs) {
  const std::size_t n = rs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> phi(n, 0.0);
  double perms = 0;
  do {
    std::vector<Region> absent(rs.begin(), rs.end());
    std::vector<bool> present(n, false);
    auto value = [&] {
      std::vector<Region> z;
      for (std::size_t i = 0; i < n; ++i)
        if (!present[i]) z.push_back(rs[i]);
      return f.predict(perturb_zero(v, z))[1];
    };
    double prev = value();
    for (std::size_t i : order) {
      present[i] = true;
      const double cur = value();
      phi[i] += cur - prev;
      prev = cur;
    }
    perms += 1;
  } while (std::next_permutation(order.begin(), order.end()));
  for (double& p : phi) p /= perms;
  return phi;
}

// A deliberately non-additive black box over the first three slabs.
FunctionPredictor Interacting() {
  const auto rs = Slabs(3);
  return FunctionPredictor([rs](const Volume& v) {
    const double a = region_mean(v, rs[0]), b = region_mean(v, rs[1]), c = region_mean(v, rs[2]);
    return 1.0 / (1.0 + std::exp(-(2.0 * a * b - c + 0.5 * a * c)));
  });
}

TEST(ShapleyTest, AdditiveProbeGivesWeightedMeans) {
  Rng rng(1);
  for (std::size_t n : {3u, 4u, 8u}) {
    const Volume v = RandomVolume({4 * n, 3, 2}, rng);
    const auto rs = Slabs(n);
    std::vector<double> w(n);
    for (double& x : w) x = rng.uniform(-0.05, 0.05);
    const auto f = Additive(rs, w, 0.5);
    const auto s = exact_shapley(f, v, rs);
    EXPECT_EQ(s.evaluations, std::size_t{1} << n);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(s.values[i], w[i] * region_mean(v, rs[i]), 1e-6);
    }
  }
}

TEST(ShapleyTest, ThreeRegionProbeValues) {
  // Constant volume of 1.0, so region means are 1 and S = w exactly.
  const Volume v(Dims{12, 3, 2}, std::vector<float>(72, 1.0f));
  const auto f = Additive(Slabs(3), {0.2, -0.1, 0.2}, 0.2);
  const auto s = exact_shapley(f, v, Slabs(3));
  EXPECT_NEAR(s.values[0], 0.2, 1e-12);
  EXPECT_NEAR(s.values[1], -0.1, 1e-12);
  EXPECT_NEAR(s.values[2], 0.2, 1e-12);
}

TEST(ShapleyTest, MatchesPermutationDefinition) {
  Rng rng(2);
  const auto f = Interacting();
  for (std::size_t n : {3u, 5u}) {
    const Volume v = RandomVolume({4 * n, 3, 2}, rng);
    const auto rs = Slabs(n);
    const auto s = exact_shapley(f, v, rs);
    const auto ref = PermutationShapley(f, v, rs);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(s.values[i], ref[i], 1e-12);
  }
}

TEST(ShapleyTest, AxiomsHoldOnRandomInstances) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    const auto rs = Slabs(n);
    Volume v = RandomVolume({4 * n, 3, 2}, rng);
    std::vector<double> w(n), u(n);
    for (double& x : w) x = rng.uniform(-1, 1);
    for (double& x : u) x = rng.uniform(-1, 1);
    const std::size_t null_player = rng.below(n);
    w[null_player] = 0.0;
    const double k = rng.uniform(0.5, 3.0);
    auto logit = [&](const std::vector<double>& c) {
      return FunctionPredictor([rs, c, k](const Volume& x) {
        double z = 0;
        for (std::size_t i = 0; i < rs.size(); ++i) z += c[i] * region_mean(x, rs[i]);
        return 1.0 / (1.0 + std::exp(-k * z * z * z));
      });
    };
    const auto f = logit(w);
    const auto g = logit(u);
    const auto sf = exact_shapley(f, v, rs).values;

    // Efficiency.
    const double full = f.predict(v)[1];
    const double empty = f.predict(perturb_zero(v, rs))[1];
    EXPECT_NEAR(std::accumulate(sf.begin(), sf.end(), 0.0), full - empty, 1e-6);
    // Null player.
    EXPECT_NEAR(sf[null_player], 0.0, 1e-6);
    // Linearity, via a convex mixture so the output stays a probability.
    const double a = rng.uniform();
    const FunctionPredictor mix([&](const Volume& x) {
      return a * f.predict(x)[1] + (1 - a) * g.predict(x)[1];
    });
    const auto sg = exact_shapley(g, v, rs).values;
    const auto sm = exact_shapley(mix, v, rs).values;
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(sm[i], a * sf[i] + (1 - a) * sg[i], 1e-6);
  }
}

TEST(ShapleyTest, SymmetricPlayersShareValue) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto rs = Slabs(4);
    // Players 1 and 2 hold identical content and enter f symmetrically.
    std::vector<float> vox(16 * 3 * 2);
    for (float& x : vox) x = static_cast<float>(rng.uniform(0.1, 1.0));
    Volume base(Dims{16, 3, 2}, vox);
    for (std::size_t z = 0; z < 2; ++z)
      for (std::size_t y = 0; y < 3; ++y)
        for (std::size_t x = 0; x < 4; ++x) vox[(z * 3 + y) * 16 + 8 + x] = base.at(4 + x, y, z);
    const Volume v(Dims{16, 3, 2}, vox);
    const FunctionPredictor f([rs](const Volume& x) {
      const double b = region_mean(x, rs[1]), c = region_mean(x, rs[2]);
      return 1.0 / (1.0 + std::exp(-(b * c + region_mean(x, rs[0]) - region_mean(x, rs[3]))));
    });
    const auto s = exact_shapley(f, v, rs).values;
    EXPECT_NEAR(s[1], s[2], 1e-6);
  }
}

TEST(ShapleyTest, BitIdenticalAcrossThreadCounts) {
  Rng rng(5);
  const auto rs = Slabs(8);
  const Volume v = RandomVolume({32, 3, 2}, rng);
  const auto f = Interacting();
  const auto one = exact_shapley(f, v, rs, {1, 20}).values;
  for (std::size_t t : {2u, 3u, 8u}) {
    const auto many = exact_shapley(f, v, rs, {t, 20}).values;
    for (std::size_t i = 0; i < rs.size(); ++i) {
      EXPECT_EQ(std::memcmp(&one[i], &many[i], sizeof(double)), 0) << t;
    }
  }
}

TEST(ShapleyTest, RejectsTooManyPlayersAndBadOutputs) {
  Rng rng(6);
  std::vector<Region> rs;
  for (std::size_t i = 0; i < 21; ++i) rs.push_back({{i, 0, 0}, {1, 1, 1}});
  const Volume v = RandomVolume({21, 1, 1}, rng);
  const FunctionPredictor half([](const Volume&) { return 0.5; });
  EXPECT_THROW(exact_shapley(half, v, rs), BudgetExceeded);

  const FunctionPredictor broken([](const Volume&) { return 1.5; });
  EXPECT_THROW(exact_shapley(broken, v, std::span(rs).first(2)), ContractViolation);
  const FunctionPredictor nan([](const Volume&) { return std::nan(""); });
  EXPECT_THROW(exact_shapley(nan, v, std::span(rs).first(2)), ContractViolation);

  const std::vector<Region> outside{{{20, 0, 0}, {2, 1, 1}}};
  EXPECT_THROW(exact_shapley(half, v, outside), InvalidArgument);
}

TEST(ShapleyTest, SiblingContextIsAlwaysZeroed) {
  Rng rng(7);
  const auto rs = Slabs(4);
  const Volume v = RandomVolume({16, 3, 2}, rng);
  const auto f = Interacting();
  const std::vector<Region> players{rs[0], rs[1]};
  const std::vector<Region> context{rs[2]};
  const auto s = sibling_shapley(f, v, players, context);
  const auto ref = exact_shapley(f, perturb_zero(v, context), players);
  EXPECT_EQ(s.evaluations, 4u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(s.values[i], ref.values[i], 1e-12);

  std::vector<Region> nine;
  for (std::size_t i = 0; i < 9; ++i) nine.push_back({{i, 0, 0}, {1, 1, 1}});
  EXPECT_THROW(sibling_shapley(f, v, nine, {}), InvalidArgument);
}

// ---------------------------------------------------------------------------
// Recursive estimator.

SurrogateModel AdditiveSurrogate(const PatchGrid& g, Rng& rng, double scale) {
  SurrogateParams p;
  p.grid = g;
  p.link = Link::identity;
  p.bias = 0.5;
  p.weights.resize(g.size());
  for (double& w : p.weights) w = rng.uniform(-scale, scale);
  return SurrogateModel(p);
}

TEST(RecursiveTest, FullRefinementRecoversLeafMarginals) {
  Rng rng(8);
  const Volume v = RandomVolume({64, 64, 64}, rng);
  const PatchGrid g = make_grid(v.dims(), 8);
  const auto f = AdditiveSurrogate(g, rng, 0.5 / 512);
  RecursiveOptions o;
  o.leaf_edge = 8;
  o.rule = RefineRule::refine_at_or_above;
  o.tau = -std::numeric_limits<double>::infinity();
  const auto map = recursive_attribution(f, v, o);
  // 1 + 8 + 64 internal nodes, 2^8 coalitions each.
  EXPECT_EQ(map.evaluations, 18688u);
  const auto means = patch_means(v, g);
  for (std::size_t k = 0; k < g.size(); ++k) {
    EXPECT_NEAR(map.values[k], f.params().weights[k] * means[k], 1e-5);
    EXPECT_TRUE(map.refined_mask[k]);
  }
}

TEST(RecursiveTest, NoRefinementSpendsOneLevel) {
  Rng rng(9);
  const Volume v = RandomVolume({32, 32, 32}, rng);
  const PatchGrid g = make_grid(v.dims(), 8);
  const auto f = AdditiveSurrogate(g, rng, 0.01);
  RecursiveOptions o;
  o.rule = RefineRule::refine_at_or_above;
  o.tau = std::numeric_limits<double>::infinity();
  const auto trace = recursive_attribution_trace(f, v, o);
  EXPECT_EQ(trace.map.evaluations, 256u);
  ASSERT_EQ(trace.nodes.size(), 8u);
  // Each leaf inherits its octant's value; octant values sum to f(v) - f(0).
  double total = 0;
  for (const auto& n : trace.nodes) total += n.value;
  const double full = f.predict(v)[1];
  const double empty = f.predict(Volume::zeros(v.dims()))[1];
  EXPECT_NEAR(total, full - empty, 1e-9);
  for (std::size_t k = 0; k < g.size(); ++k) {
    for (const auto& n : trace.nodes) {
      if (n.region.contains(g.regions[k].center())) EXPECT_EQ(trace.map.values[k], n.value);
    }
    EXPECT_FALSE(trace.map.refined_mask[k]);
  }
}

TEST(RecursiveTest, RefinementFollowsRule) {
  Rng rng(10);
  const Volume v = RandomVolume({32, 32, 32}, rng);
  const PatchGrid g = make_grid(v.dims(), 8);
  SurrogateParams p;
  p.grid = g;
  p.link = Link::identity;
  p.bias = 0.5;
  p.weights.assign(g.size(), 0.0);
  p.weights[g.index_of(3, 0, 0)] = -0.3;  // only the +x low-y low-z octant is negative
  const SurrogateModel f(p);
  RecursiveOptions o;
  o.tau = 0.0;
  o.rule = RefineRule::refine_below;
  const auto trace = recursive_attribution_trace(f, v, o);
  // Level 1, then one refined octant whose leaf-level children are final.
  EXPECT_EQ(trace.map.evaluations, 512u);
  EXPECT_NEAR(trace.map.values[g.index_of(3, 0, 0)], -0.3 * patch_means(v, g)[g.index_of(3, 0, 0)],
              1e-12);
  EXPECT_TRUE(trace.map.refined_mask[g.index_of(3, 0, 0)]);
  EXPECT_FALSE(trace.map.refined_mask[g.index_of(0, 0, 0)]);

  o.rule = RefineRule::refine_at_or_above;
  EXPECT_EQ(recursive_attribution(f, v, o).evaluations, 256u + 7u * 256u);
}

TEST(RecursiveTest, MaxDepthStopsRefinement) {
  Rng rng(11);
  const Volume v = RandomVolume({64, 64, 64}, rng);
  const auto f = AdditiveSurrogate(make_grid(v.dims(), 8), rng, 1e-3);
  RecursiveOptions o;
  o.rule = RefineRule::refine_at_or_above;
  o.tau = -std::numeric_limits<double>::infinity();
  o.max_depth = 2;
  EXPECT_EQ(recursive_attribution(f, v, o).evaluations, 9u * 256u);
}

TEST(RecursiveTest, BudgetAndTauChecks) {
  Rng rng(12);
  const Volume v = RandomVolume({32, 32, 32}, rng);
  const auto f = AdditiveSurrogate(make_grid(v.dims(), 8), rng, 1e-3);
  RecursiveOptions o;
  o.rule = RefineRule::refine_at_or_above;
  o.tau = -std::numeric_limits<double>::infinity();
  o.budget = 1000;
  EXPECT_THROW(recursive_attribution(f, v, o), BudgetExceeded);
  o.budget = 100000;
  o.tau = std::nan("");
  EXPECT_THROW(recursive_attribution(f, v, o), InvalidArgument);
}

TEST(RecursiveTest, SingleLeafVolume) {
  Rng rng(13);
  const Volume v = RandomVolume({8, 8, 8}, rng);
  const auto f = AdditiveSurrogate(make_grid(v.dims(), 8), rng, 0.3);
  const auto map = recursive_attribution(f, v, {});
  EXPECT_EQ(map.evaluations, 2u);
  ASSERT_EQ(map.values.size(), 1u);
  EXPECT_NEAR(map.values[0], f.params().weights[0] * region_mean(v, map.grid.regions[0]), 1e-12);
}

TEST(RecursiveTest, ThreadCountDoesNotChangeMaps) {
  Rng rng(14);
  const Volume v = RandomVolume({32, 32, 32}, rng);
  const PatchGrid g = make_grid(v.dims(), 8);
  SurrogateParams p;
  p.grid = g;
  p.link = Link::logistic;
  p.weights.resize(g.size());
  for (double& w : p.weights) w = rng.uniform(-2, 2);
  const SurrogateModel f(p);
  RecursiveOptions o;
  o.tau = 0.0;
  const auto a = recursive_attribution(f, v, o);
  o.threads = 4;
  const auto b = recursive_attribution(f, v, o);
  EXPECT_EQ(a.evaluations, b.evaluations);
  EXPECT_EQ(std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(double)), 0);
}

TEST(RecursiveTest, AttributionMapJsonRoundTrip) {
  AttributionMap m;
  m.grid = make_grid({16, 16, 8}, 8);
  m.values = {0.25, -1e-17, 3.0, 0.0};
  m.refined_mask = {true, false, true, false};
  m.evaluations = 42;
  m.tau = -std::numeric_limits<double>::infinity();
  m.rule = RefineRule::refine_at_or_above;
  const json j = m;
  EXPECT_EQ(j["tau"], "-inf");
  const auto back = json::parse(j.dump()).get<AttributionMap>();
  EXPECT_EQ(back.values, m.values);
  EXPECT_EQ(back.refined_mask, m.refined_mask);
  EXPECT_EQ(back.grid, m.grid);
  EXPECT_EQ(back.evaluations, 42u);
  EXPECT_TRUE(std::isinf(back.tau) && back.tau < 0);
  EXPECT_EQ(back.rule, RefineRule::refine_at_or_above);
}

// ---------------------------------------------------------------------------
// Cohorts and selection.

AttributionMap MapWith(std::vector<double> values) {
  AttributionMap m;
  m.grid = make_grid({8, 8, 8}, 2);
  values.resize(m.grid.size(), 0.0);
  m.values = values;
  m.refined_mask.assign(values.size(), true);
  return m;
}

TEST(CohortTest, AveragesIncludedMapsOnly) {
  const std::vector<AttributionMap> maps{MapWith({1, 2}), MapWith({3, 6}), MapWith({100, 100})};
  const auto avg = cohort_average(maps, {true, true, false});
  EXPECT_DOUBLE_EQ(avg.values[0], 2.0);
  EXPECT_DOUBLE_EQ(avg.values[1], 4.0);
  EXPECT_THROW(cohort_average(maps, {false, false, false}), NoPositiveSamples);
  EXPECT_THROW(cohort_average(maps, {true}), InvalidArgument);
}

TEST(SelectTest, RejectsNonSquareM) {
  const auto m = MapWith({});
  try {
    select_top(m, 30);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("M must be a perfect square"), std::string::npos);
  }
  EXPECT_THROW(select_top(m, 81), InvalidArgument);  // only 64 leaves
  EXPECT_NO_THROW(select_top(m, 64));
}

TEST(SelectTest, RankKeysAndTies) {
  auto m = MapWith({0.1, -0.9, 0.5, 0.5, -0.2});
  const auto mag = select_top(m, 4, RankKey::magnitude);
  EXPECT_EQ(mag.chosen, (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(mag.side(), 2u);
  const auto sig = select_top(m, 4, RankKey::signed_value);
  EXPECT_EQ(sig.chosen, (std::vector<std::size_t>{2, 3, 0, 5}));
  // All-equal map: lowest indices first.
  const auto flat = select_top(MapWith({}), 9);
  EXPECT_EQ(flat.chosen, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_EQ(select_top(m, 1).grid_order(), (std::vector<std::size_t>{1}));
}

TEST(SelectTest, SelectionJsonRoundTrip) {
  const auto sel = select_top(MapWith({0.3, -0.4, 0.1, 0.2}), 4);
  const auto back = json::parse(json(sel).dump()).get<SelectionResult>();
  EXPECT_EQ(back.chosen, sel.chosen);
  EXPECT_EQ(back.scores, sel.scores);
  EXPECT_EQ(back.grid, sel.grid);
  EXPECT_EQ(back.method, SelectionMethod::shap);
}

Dataset TinyDataset(const std::vector<std::vector<float>>& per_volume_patch_values,
                    const std::vector<int>& labels) {
  // 2x1x1 patches of edge 1: each volume is just its patch values.
  Dataset ds;
  for (const auto& row : per_volume_patch_values) ds.volumes.emplace_back(Dims{2, 1, 1}, row);
  ds.labels = labels;
  return ds;
}

TEST(TTestTest, MatchesHandComputedStatistic) {
  const Dataset ds = TinyDataset({{1, 5}, {2, 5}, {3, 5}, {5, 5}, {6, 7}, {7, 9}},
                                 {0, 0, 0, 1, 1, 1});
  const PatchGrid g = make_grid({2, 1, 1}, 1);
  const auto st = ttest_statistics(ds, g);
  // Patch 0: means 2 and 6, each class has ss = 2, pooled var = 1, se = sqrt(2/3).
  EXPECT_NEAR(st.t[0], 4.0 / std::sqrt(2.0 / 3.0), 1e-12);
  // Patch 1: means 5 and 7, ss0 = 0, ss1 = 8, pooled var = 2, se = sqrt(4/3).
  EXPECT_NEAR(st.t[1], 2.0 / std::sqrt(4.0 / 3.0), 1e-12);
  EXPECT_EQ(st.zero_variance, 0u);
  EXPECT_EQ(ttest_select(ds, g, 1).chosen, (std::vector<std::size_t>{0}));
}

TEST(TTestTest, ZeroVariancePatches) {
  const Dataset ds = TinyDataset({{1, 4}, {1, 4}, {1, 5}, {1, 5}}, {0, 0, 1, 1});
  const PatchGrid g = make_grid({2, 1, 1}, 1);
  const auto st = ttest_statistics(ds, g);
  EXPECT_EQ(st.zero_variance, 2u);
  EXPECT_EQ(st.t[0], 0.0);
  EXPECT_EQ(st.t[1], kTSentinel);
  const auto sel = ttest_select(ds, g, 1);
  EXPECT_EQ(sel.chosen, (std::vector<std::size_t>{1}));
  EXPECT_EQ(sel.zero_variance_patches, 2u);
  EXPECT_THROW(ttest_statistics(TinyDataset({{1, 1}, {2, 2}, {3, 3}}, {0, 0, 1}), g),
               InvalidArgument);
}

}  // namespace
}  // namespace patchkit
