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

// Stage commands (gen, surrogate, explain, select, train, eval, compare) over
// one declarative JSON run configuration. Each stage reads its prerequisites
// from the output directory, overwrites only its own artifacts, and echoes
// the resolved configuration to run.json.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "patchkit/errors.hpp"
#include "patchkit/eval.hpp"
#include "patchkit/json_io.hpp"
#include "patchkit/op_count.hpp"
#include "patchkit/parallel.hpp"
#include "patchkit/phantom.hpp"
#include "patchkit/render.hpp"
#include "patchkit/rng.hpp"
#include "patchkit/shapley.hpp"
#include "patchkit/surrogate.hpp"
#include "patchkit/train.hpp"

namespace patchkit {

namespace fs = std::filesystem;

// Exit codes shared with the CLI.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitDependency = 3,
  kExitNumerical = 4,
};

inline json default_config() {
  return json::parse(R"({
    "seed": 1234,
    "threads": 1,
    "out_dir": "run",
    "data_dir": null,
    "phantom": {
      "dims": [64, 64, 64],
      "n_per_class": 100,
      "lesion_regions": [{"origin": [36, 20, 28], "size": [12, 12, 12]}],
      "lesion_delta": 0.4,
      "noise_sigma": 0.05,
      "smooth_radius": 1
    },
    "grid": {"patch_edge": 8},
    "surrogate": {"link": "logistic", "l2": 0.01, "max_iter": 20000, "tol": 1e-7},
    "explain": {
      "tau": null,
      "rule": "refine_below",
      "budget": 100000,
      "max_depth": 3,
      "cohort": "predicted",
      "rank": "magnitude",
      "max_volumes": 0
    },
    "select": {"method": "shap", "M": 36},
    "net": {"embed_dim": 64, "depth": 4},
    "train": {
      "epochs": 30,
      "batch_size": 8,
      "lr_max": 1e-4,
      "lr_min": 1e-6,
      "holdout": 0.2,
      "val_fraction": 0.1
    },
    "eval": {"k": 5, "repeats": 10, "stratified": true},
    "compare": {"M": [16, 36, 64], "methods": ["shap", "ttest"]}
  })");
}

// Recursive merge: objects merge key-wise, everything else replaces.
inline void merge_config(json& base, const json& patch) {
  if (!patch.is_object() || !base.is_object()) {
    base = patch;
    return;
  }
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (base.contains(it.key())) {
      merge_config(base[it.key()], it.value());
    } else {
      base[it.key()] = it.value();
    }
  }
}

// "a.b.c=value"; the value is parsed as JSON when possible, else a string.
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must look like key.path=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  std::string pointer = "/" + key;
  for (char& c : pointer) {
    if (c == '.') c = '/';
  }
  cfg[json::json_pointer(pointer)] = value;
}

// Reads a configuration file layered over the defaults. A run.json written by
// an earlier command is accepted as well (its "config" member is used).
inline json load_config_file(const fs::path& path) {
  json file;
  try {
    file = json::parse(detail::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("--config", "malformed JSON in " + path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError("--config", e.what());
  }
  if (!file.is_object()) throw ConfigError("--config", "top level must be an object");
  if (file.contains("command") && file.contains("config")) file = file["config"];
  json cfg = default_config();
  merge_config(cfg, file);
  return cfg;
}

struct ExplainSettings {
  std::optional<double> tau;
  RefineRule rule = RefineRule::refine_below;
  std::size_t budget = 100000;
  std::size_t max_depth = 3;
  bool cohort_ground_truth = false;
  RankKey rank = RankKey::magnitude;
  std::size_t max_volumes = 0;  // 0 = every cohort volume
};

struct RunConfig {
  json resolved;  // the full configuration with derived seeds filled in
  fs::path out_dir;
  fs::path data_dir;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  PhantomSpec phantom;
  std::size_t patch_edge = 8;
  SurrogateTrainOptions surrogate;
  ExplainSettings explain;
  SelectionMethod method = SelectionMethod::shap;
  std::size_t M = 36;
  PatchNetConfig net;
  TrainSchedule schedule;
  double holdout = 0.2;
  double val_fraction = 0.1;
  std::uint64_t split_seed = 0;
  std::size_t k = 5, repeats = 10;
  bool stratified = true;
  std::uint64_t fold_seed = 0;
  std::vector<std::size_t> compare_M;
  std::vector<SelectionMethod> compare_methods;

  PatchNetConfig net_for(std::size_t m) const {
    PatchNetConfig c = net;
    c.patch_edge = patch_edge;
    c.patch_count = m;
    return c;
  }
};

namespace detail {

template <typename T>
T field(const json& cfg, const std::string& path) {
  std::string pointer = "/" + path;
  for (char& c : pointer) {
    if (c == '.') c = '/';
  }
  const json::json_pointer ptr(pointer);
  if (!cfg.contains(ptr)) throw ConfigError(path, "missing");
  try {
    return cfg.at(ptr).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(path, std::string("wrong type: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
}

template <typename T>
T parse_enum(const json& cfg, const std::string& path, T (*parse)(const std::string&)) {
  try {
    return parse(field<std::string>(cfg, path));
  } catch (const InvalidArgument& e) {
    throw ConfigError(path, e.what());
  }
}

inline void check(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path, what);
}

inline std::uint64_t seed_or(const json& cfg, const std::string& path, std::uint64_t fallback) {
  std::string pointer = "/" + path;
  for (char& c : pointer) {
    if (c == '.') c = '/';
  }
  const json::json_pointer ptr(pointer);
  if (!cfg.contains(ptr) || cfg.at(ptr).is_null()) return fallback;
  return field<std::uint64_t>(cfg, path);
}

}  // namespace detail

// Validates and types a configuration. Errors name the offending field.
inline RunConfig parse_config(const json& raw) {
  using detail::check;
  using detail::field;
  RunConfig c;
  json cfg = raw;
  c.seed = field<std::uint64_t>(cfg, "seed");
  c.threads = field<std::size_t>(cfg, "threads");
  check(c.threads >= 1, "threads", "must be >= 1");
  c.out_dir = field<std::string>(cfg, "out_dir");
  c.data_dir = cfg.contains("data_dir") && !cfg["data_dir"].is_null()
                   ? fs::path(field<std::string>(cfg, "data_dir"))
                   : c.out_dir / "data";

  // Sub-seeds default to streams of the global seed.
  cfg["phantom"]["seed"] = detail::seed_or(cfg, "phantom.seed", derive_seed(c.seed, 1));
  cfg["net"]["seed"] = detail::seed_or(cfg, "net.seed", derive_seed(c.seed, 2));
  cfg["train"]["seed"] = detail::seed_or(cfg, "train.seed", derive_seed(c.seed, 3));
  cfg["train"]["split_seed"] = detail::seed_or(cfg, "train.split_seed", derive_seed(c.seed, 4));
  cfg["eval"]["seed"] = detail::seed_or(cfg, "eval.seed", derive_seed(c.seed, 5));

  try {
    c.phantom = field<PhantomSpec>(cfg, "phantom");
    c.phantom.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError("phantom", e.what());
  }
  c.patch_edge = field<std::size_t>(cfg, "grid.patch_edge");
  check(c.patch_edge >= 1 && c.patch_edge <= c.phantom.dims.min(), "grid.patch_edge",
        "must lie in [1, smallest phantom dimension]");

  c.surrogate.link = detail::parse_enum(cfg, "surrogate.link", parse_link);
  c.surrogate.l2 = field<double>(cfg, "surrogate.l2");
  c.surrogate.max_iter = field<std::size_t>(cfg, "surrogate.max_iter");
  c.surrogate.tol = field<double>(cfg, "surrogate.tol");
  check(c.surrogate.l2 >= 0, "surrogate.l2", "must be >= 0");

  if (!cfg["explain"].contains("tau") || cfg["explain"]["tau"].is_null()) {
    c.explain.tau.reset();
  } else {
    try {
      c.explain.tau = real_from_json(cfg["explain"]["tau"]);
    } catch (const std::exception& e) {
      throw ConfigError("explain.tau", e.what());
    }
    check(!std::isnan(*c.explain.tau), "explain.tau", "must not be NaN");
  }
  c.explain.rule = detail::parse_enum(cfg, "explain.rule", parse_refine_rule);
  c.explain.budget = field<std::size_t>(cfg, "explain.budget");
  c.explain.max_depth = field<std::size_t>(cfg, "explain.max_depth");
  check(c.explain.max_depth >= 1, "explain.max_depth", "must be >= 1");
  const auto cohort = field<std::string>(cfg, "explain.cohort");
  check(cohort == "predicted" || cohort == "ground_truth", "explain.cohort",
        "must be \"predicted\" or \"ground_truth\"");
  c.explain.cohort_ground_truth = cohort == "ground_truth";
  c.explain.rank = detail::parse_enum(cfg, "explain.rank", parse_rank_key);
  c.explain.max_volumes = field<std::size_t>(cfg, "explain.max_volumes");

  c.method = detail::parse_enum(cfg, "select.method", parse_selection_method);
  c.M = field<std::size_t>(cfg, "select.M");
  check(is_perfect_square(c.M), "select.M", "M must be a perfect square");
  const Index3 counts{c.phantom.dims.x / c.patch_edge, c.phantom.dims.y / c.patch_edge,
                      c.phantom.dims.z / c.patch_edge};
  check(c.M <= counts.product(), "select.M", "M exceeds the number of grid patches");

  c.net.embed_dim = field<std::size_t>(cfg, "net.embed_dim");
  c.net.depth = field<std::size_t>(cfg, "net.depth");
  c.net.seed = field<std::uint64_t>(cfg, "net.seed");
  check(c.net.embed_dim >= 1, "net.embed_dim", "must be >= 1");
  c.net.patch_edge = c.patch_edge;
  c.net.patch_count = c.M;

  c.schedule.epochs = field<std::size_t>(cfg, "train.epochs");
  c.schedule.batch_size = field<std::size_t>(cfg, "train.batch_size");
  c.schedule.lr_max = field<double>(cfg, "train.lr_max");
  c.schedule.lr_min = field<double>(cfg, "train.lr_min");
  c.schedule.seed = field<std::uint64_t>(cfg, "train.seed");
  check(c.schedule.batch_size >= 1, "train.batch_size", "must be >= 1");
  check(c.schedule.lr_max > 0 && c.schedule.lr_min >= 0 && c.schedule.lr_min <= c.schedule.lr_max,
        "train.lr_max", "need lr_max > 0 and 0 <= lr_min <= lr_max");
  c.holdout = field<double>(cfg, "train.holdout");
  check(c.holdout > 0 && c.holdout < 1, "train.holdout", "must lie in (0, 1)");
  c.val_fraction = field<double>(cfg, "train.val_fraction");
  check(c.val_fraction >= 0 && c.val_fraction < 1, "train.val_fraction", "must lie in [0, 1)");
  c.split_seed = field<std::uint64_t>(cfg, "train.split_seed");

  c.k = field<std::size_t>(cfg, "eval.k");
  c.repeats = field<std::size_t>(cfg, "eval.repeats");
  c.stratified = field<bool>(cfg, "eval.stratified");
  c.fold_seed = field<std::uint64_t>(cfg, "eval.seed");
  check(c.k >= 2 && c.k <= c.phantom.n_per_class, "eval.k", "must lie in [2, n_per_class]");
  check(c.repeats >= 1, "eval.repeats", "must be >= 1");

  c.compare_M = field<std::vector<std::size_t>>(cfg, "compare.M");
  for (std::size_t i = 0; i < c.compare_M.size(); ++i) {
    check(is_perfect_square(c.compare_M[i]), "compare.M." + std::to_string(i),
          "M must be a perfect square");
    check(c.compare_M[i] <= counts.product(), "compare.M." + std::to_string(i),
          "M exceeds the number of grid patches");
  }
  for (const auto& m : field<std::vector<std::string>>(cfg, "compare.methods")) {
    try {
      c.compare_methods.push_back(parse_selection_method(m));
    } catch (const InvalidArgument& e) {
      throw ConfigError("compare.methods", e.what());
    }
  }
  c.resolved = cfg;
  return c;
}

// ---------------------------------------------------------------------------
// Artifact locations under the output directory.

struct Artifacts {
  fs::path out, data;
  fs::path manifest() const { return data / "manifest.json"; }
  fs::path surrogate() const { return out / "surrogate.json"; }
  fs::path attribution() const { return out / "attribution.json"; }
  fs::path selection() const { return out / "selection.json"; }
  fs::path checkpoint() const { return out / "checkpoint.pnc"; }
  fs::path train_log() const { return out / "train_log.jsonl"; }
  fs::path train_report() const { return out / "train_report.json"; }
  fs::path eval_report() const { return out / "eval_report.json"; }
  fs::path roc_csv() const { return out / "roc.csv"; }
  fs::path compare_json() const { return out / "compare.json"; }
  fs::path compare_csv() const { return out / "compare.csv"; }
  fs::path run_json() const { return out / "run.json"; }
};

inline Artifacts artifacts_for(const RunConfig& c) { return {c.out_dir, c.data_dir}; }

inline void require_artifact(const fs::path& p, const std::string& stage) {
  if (!fs::exists(p)) {
    throw StageDependency("missing prerequisite " + p.string() + " (run `" + stage + "` first)");
  }
}

inline json read_json(const fs::path& p) {
  try {
    return json::parse(detail::read_file(p));
  } catch (const json::parse_error& e) {
    throw IoError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& p, const json& j) {
  detail::write_file(p, j.dump(2) + "\n");
}

// Everything a downstream stage needs from `gen`, plus the fixed holdout
// split (indices into the manifest entries).
struct LoadedData {
  DatasetManifest manifest;
  Dataset all;
  std::vector<std::size_t> train_idx, test_idx;
  Dataset train() const { return all.subset(train_idx); }
  Dataset test() const { return all.subset(test_idx); }
};

inline LoadedData load_data(const RunConfig& c) {
  const Artifacts a = artifacts_for(c);
  require_artifact(a.manifest(), "gen");
  LoadedData d;
  d.manifest = read_manifest(a.manifest());
  d.all = load_dataset(d.manifest, a.data);
  std::tie(d.train_idx, d.test_idx) = stratified_split(d.all.labels, c.holdout, c.split_seed);
  return d;
}

inline void write_run_json(const RunConfig& c, const std::string& command) {
  write_json(artifacts_for(c).run_json(), json{{"command", command}, {"config", c.resolved}});
}

// ---------------------------------------------------------------------------
// Stages.

inline void cmd_gen(const RunConfig& c, std::ostream& log) {
  const Artifacts a = artifacts_for(c);
  fs::create_directories(a.out);
  const auto m = generate(c.phantom, a.data, c.threads);
  log << "gen: wrote " << m.entries.size() << " volumes to " << a.data.string() << "\n";
  write_run_json(c, "gen");
}

inline void cmd_surrogate(const RunConfig& c, std::ostream& log) {
  const Artifacts a = artifacts_for(c);
  const LoadedData d = load_data(c);
  const PatchGrid grid = make_grid(d.all.dims(), c.patch_edge);
  const SurrogateFit fit = surrogate_train(d.train(), grid, c.surrogate);
  if (!fit.converged) {
    log << "surrogate: warning: not converged after " << fit.iterations
        << " iterations; keeping the best iterate\n";
  }
  json j = fit.params;
  j["fit"] = {{"iterations", fit.iterations}, {"converged", fit.converged},
              {"loss", fit.loss}, {"train_accuracy", fit.train_accuracy}};
  write_json(a.surrogate(), j);
  log << "surrogate: train accuracy " << fit.train_accuracy << ", loss " << fit.loss << "\n";
  write_run_json(c, "surrogate");
}

struct ExplainOutcome {
  AttributionMap cohort;
  std::size_t explained = 0;
  std::size_t evaluations = 0;
};

// Attribution maps for the training-split cohort (predicted or labelled class
// 1), averaged.
inline ExplainOutcome explain_cohort(const SurrogateModel& model, const Dataset& train,
                                     const RunConfig& c) {
  if (!c.explain.tau) throw ConfigError("explain.tau", "required (no default threshold)");
  RecursiveOptions opts;
  opts.leaf_edge = c.patch_edge;
  opts.tau = *c.explain.tau;
  opts.rule = c.explain.rule;
  opts.max_depth = c.explain.max_depth;
  opts.budget = c.explain.budget;
  opts.threads = c.threads;
  std::vector<AttributionMap> maps;
  std::vector<bool> include;
  ExplainOutcome out;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const bool member = c.explain.cohort_ground_truth
                            ? train.labels[i] == 1
                            : checked_readout(model.predict(train.volumes[i])) >= 0.5;
    if (!member) continue;
    if (c.explain.max_volumes && maps.size() >= c.explain.max_volumes) break;
    maps.push_back(recursive_attribution(model, train.volumes[i], opts));
    include.push_back(true);
    out.evaluations += maps.back().evaluations;
  }
  out.explained = maps.size();
  out.cohort = cohort_average(maps, include);
  return out;
}

inline void write_renders(const fs::path& dir, const std::string& prefix,
                          const std::array<GrayImage, 3>& imgs) {
  for (std::size_t i = 0; i < 3; ++i) {
    write_pgm(dir / (prefix + "_" + to_string(kPlanes[i]) + ".pgm"), imgs[i]);
  }
}

inline void cmd_explain(const RunConfig& c, std::ostream& log) {
  const Artifacts a = artifacts_for(c);
  if (!c.explain.tau) throw ConfigError("explain.tau", "required (no default threshold)");
  require_artifact(a.surrogate(), "surrogate");
  const LoadedData d = load_data(c);
  const SurrogateModel model(read_json(a.surrogate()).get<SurrogateParams>());
  const Dataset train = d.train();
  const auto t0 = std::chrono::steady_clock::now();
  const ExplainOutcome ex = explain_cohort(model, train, c);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json j = ex.cohort;
  j["cohort"] = {{"volumes", ex.explained},
                 {"mode", c.explain.cohort_ground_truth ? "ground_truth" : "predicted"}};
  write_json(a.attribution(), j);
  log << "explain: " << ex.explained << " volumes, " << ex.evaluations
      << " predictor calls, " << secs << " s\n";

  // Mid-slices of the first training volume with the top-M leaves outlined,
  // and of the attribution magnitude itself.
  const SelectionResult top = select_top(ex.cohort, c.M, c.explain.rank);
  write_renders(a.out, "explain", render_slices(train.volumes.front(), top));
  write_renders(a.out, "attribution", render_slices(ex.cohort));
  write_run_json(c, "explain");
}

inline SelectionResult make_selection(const RunConfig& c, SelectionMethod method, std::size_t m,
                                      const LoadedData& d) {
  const Artifacts a = artifacts_for(c);
  if (method == SelectionMethod::shap) {
    require_artifact(a.attribution(), "explain");
    return select_top(read_json(a.attribution()).get<AttributionMap>(), m, c.explain.rank);
  }
  return ttest_select(d.train(), make_grid(d.all.dims(), c.patch_edge), m);
}

inline void cmd_select(const RunConfig& c, std::ostream& log) {
  const Artifacts a = artifacts_for(c);
  const LoadedData d = load_data(c);
  const SelectionResult sel = make_selection(c, c.method, c.M, d);
  if (sel.zero_variance_patches) {
    log << "select: " << sel.zero_variance_patches
        << " patches have zero pooled variance (t set to 0 or the sentinel)\n";
  }
  write_json(a.selection(), sel);
  log << "select: " << to_string(sel.method) << " M=" << sel.chosen.size() << "\n";
  write_run_json(c, "select");
}

// Fraction of selected leaves touching a lesion, and of lesion-touching
// leaves that were selected.
struct Localisation {
  double precision = 0.0;
  double recall = 0.0;
};

inline Localisation localisation(const SelectionResult& sel, std::span<const Region> lesions) {
  auto touches = [&](std::size_t k) {
    for (const Region& r : lesions) {
      if (sel.grid.regions[k].intersects(r)) return true;
    }
    return false;
  };
  std::size_t hit = 0, lesion_leaves = 0;
  for (std::size_t k : sel.chosen) hit += touches(k);
  for (std::size_t k = 0; k < sel.grid.size(); ++k) lesion_leaves += touches(k);
  return {sel.chosen.empty() ? 0.0 : double(hit) / double(sel.chosen.size()),
          lesion_leaves == 0 ? 0.0 : double(hit) / double(lesion_leaves)};
}

struct HoldoutOutcome {
  TrainResult result;
  EvalReport report;
  PatchNetConfig config;
};

// Trains on the holdout training split (minus a validation slice) and scores
// the best-validation checkpoint on the holdout test split.
inline HoldoutOutcome train_holdout(const RunConfig& c, const SelectionResult& sel,
                                    const LoadedData& d) {
  HoldoutOutcome out;
  out.config = c.net_for(sel.chosen.size());
  const PatchSamples all = extract_samples(d.all, sel);
  const PatchSamples tr_all = all.subset(d.train_idx);
  const PatchSamples test = all.subset(d.test_idx);
  PatchSamples fit_set = tr_all, val_set;
  if (c.val_fraction > 0) {
    const auto [fit_idx, val_idx] =
        stratified_split(tr_all.labels, c.val_fraction, derive_seed(c.split_seed, 1));
    fit_set = tr_all.subset(fit_idx);
    val_set = tr_all.subset(val_idx);
  }
  out.result = train(fit_set, val_set.size() ? &val_set : nullptr, out.config, c.schedule);
  const ScoredSet scored{0, 0, test.labels, predict_scores(out.result.best, test)};
  out.report = make_report(std::span<const ScoredSet>(&scored, 1));
  return out;
}

inline SelectionResult read_selection(const RunConfig& c) {
  const Artifacts a = artifacts_for(c);
  require_artifact(a.selection(), "select");
  return read_json(a.selection()).get<SelectionResult>();
}

inline void cmd_train(const RunConfig& c, std::ostream& log) {
  const Artifacts a = artifacts_for(c);
  const SelectionResult sel = read_selection(c);
  const LoadedData d = load_data(c);
  const HoldoutOutcome h = train_holdout(c, sel, d);
  std::string lines;
  for (const auto& e : h.result.log) lines += to_json_line(e).dump() + "\n";
  detail::write_file(a.train_log(), lines);
  json meta{{"selection", sel}, {"best_epoch", h.result.best_epoch}};
  save_checkpoint(a.checkpoint(), h.result.best, meta);
  json report = h.report;
  report["best_epoch"] = h.result.best_epoch;
  report["diverged"] = h.result.diverged;
  write_json(a.train_report(), report);
  detail::write_file(a.roc_csv(), roc_csv(h.report.roc));
  log << "train: test ACC " << h.report.pooled.acc << ", AUC " << h.report.auc << "\n";
  write_run_json(c, "train");
  if (h.result.diverged) {
    throw NumericalFailure("training diverged (" + h.result.failure +
                           "); wrote the last good checkpoint");
  }
}

inline void cmd_eval(const RunConfig& c, std::ostream& log) {
  const Artifacts a = artifacts_for(c);
  const SelectionResult sel = read_selection(c);
  const LoadedData d = load_data(c);
  const PatchSamples all = extract_samples(d.all, sel);
  const FoldAssignment folds = kfold(all.labels, c.k, c.repeats, c.fold_seed, c.stratified);
  const PatchNetConfig cfg = c.net_for(sel.chosen.size());
  std::vector<ScoredSet> sets(c.repeats * c.k);
  std::vector<std::string> failures(sets.size());
  parallel_for(sets.size(), c.threads, [&](std::size_t u) {
    const std::size_t r = u / c.k, f = u % c.k;
    const PatchSamples tr = all.subset(folds.train_indices(r, f));
    const PatchSamples te = all.subset(folds.test_indices(r, f));
    TrainSchedule s = c.schedule;
    s.seed = derive_seed(c.schedule.seed, u);
    const TrainResult res = train(tr, nullptr, cfg, s);
    if (res.diverged) failures[u] = res.failure;
    sets[u] = {r, f, te.labels, predict_scores(res.last, te)};
  });
  for (std::size_t u = 0; u < sets.size(); ++u) {
    if (!failures[u].empty()) throw NumericalFailure("fold training diverged: " + failures[u]);
    log << "eval: repeat " << sets[u].repeat << " fold " << sets[u].fold << " ACC "
        << metrics(sets[u].labels, sets[u].scores).acc << "\n";
  }
  const EvalReport report = make_report(sets);
  json j = report;
  j["k"] = c.k;
  j["repeats"] = c.repeats;
  j["selection_note"] =
      "patches were selected once on the training split; folds reuse that selection";
  write_json(a.eval_report(), j);
  detail::write_file(a.roc_csv(), roc_csv(report.roc));
  log << "eval: ACC " << report.acc.mean << " +- " << report.acc.std << ", AUC "
      << report.fold_auc.mean << " +- " << report.fold_auc.std << "\n";
  write_run_json(c, "eval");
}

struct CompareRow {
  SelectionMethod method;
  std::size_t M = 0;
  double acc = kNaN, auc = kNaN;
  Localisation loc;
};

struct CompareOutcome {
  std::vector<CompareRow> rows;
  bool qualitative_pass = false;
  std::string verdict;
};

// The qualitative selection-size pattern: SHAP at the smallest M stays within
// 0.02 ACC of its largest M, while the t-test loses more going small.
inline void judge_compare(CompareOutcome& out) {
  auto find = [&](SelectionMethod m, std::size_t M) -> const CompareRow* {
    for (const auto& r : out.rows) {
      if (r.method == m && r.M == M) return &r;
    }
    return nullptr;
  };
  std::size_t lo = SIZE_MAX, hi = 0;
  for (const auto& r : out.rows) {
    lo = std::min(lo, r.M);
    hi = std::max(hi, r.M);
  }
  const auto *s_lo = find(SelectionMethod::shap, lo), *s_hi = find(SelectionMethod::shap, hi),
             *t_lo = find(SelectionMethod::ttest, lo), *t_hi = find(SelectionMethod::ttest, hi);
  if (!s_lo || !s_hi || !t_lo || !t_hi || lo == hi) {
    out.qualitative_pass = false;
    out.verdict = "warn: need both methods at two different M";
    return;
  }
  const double shap_gap = s_hi->acc - s_lo->acc;
  const double ttest_gap = t_hi->acc - t_lo->acc;
  const bool shap_flat = std::abs(shap_gap) <= 0.02;
  const bool ttest_trails = ttest_gap > shap_gap;
  out.qualitative_pass = shap_flat && ttest_trails;
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "%s: shap ACC(M=%zu)-ACC(M=%zu)=%.4f (%s 0.02), ttest gap=%.4f (%s shap gap)",
                out.qualitative_pass ? "pass" : "warn", hi, lo, shap_gap,
                shap_flat ? "within" : "outside", ttest_gap, ttest_trails ? ">" : "<=");
  out.verdict = buf;
}

inline CompareOutcome run_compare(const RunConfig& c, const LoadedData& d, std::ostream& log) {
  CompareOutcome out;
  for (SelectionMethod method : c.compare_methods) {
    for (std::size_t m : c.compare_M) {
      const SelectionResult sel = make_selection(c, method, m, d);
      const HoldoutOutcome h = train_holdout(c, sel, d);
      if (h.result.diverged) throw NumericalFailure("compare training diverged: " + h.result.failure);
      CompareRow row{method, m, h.report.pooled.acc, h.report.auc,
                     localisation(sel, d.manifest.ground_truth)};
      log << "compare: " << to_string(method) << " M=" << m << " ACC " << row.acc << " AUC "
          << row.auc << " lesion precision " << row.loc.precision << " recall "
          << row.loc.recall << "\n";
      out.rows.push_back(row);
    }
  }
  judge_compare(out);
  return out;
}

inline void cmd_compare(const RunConfig& c, std::ostream& log) {
  const Artifacts a = artifacts_for(c);
  const LoadedData d = load_data(c);
  const CompareOutcome out = run_compare(c, d, log);
  json rows = json::array();
  std::string csv = "method,M,acc,auc,lesion_precision,lesion_recall\n";
  char line[160];
  for (const auto& r : out.rows) {
    rows.push_back({{"method", to_string(r.method)}, {"M", r.M}, {"acc", r.acc}, {"auc", r.auc},
                    {"lesion_precision", r.loc.precision}, {"lesion_recall", r.loc.recall}});
    std::snprintf(line, sizeof(line), "%s,%zu,%.6f,%.6f,%.6f,%.6f\n", to_string(r.method).c_str(),
                  r.M, r.acc, r.auc, r.loc.precision, r.loc.recall);
    csv += line;
  }
  write_json(a.compare_json(), {{"rows", rows},
                                {"qualitative", out.qualitative_pass ? "pass" : "warn"},
                                {"verdict", out.verdict}});
  detail::write_file(a.compare_csv(), csv);
  log << "compare: " << out.verdict << "\n";
  write_run_json(c, "compare");
}

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"gen",  "surrogate", "explain", "select",
                                              "train", "eval",      "compare"};
  return names;
}

// Runs one stage and maps failures onto the exit-code table.
inline int run_command(const std::string& command, const json& config, std::ostream& log) {
  try {
    const RunConfig c = parse_config(config);
    if (command == "gen") {
      cmd_gen(c, log);
    } else if (command == "surrogate") {
      cmd_surrogate(c, log);
    } else if (command == "explain") {
      cmd_explain(c, log);
    } else if (command == "select") {
      cmd_select(c, log);
    } else if (command == "train") {
      cmd_train(c, log);
    } else if (command == "eval") {
      cmd_eval(c, log);
    } else if (command == "compare") {
      cmd_compare(c, log);
    } else {
      log << "error: unknown command " << command << "\n";
      return kExitConfig;
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const StageDependency& e) {
    log << "dependency error: " << e.what() << "\n";
    return kExitDependency;
  } catch (const NumericalFailure& e) {
    log << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace patchkit
