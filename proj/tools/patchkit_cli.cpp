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

// Command-line front end: one subcommand per pipeline stage.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "patchkit/op_count.hpp"
#include "patchkit/pipeline.hpp"

namespace {

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> threads;
  std::vector<std::string> sets;
};

// defaults < --config < --seed/--out/--threads (or PATCHKIT_THREADS) < --set
patchkit::json resolve(const GlobalFlags& g) {
  patchkit::json cfg = g.config.empty() ? patchkit::default_config()
                                        : patchkit::load_config_file(g.config);
  if (g.seed) cfg["seed"] = *g.seed;
  if (!g.out.empty()) cfg["out_dir"] = g.out;
  if (g.threads) {
    cfg["threads"] = *g.threads;
  } else if (const char* env = std::getenv("PATCHKIT_THREADS"); env && *env) {
    try {
      cfg["threads"] = std::stoul(env);
    } catch (const std::exception&) {
      throw patchkit::ConfigError("PATCHKIT_THREADS", "not an integer");
    }
  }
  for (const auto& s : g.sets) patchkit::apply_override(cfg, s);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patchkit: recursive Shapley patch localisation and PatchNet training"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--config", g.config, "JSON run configuration (or a previous run.json)");
  app.add_option("--seed", g.seed, "global seed");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--threads", g.threads, "worker threads (default: PATCHKIT_THREADS or 1)");
  app.add_option("--set", g.sets, "override a config field, e.g. --set explain.tau=0");

  const std::vector<std::pair<std::string, std::string>> stages{
      {"gen", "generate the phantom dataset"},
      {"surrogate", "fit the pooled-feature surrogate classifier"},
      {"explain", "recursive Shapley attribution over the training cohort"},
      {"select", "choose the top-M patches (shap or ttest)"},
      {"train", "train PatchNet on the holdout split"},
      {"eval", "repeated k-fold evaluation"},
      {"compare", "compare selectors across M"},
  };
  for (const auto& [name, help] : stages) {
    app.add_subcommand(name, help)->fallthrough();
  }
  bool op_json = false;
  auto* op = app.add_subcommand("op-count", "parameter and MAC accounting for the configured net");
  op->add_flag("--json", op_json, "print JSON instead of a table");
  op->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : patchkit::kExitConfig;
  }

  patchkit::json cfg;
  try {
    cfg = resolve(g);
  } catch (const patchkit::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return patchkit::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return patchkit::kExitConfig;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  if (command == "op-count") {
    try {
      const auto rc = patchkit::parse_config(cfg);
      const auto report = patchkit::op_count_report(rc.net);
      if (op_json) {
        std::cout << patchkit::json(report).dump(2) << "\n";
      } else {
        std::cout << patchkit::format_op_count(report);
      }
      return patchkit::kExitOk;
    } catch (const patchkit::ConfigError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return patchkit::kExitConfig;
    }
  }
  return patchkit::run_command(command, cfg, std::cerr);
}
