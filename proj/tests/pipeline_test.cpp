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

#include "patchkit/pipeline.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>

#include "gtest/gtest.h"

namespace patchkit {
namespace {

namespace fs = std::filesystem;

json TinyConfig(const fs::path& out) {
  json c = default_config();
  c["out_dir"] = out.string();
  c["phantom"]["dims"] = {32, 32, 32};
  c["phantom"]["n_per_class"] = 12;
  c["phantom"]["lesion_regions"] = json::parse(R"([{"origin": [16, 8, 8], "size": [8, 8, 8]}])");
  c["explain"]["tau"] = 0.0;
  c["select"]["M"] = 4;
  c["net"]["embed_dim"] = 8;
  c["net"]["depth"] = 1;
  c["train"]["epochs"] = 3;
  c["train"]["lr_max"] = 1e-3;
  c["eval"]["k"] = 2;
  c["eval"]["repeats"] = 1;
  c["compare"]["M"] = {1, 4};
  return c;
}

fs::path Scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("patchkit_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string Slurp(const fs::path& p) { return detail::read_file(p); }

TEST(ConfigTest, OverridesAndMerging) {
  json c = default_config();
  apply_override(c, "select.M=16");
  apply_override(c, "explain.rule=refine_at_or_above");
  apply_override(c, "explain.tau=-0.001");
  apply_override(c, "out_dir=some/dir");
  EXPECT_EQ(c["select"]["M"], 16);
  EXPECT_EQ(c["explain"]["rule"], "refine_at_or_above");
  EXPECT_EQ(c["out_dir"], "some/dir");
  const RunConfig rc = parse_config(c);
  EXPECT_EQ(rc.M, 16u);
  EXPECT_EQ(*rc.explain.tau, -0.001);
  EXPECT_EQ(rc.data_dir, fs::path("some/dir") / "data");
  EXPECT_THROW(apply_override(c, "no_equals_sign"), ConfigError);

  json base{{"a", {{"b", 1}, {"c", 2}}}};
  merge_config(base, {{"a", {{"c", 5}}}});
  EXPECT_EQ(base["a"]["b"], 1);
  EXPECT_EQ(base["a"]["c"], 5);
}

TEST(ConfigTest, ErrorsNameTheField) {
  auto field_of = [](json c) {
    try {
      parse_config(c);
    } catch (const ConfigError& e) {
      return e.field;
    }
    return std::string("<none>");
  };
  json c = default_config();
  c["select"]["M"] = 30;
  EXPECT_EQ(field_of(c), "select.M");
  c = default_config();
  c["phantom"]["lesion_delta"] = 0.0;
  EXPECT_EQ(field_of(c), "phantom");
  c = default_config();
  c["explain"]["rule"] = "sometimes";
  EXPECT_EQ(field_of(c), "explain.rule");
  c = default_config();
  c["train"]["batch_size"] = "eight";
  EXPECT_EQ(field_of(c), "train.batch_size");
  c = default_config();
  c["compare"]["M"] = {16, 20};
  EXPECT_EQ(field_of(c), "compare.M.1");
  c = default_config();
  c["explain"]["tau"] = "inf";
  EXPECT_EQ(field_of(c), "<none>");
}

TEST(ConfigTest, SubSeedsDeriveFromGlobalSeed) {
  json c = default_config();
  const RunConfig a = parse_config(c);
  c["seed"] = 99;
  const RunConfig b = parse_config(c);
  EXPECT_NE(a.phantom.seed, b.phantom.seed);
  EXPECT_NE(a.schedule.seed, b.schedule.seed);
  c["phantom"]["seed"] = 5;
  EXPECT_EQ(parse_config(c).phantom.seed, 5u);
  EXPECT_EQ(parse_config(c).resolved["phantom"]["seed"], 5);
}

TEST(StageTest, MissingPrerequisitesAndTau) {
  const auto out = Scratch("deps");
  std::ostringstream log;
  json c = TinyConfig(out);
  EXPECT_EQ(run_command("surrogate", c, log), kExitDependency);
  EXPECT_NE(log.str().find("manifest.json"), std::string::npos);
  EXPECT_EQ(run_command("gen", c, log), kExitOk);
  EXPECT_EQ(run_command("explain", c, log), kExitDependency);
  EXPECT_EQ(run_command("train", c, log), kExitDependency);
  EXPECT_NE(log.str().find("selection.json"), std::string::npos);
  c["explain"]["tau"] = nullptr;
  EXPECT_EQ(run_command("explain", c, log), kExitConfig);
  EXPECT_EQ(run_command("bogus", c, log), kExitConfig);
  fs::remove_all(out);
}

TEST(StageTest, FullPipelineIsReproducible) {
  const auto out = Scratch("full");
  const json c = TinyConfig(out);
  std::ostringstream log;
  for (const auto& cmd : command_names()) {
    ASSERT_EQ(run_command(cmd, c, log), kExitOk) << cmd << "\n" << log.str();
  }
  const Artifacts a{out, out / "data"};
  for (const auto& p : {a.surrogate(), a.attribution(), a.selection(), a.checkpoint(),
                        a.train_log(), a.train_report(), a.eval_report(), a.roc_csv(),
                        a.compare_json(), a.compare_csv(), a.run_json()}) {
    EXPECT_TRUE(fs::exists(p)) << p;
  }
  for (const char* plane : {"axial", "coronal", "sagittal"}) {
    EXPECT_TRUE(fs::exists(out / (std::string("explain_") + plane + ".pgm")));
  }
  const json cmp = read_json(a.compare_json());
  EXPECT_EQ(cmp["rows"].size(), 4u);
  EXPECT_EQ(read_json(a.selection())["chosen"].size(), 4u);
  EXPECT_EQ(read_json(a.run_json())["command"], "compare");

  // Re-running from the echoed config reproduces every artifact byte for byte.
  const std::string manifest = Slurp(a.manifest());
  const std::string attribution = Slurp(a.attribution());
  const std::string checkpoint = Slurp(a.checkpoint());
  const std::string render = Slurp(out / "explain_axial.pgm");
  const std::string eval_report = Slurp(a.eval_report());
  const json again = load_config_file(a.run_json());
  for (const auto& cmd : command_names()) {
    if (cmd == "compare") continue;
    ASSERT_EQ(run_command(cmd, again, log), kExitOk) << cmd;
  }
  EXPECT_EQ(Slurp(a.manifest()), manifest);
  EXPECT_EQ(Slurp(a.attribution()), attribution);
  EXPECT_EQ(Slurp(a.checkpoint()), checkpoint);
  EXPECT_EQ(Slurp(out / "explain_axial.pgm"), render);
  EXPECT_EQ(Slurp(a.eval_report()), eval_report);
  fs::remove_all(out);
}

TEST(CompareTest, Localisation) {
  SelectionResult sel;
  sel.grid = make_grid({16, 16, 16}, 8);
  sel.chosen = {0, 7};
  const std::vector<Region> lesion{{{4, 4, 4}, {2, 2, 2}}, {{8, 0, 0}, {8, 8, 8}}};
  const auto loc = localisation(sel, lesion);
  EXPECT_DOUBLE_EQ(loc.precision, 0.5);
  EXPECT_DOUBLE_EQ(loc.recall, 0.5);
}

TEST(CompareTest, QualitativeVerdict) {
  CompareOutcome o;
  o.rows = {{SelectionMethod::shap, 16, 0.95}, {SelectionMethod::shap, 64, 0.96},
            {SelectionMethod::ttest, 16, 0.85}, {SelectionMethod::ttest, 64, 0.95}};
  judge_compare(o);
  EXPECT_TRUE(o.qualitative_pass);
  EXPECT_EQ(o.verdict.substr(0, 4), "pass");
  o.rows[0].acc = 0.90;
  judge_compare(o);
  EXPECT_FALSE(o.qualitative_pass);
  EXPECT_EQ(o.verdict.substr(0, 4), "warn");
  o.rows.resize(2);
  judge_compare(o);
  EXPECT_FALSE(o.qualitative_pass);
}

// ---------------------------------------------------------------------------
// The installed binary.

int RunCli(const std::string& args, std::string* output = nullptr) {
  const auto log = fs::temp_directory_path() / "patchkit_cli_test.log";
  const std::string cmd = std::string(PATCHKIT_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (output) *output = Slurp(log);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(CliTest, ExitCodes) {
  const auto out = Scratch("cli");
  std::string text;
  EXPECT_EQ(RunCli("--help", &text), 0);
  EXPECT_NE(text.find("compare"), std::string::npos);
  EXPECT_EQ(RunCli("select --out " + out.string() + " --set select.M=30", &text), 2);
  EXPECT_NE(text.find("M must be a perfect square"), std::string::npos);
  EXPECT_EQ(RunCli("train --out " + out.string(), &text), 3);
  EXPECT_NE(text.find("selection.json"), std::string::npos);
  EXPECT_EQ(RunCli("--config /nonexistent/patchkit.json gen", &text), 2);
  EXPECT_EQ(RunCli("frobnicate"), 2);
  fs::remove_all(out);
}

TEST(CliTest, FlagsAndEnvironmentReachRunJson) {
  const auto out = Scratch("cli_flags");
  fs::create_directories(out);
  const auto cfg = out / "cfg.json";
  json c = TinyConfig(out / "run");
  detail::write_file(cfg, c.dump());
  ASSERT_EQ(RunCli("gen --config " + cfg.string() + " --seed 17 --set phantom.n_per_class=3"), 0);
  json run = read_json(out / "run" / "run.json");
  EXPECT_EQ(run["config"]["seed"], 17);
  EXPECT_EQ(run["config"]["phantom"]["n_per_class"], 3);
  EXPECT_EQ(run["config"]["threads"], 1);

  ::setenv("PATCHKIT_THREADS", "3", 1);
  ASSERT_EQ(RunCli("gen --config " + cfg.string()), 0);
  EXPECT_EQ(read_json(out / "run" / "run.json")["config"]["threads"], 3);
  ASSERT_EQ(RunCli("gen --config " + cfg.string() + " --threads 2"), 0);
  EXPECT_EQ(read_json(out / "run" / "run.json")["config"]["threads"], 2);
  ::unsetenv("PATCHKIT_THREADS");

  ASSERT_EQ(RunCli("op-count --json --config " + cfg.string()), 0);
  fs::remove_all(out);
}

}  // namespace
}  // namespace patchkit
