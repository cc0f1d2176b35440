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

#include "patchkit/op_count.hpp"

#include <string>

#include "gtest/gtest.h"
#include "patchkit/patchnet.hpp"

namespace patchkit {
namespace {

PatchNetConfig PaperConfig() {
  PatchNetConfig c;
  c.patch_edge = 25;
  c.patch_count = 36;
  c.embed_dim = 1600;
  c.depth = 12;
  return c;
}

const LayerCount& Layer(const OpCountReport& r, const std::string& name) {
  for (const auto& l : r.layers)
    if (l.name == name) return l;
  throw std::runtime_error("no layer " + name);
}

TEST(OpCountTest, PaperProjection) {
  const auto r = op_count_report(PaperConfig());
  EXPECT_EQ(Layer(r, "projection").params, 25000000u);
  EXPECT_EQ(Layer(r, "projection").macs, 36u * 25000000u);
  EXPECT_EQ(Layer(r, "position_embedding").params, 36u * 1600u);
}

TEST(OpCountTest, TotalsMatchInstantiatedNetwork) {
  PatchNetConfig c;
  c.patch_edge = 3;
  c.patch_count = 9;
  c.embed_dim = 7;
  c.depth = 3;
  EXPECT_EQ(op_count_report(c).total_params, init_params<float>(c).parameter_count());
}

TEST(OpCountTest, ZeroDepth) {
  PatchNetConfig c;
  c.depth = 0;
  const auto r = op_count_report(c);
  const std::size_t P = 512, M = 36, d = 64;
  EXPECT_EQ(r.total_params, P * d + M * d + d * 2 + 2);
}

TEST(OpCountTest, ScalingWithWidth) {
  PatchNetConfig a;
  PatchNetConfig b = a;
  b.embed_dim = 2 * a.embed_dim;
  const auto ra = op_count_report(a), rb = op_count_report(b);
  const std::size_t da = a.embed_dim, db = b.embed_dim;
  EXPECT_EQ(Layer(rb, "block0.lpi.pointwise").params - db,
            4 * (Layer(ra, "block0.lpi.pointwise").params - da));
  EXPECT_EQ(Layer(rb, "block0.gsi.depthwise").params, 2 * Layer(ra, "block0.gsi.depthwise").params);
  EXPECT_EQ(Layer(rb, "block0.lpi.pointwise").macs, 4 * Layer(ra, "block0.lpi.pointwise").macs);
}

TEST(OpCountTest, ReportMentionsReferences) {
  const auto r = op_count_report(PaperConfig());
  const std::string text = format_op_count(r);
  EXPECT_NE(text.find("34.53 M params"), std::string::npos);
  EXPECT_NE(text.find("2.21 GMac"), std::string::npos);
  const json j = r;
  EXPECT_EQ(j["reference_params"], 34.53e6);
  EXPECT_EQ(j["layers"].size(), 2u + 4u * 12u + 2u);
}

}  // namespace
}  // namespace patchkit
