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

// Analytic parameter and multiply-accumulate counts for one PatchNet forward
// pass on a single sample.

#include <cstdio>
#include <string>
#include <vector>

#include "patchkit/json_io.hpp"
#include "patchkit/patchnet.hpp"

namespace patchkit {

struct LayerCount {
  std::string name;
  std::size_t params = 0;
  std::size_t macs = 0;
};

struct OpCountReport {
  PatchNetConfig config;
  std::vector<LayerCount> layers;
  std::size_t total_params = 0;
  std::size_t total_macs = 0;
};

// Published reference figures for the paper-scale configuration.
inline constexpr double kReferenceParams = 34.53e6;
inline constexpr double kReferenceMacs = 2.21e9;

// Depthwise convolutions count every kernel tap at every output site (zero
// padding included); batch norm counts one MAC per element (scale + shift);
// average pooling one per element.
inline OpCountReport op_count_report(const PatchNetConfig& c) {
  c.validate();
  const std::size_t P = c.patch_len(), M = c.patch_count, d = c.embed_dim,
                    m = c.side(), C = c.class_count;
  OpCountReport r;
  r.config = c;
  r.layers.push_back({"projection", P * d, M * P * d});
  r.layers.push_back({"position_embedding", M * d, 0});
  for (std::size_t l = 0; l < c.depth; ++l) {
    const std::string b = "block" + std::to_string(l);
    r.layers.push_back({b + ".gsi.depthwise", d * m * m + d, d * M * m * m});
    r.layers.push_back({b + ".gsi.bn", 2 * d, d * M});
    r.layers.push_back({b + ".lpi.pointwise", d * d + d, M * d * d});
    r.layers.push_back({b + ".lpi.bn", 2 * d, d * M});
  }
  r.layers.push_back({"avg_pool", 0, d * M});
  r.layers.push_back({"classifier", d * C + C, d * C});
  for (const auto& l : r.layers) {
    r.total_params += l.params;
    r.total_macs += l.macs;
  }
  return r;
}

inline void to_json(json& j, const OpCountReport& r) {
  json layers = json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"name", l.name}, {"params", l.params}, {"macs", l.macs}});
  }
  j = json{{"config", r.config},
           {"layers", layers},
           {"total_params", r.total_params},
           {"total_macs", r.total_macs},
           {"reference_params", kReferenceParams},
           {"reference_macs", kReferenceMacs},
           {"gsi_convolution", "depthwise (one m x m kernel per channel)"}};
}

// Human-readable table. Per-layer rows are grouped by kind (all blocks are
// identical) and compared against the published reference totals.
inline std::string format_op_count(const OpCountReport& r) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-24s %16s %18s\n", "layer", "params", "MACs");
  out += line;
  std::size_t gsi_p = 0, gsi_m = 0, lpi_p = 0, lpi_m = 0;
  for (const auto& l : r.layers) {
    if (l.name.rfind("block", 0) == 0) {
      const bool gsi = l.name.find(".gsi.") != std::string::npos;
      (gsi ? gsi_p : lpi_p) += l.params;
      (gsi ? gsi_m : lpi_m) += l.macs;
      continue;
    }
    std::snprintf(line, sizeof(line), "%-24s %16zu %18zu\n", l.name.c_str(), l.params, l.macs);
    out += line;
  }
  std::snprintf(line, sizeof(line), "%-24s %16zu %18zu\n",
                ("gsi x" + std::to_string(r.config.depth)).c_str(), gsi_p, gsi_m);
  out += line;
  std::snprintf(line, sizeof(line), "%-24s %16zu %18zu\n",
                ("lpi x" + std::to_string(r.config.depth)).c_str(), lpi_p, lpi_m);
  out += line;
  std::snprintf(line, sizeof(line), "%-24s %16zu %18zu\n", "total", r.total_params, r.total_macs);
  out += line;
  std::snprintf(line, sizeof(line),
                "reference: %.2f M params, %.2f GMac; computed: %.2f M params (%+.2f M), "
                "%.3f GMac (%+.3f GMac)\n",
                kReferenceParams / 1e6, kReferenceMacs / 1e9, r.total_params / 1e6,
                (static_cast<double>(r.total_params) - kReferenceParams) / 1e6,
                r.total_macs / 1e9, (static_cast<double>(r.total_macs) - kReferenceMacs) / 1e9);
  out += line;
  return out;
}

}  // namespace patchkit
