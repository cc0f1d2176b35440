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

#include <cmath>
#include <limits>
#include <string>

#include "json.hpp"
#include "patchkit/volume.hpp"

namespace patchkit {

using json = nlohmann::json;

inline void to_json(json& j, const Index3& p) { j = json::array({p.x, p.y, p.z}); }

inline void from_json(const json& j, Index3& p) {
  if (!j.is_array() || j.size() != 3) {
    throw InvalidArgument("expected a 3-element array, got " + j.dump());
  }
  p = {j[0].get<std::size_t>(), j[1].get<std::size_t>(),
       j[2].get<std::size_t>()};
}

inline void to_json(json& j, const Region& r) {
  j = json{{"origin", r.origin}, {"size", r.size}};
}

inline void from_json(const json& j, Region& r) {
  r.origin = j.at("origin").get<Index3>();
  r.size = j.at("size").get<Index3>();
}

// A grid is fully determined by the volume dims and the patch edge.
inline void to_json(json& j, const PatchGrid& g) {
  j = json{{"dims", g.volume_dims},
           {"patch_edge", g.patch_edge},
           {"counts", g.counts}};
}

inline void from_json(const json& j, PatchGrid& g) {
  g = make_grid(j.at("dims").get<Dims>(), j.at("patch_edge").get<std::size_t>());
  if (j.contains("counts") && !(j["counts"].get<Index3>() == g.counts)) {
    throw InvalidArgument("grid counts inconsistent with dims and patch edge");
  }
}

// JSON has no infinities; they travel as the strings "inf" / "-inf".
inline json real_to_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double real_from_json(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw InvalidArgument("expected a number, got \"" + s + "\"");
  }
  return j.get<double>();
}

}  // namespace patchkit
