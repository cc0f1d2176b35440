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

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "patchkit/errors.hpp"

namespace patchkit {

struct Index3 {
  std::size_t x = 0, y = 0, z = 0;

  std::size_t product() const { return x * y * z; }
  std::size_t min() const { return std::min({x, y, z}); }
  std::size_t max() const { return std::max({x, y, z}); }
  friend bool operator==(const Index3&, const Index3&) = default;
};

using Dims = Index3;

// Axis-aligned cuboid of voxels: [origin, origin + size) per axis.
struct Region {
  Index3 origin;
  Index3 size;

  Index3 end() const {
    return {origin.x + size.x, origin.y + size.y, origin.z + size.z};
  }
  std::size_t voxel_count() const { return size.product(); }
  bool inside(const Dims& dims) const {
    const Index3 e = end();
    return size.x >= 1 && size.y >= 1 && size.z >= 1 && e.x <= dims.x &&
           e.y <= dims.y && e.z <= dims.z;
  }
  bool contains(const Index3& p) const {
    const Index3 e = end();
    return p.x >= origin.x && p.x < e.x && p.y >= origin.y && p.y < e.y &&
           p.z >= origin.z && p.z < e.z;
  }
  bool intersects(const Region& o) const {
    const Index3 a = end(), b = o.end();
    return origin.x < b.x && o.origin.x < a.x && origin.y < b.y &&
           o.origin.y < a.y && origin.z < b.z && o.origin.z < a.z;
  }
  // Voxel count of the overlap with `o` (0 when disjoint).
  std::size_t overlap(const Region& o) const {
    const Index3 a = end(), b = o.end();
    auto span1 = [](std::size_t lo0, std::size_t hi0, std::size_t lo1,
                    std::size_t hi1) -> std::size_t {
      const std::size_t lo = std::max(lo0, lo1), hi = std::min(hi0, hi1);
      return hi > lo ? hi - lo : 0;
    };
    return span1(origin.x, a.x, o.origin.x, b.x) *
           span1(origin.y, a.y, o.origin.y, b.y) *
           span1(origin.z, a.z, o.origin.z, b.z);
  }
  Index3 center() const {
    return {origin.x + size.x / 2, origin.y + size.y / 2,
            origin.z + size.z / 2};
  }
  friend bool operator==(const Region&, const Region&) = default;
};

inline std::string to_string(const Region& r) {
  return "(" + std::to_string(r.origin.x) + "," + std::to_string(r.origin.y) +
         "," + std::to_string(r.origin.z) + ")+(" + std::to_string(r.size.x) +
         "," + std::to_string(r.size.y) + "," + std::to_string(r.size.z) + ")";
}

// Dense 3D scalar field, x fastest: index = (z*H + y)*W + x.
class Volume {
 public:
  Volume() = default;

  Volume(Dims dims, std::vector<float> voxels)
      : dims_(dims), voxels_(std::move(voxels)) {
    if (dims_.x == 0 || dims_.y == 0 || dims_.z == 0) {
      throw InvalidArgument("volume dimensions must be >= 1");
    }
    if (voxels_.size() != dims_.product()) {
      throw InvalidArgument("voxel buffer length " +
                            std::to_string(voxels_.size()) +
                            " does not match dims product " +
                            std::to_string(dims_.product()));
    }
    for (float v : voxels_) {
      if (!std::isfinite(v)) throw InvalidArgument("non-finite voxel value");
    }
  }

  static Volume zeros(Dims dims) {
    return Volume(dims, std::vector<float>(dims.product(), 0.0f));
  }

  const Dims& dims() const { return dims_; }
  std::span<const float> voxels() const { return voxels_; }
  std::size_t size() const { return voxels_.size(); }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return (z * dims_.y + y) * dims_.x + x;
  }
  float at(std::size_t x, std::size_t y, std::size_t z) const {
    return voxels_[index(x, y, z)];
  }

  friend bool operator==(const Volume&, const Volume&) = default;

 private:
  // Only helpers in this header write voxels after construction, and only on
  // freshly built copies.
  friend Volume perturb_zero(const Volume&, std::span<const Region>);
  friend Volume insert_patch(const Volume&, const Region&,
                             std::span<const float>);

  Dims dims_;
  std::vector<float> voxels_;
};

inline void require_inside(const Region& r, const Dims& dims) {
  if (!r.inside(dims)) {
    throw InvalidArgument("region " + to_string(r) + " outside volume");
  }
}

// Uniform non-overlapping cubic patches. Voxels beyond counts*edge on any axis
// belong to no patch.
struct PatchGrid {
  Dims volume_dims;
  std::size_t patch_edge = 0;
  Index3 counts;
  std::vector<Region> regions;  // (z-major, x-fastest) order

  std::size_t size() const { return regions.size(); }
  std::size_t index_of(std::size_t kx, std::size_t ky, std::size_t kz) const {
    return (kz * counts.y + ky) * counts.x + kx;
  }
  // The covered extent, anchored at the origin.
  Region extent() const {
    return {{0, 0, 0},
            {counts.x * patch_edge, counts.y * patch_edge,
             counts.z * patch_edge}};
  }
  // Leaf containing voxel p, or size() when p is in the uncovered remainder.
  std::size_t leaf_at(const Index3& p) const {
    const std::size_t kx = p.x / patch_edge, ky = p.y / patch_edge,
                      kz = p.z / patch_edge;
    if (kx >= counts.x || ky >= counts.y || kz >= counts.z) return size();
    return index_of(kx, ky, kz);
  }
  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

inline PatchGrid make_grid(Dims dims, std::size_t patch_edge) {
  if (patch_edge == 0) throw InvalidArgument("patch edge must be positive");
  if (patch_edge > dims.min()) {
    throw InvalidArgument("patch edge " + std::to_string(patch_edge) +
                          " exceeds the smallest volume dimension");
  }
  PatchGrid g;
  g.volume_dims = dims;
  g.patch_edge = patch_edge;
  g.counts = {dims.x / patch_edge, dims.y / patch_edge, dims.z / patch_edge};
  g.regions.reserve(g.counts.product());
  for (std::size_t kz = 0; kz < g.counts.z; ++kz) {
    for (std::size_t ky = 0; ky < g.counts.y; ++ky) {
      for (std::size_t kx = 0; kx < g.counts.x; ++kx) {
        g.regions.push_back({{kx * patch_edge, ky * patch_edge,
                              kz * patch_edge},
                             {patch_edge, patch_edge, patch_edge}});
      }
    }
  }
  return g;
}

// Copy of v with every voxel inside any listed region set to exactly 0.
inline Volume perturb_zero(const Volume& v, std::span<const Region> regions) {
  for (const Region& r : regions) require_inside(r, v.dims());
  Volume out = v;
  const Dims& d = v.dims();
  for (const Region& r : regions) {
    const Index3 e = r.end();
    for (std::size_t z = r.origin.z; z < e.z; ++z) {
      for (std::size_t y = r.origin.y; y < e.y; ++y) {
        float* row = out.voxels_.data() + (z * d.y + y) * d.x;
        std::fill(row + r.origin.x, row + e.x, 0.0f);
      }
    }
  }
  return out;
}

inline std::vector<float> extract_patch(const Volume& v, const Region& r) {
  require_inside(r, v.dims());
  std::vector<float> out;
  out.reserve(r.voxel_count());
  const Index3 e = r.end();
  const auto vox = v.voxels();
  for (std::size_t z = r.origin.z; z < e.z; ++z) {
    for (std::size_t y = r.origin.y; y < e.y; ++y) {
      const auto row = vox.subspan(v.index(r.origin.x, y, z), r.size.x);
      out.insert(out.end(), row.begin(), row.end());
    }
  }
  return out;
}

// Inverse of extract_patch: copy of v with the region overwritten by values.
inline Volume insert_patch(const Volume& v, const Region& r,
                           std::span<const float> values) {
  require_inside(r, v.dims());
  if (values.size() != r.voxel_count()) {
    throw InvalidArgument("patch length does not match region size");
  }
  Volume out = v;
  const Index3 e = r.end();
  std::size_t k = 0;
  for (std::size_t z = r.origin.z; z < e.z; ++z) {
    for (std::size_t y = r.origin.y; y < e.y; ++y) {
      for (std::size_t x = r.origin.x; x < e.x; ++x) {
        const float val = values[k++];
        if (!std::isfinite(val)) throw InvalidArgument("non-finite patch value");
        out.voxels_[v.index(x, y, z)] = val;
      }
    }
  }
  return out;
}

// Mean intensity over a region, accumulated in double.
inline double region_mean(const Volume& v, const Region& r) {
  require_inside(r, v.dims());
  double sum = 0.0;
  const Index3 e = r.end();
  const auto vox = v.voxels();
  for (std::size_t z = r.origin.z; z < e.z; ++z) {
    for (std::size_t y = r.origin.y; y < e.y; ++y) {
      const float* row = vox.data() + v.index(0, y, z);
      for (std::size_t x = r.origin.x; x < e.x; ++x) sum += row[x];
    }
  }
  return sum / static_cast<double>(r.voxel_count());
}

inline std::vector<double> patch_means(const Volume& v, const PatchGrid& g) {
  if (!(v.dims() == g.volume_dims)) {
    throw InvalidArgument("volume dims do not match grid");
  }
  std::vector<double> out;
  out.reserve(g.size());
  for (const Region& r : g.regions) out.push_back(region_mean(v, r));
  return out;
}

// Halves each axis of size s into floor(s/2) and s - floor(s/2); axes of size
// 1 are kept whole. Order: low half first per axis, z-major, x fastest.
inline std::vector<Region> octree_children(const Region& r) {
  if (r.size.x <= 1 && r.size.y <= 1 && r.size.z <= 1) {
    throw CannotSplit("cannot split 1x1x1 region " + to_string(r));
  }
  auto halves = [](std::size_t o, std::size_t s) {
    std::vector<std::pair<std::size_t, std::size_t>> h;
    if (s < 2) {
      h.emplace_back(o, s);
    } else {
      h.emplace_back(o, s / 2);
      h.emplace_back(o + s / 2, s - s / 2);
    }
    return h;
  };
  const auto hx = halves(r.origin.x, r.size.x);
  const auto hy = halves(r.origin.y, r.size.y);
  const auto hz = halves(r.origin.z, r.size.z);
  std::vector<Region> out;
  out.reserve(hx.size() * hy.size() * hz.size());
  for (const auto& [oz, sz] : hz) {
    for (const auto& [oy, sy] : hy) {
      for (const auto& [ox, sx] : hx) {
        out.push_back({{ox, oy, oz}, {sx, sy, sz}});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// VOL1 file format: "VOL1", u32 W, u32 H, u32 D (little endian), then W*H*D
// little-endian IEEE-754 float32 voxels in layout order.

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(sizeof(T) == 4);
  std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(const unsigned char* p) {
  static_assert(sizeof(T) == 4);
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t{p[i]} << (8 * i);
  return std::bit_cast<T>(bits);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::filesystem::path& path,
                       const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace detail

inline std::string encode_volume(const Volume& v) {
  std::string out = "VOL1";
  out.reserve(16 + 4 * v.size());
  detail::put_le(out, static_cast<std::uint32_t>(v.dims().x));
  detail::put_le(out, static_cast<std::uint32_t>(v.dims().y));
  detail::put_le(out, static_cast<std::uint32_t>(v.dims().z));
  for (float f : v.voxels()) detail::put_le(out, f);
  return out;
}

inline Volume decode_volume(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 4) != "VOL1") {
    throw IoError("not a VOL1 volume (bad magic)");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const Dims dims{detail::get_le<std::uint32_t>(p + 4),
                  detail::get_le<std::uint32_t>(p + 8),
                  detail::get_le<std::uint32_t>(p + 12)};
  const std::size_t n = dims.product();
  if (bytes.size() - 16 < 4 * n) throw IoError("VOL1 payload is short");
  std::vector<float> voxels(n);
  for (std::size_t i = 0; i < n; ++i) {
    voxels[i] = detail::get_le<float>(p + 16 + 4 * i);
  }
  return Volume(dims, std::move(voxels));
}

inline void write_volume(const std::filesystem::path& path, const Volume& v) {
  detail::write_file(path, encode_volume(v));
}

inline Volume read_volume(const std::filesystem::path& path) {
  return decode_volume(detail::read_file(path));
}

}  // namespace patchkit
