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

// Orthogonal mid-slice renderings as binary PGM (P5) images.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "patchkit/shapley.hpp"
#include "patchkit/volume.hpp"

namespace patchkit {

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  std::uint8_t& at(std::size_t col, std::size_t row) { return pixels[row * width + col]; }
  std::uint8_t at(std::size_t col, std::size_t row) const { return pixels[row * width + col]; }
};

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(img.pixels.begin(), img.pixels.end());
  return out;
}

enum class SlicePlane { axial, coronal, sagittal };

inline const char* to_string(SlicePlane p) {
  switch (p) {
    case SlicePlane::axial: return "axial";
    case SlicePlane::coronal: return "coronal";
    case SlicePlane::sagittal: return "sagittal";
  }
  return "?";
}

inline constexpr std::array<SlicePlane, 3> kPlanes{SlicePlane::axial, SlicePlane::coronal,
                                                   SlicePlane::sagittal};

namespace detail {

// Maps a plane pixel (col, row) to volume coordinates. axial: z = D/2 with
// (x, y); coronal: y = H/2 with (x, z); sagittal: x = W/2 with (y, z).
struct PlaneMap {
  SlicePlane plane;
  Dims dims;
  std::size_t width() const { return plane == SlicePlane::sagittal ? dims.y : dims.x; }
  std::size_t height() const { return plane == SlicePlane::axial ? dims.y : dims.z; }
  Index3 voxel(std::size_t col, std::size_t row) const {
    switch (plane) {
      case SlicePlane::axial: return {col, row, dims.z / 2};
      case SlicePlane::coronal: return {col, dims.y / 2, row};
      case SlicePlane::sagittal: return {dims.x / 2, col, row};
    }
    return {};
  }
};

inline GrayImage scale_slice(const PlaneMap& pm, const std::vector<double>& field) {
  const auto [lo, hi] = std::minmax_element(field.begin(), field.end());
  const double range = *hi - *lo;
  GrayImage img{pm.width(), pm.height(), {}};
  img.pixels.resize(img.width * img.height);
  for (std::size_t row = 0; row < img.height; ++row) {
    for (std::size_t col = 0; col < img.width; ++col) {
      const Index3 p = pm.voxel(col, row);
      const double v = field[(p.z * pm.dims.y + p.y) * pm.dims.x + p.x];
      const double t = range > 0 ? (v - *lo) / range : 0.0;
      img.at(col, row) = static_cast<std::uint8_t>(std::lround(255.0 * t));
    }
  }
  return img;
}

// Sets the boundary pixels of every region's footprint in the plane to 255.
inline void outline(GrayImage& img, const PlaneMap& pm, std::span<const Region> regions) {
  for (const Region& r : regions) {
    const Index3 e = r.end();
    for (std::size_t row = 0; row < img.height; ++row) {
      for (std::size_t col = 0; col < img.width; ++col) {
        const Index3 p = pm.voxel(col, row);
        if (!r.contains(p)) continue;
        // A pixel is on the border when a plane neighbour lies outside r.
        bool border = false;
        switch (pm.plane) {
          case SlicePlane::axial:
            border = p.x == r.origin.x || p.x + 1 == e.x || p.y == r.origin.y || p.y + 1 == e.y;
            break;
          case SlicePlane::coronal:
            border = p.x == r.origin.x || p.x + 1 == e.x || p.z == r.origin.z || p.z + 1 == e.z;
            break;
          case SlicePlane::sagittal:
            border = p.y == r.origin.y || p.y + 1 == e.y || p.z == r.origin.z || p.z + 1 == e.z;
            break;
        }
        if (border) img.at(col, row) = 255;
      }
    }
  }
}

}  // namespace detail

// Intensity slices min/max scaled to 0..255 with the outlined regions'
// borders at 255. Order: axial, coronal, sagittal.
inline std::array<GrayImage, 3> render_slices(const Volume& v, std::span<const Region> outlined) {
  for (const Region& r : outlined) require_inside(r, v.dims());
  const std::vector<double> field(v.voxels().begin(), v.voxels().end());
  std::array<GrayImage, 3> out;
  for (std::size_t i = 0; i < 3; ++i) {
    const detail::PlaneMap pm{kPlanes[i], v.dims()};
    out[i] = detail::scale_slice(pm, field);
    detail::outline(out[i], pm, outlined);
  }
  return out;
}

inline std::array<GrayImage, 3> render_slices(const Volume& v, const SelectionResult& sel) {
  if (!(sel.grid.volume_dims == v.dims())) {
    throw InvalidArgument("selection grid does not match volume dims");
  }
  std::vector<Region> regions;
  for (std::size_t k : sel.chosen) regions.push_back(sel.grid.regions.at(k));
  return render_slices(v, regions);
}

// Attribution magnitude |S| painted per leaf (uncovered voxels 0).
inline std::array<GrayImage, 3> render_slices(const AttributionMap& map) {
  const Dims& dims = map.grid.volume_dims;
  std::vector<double> field(dims.product(), 0.0);
  for (std::size_t z = 0; z < dims.z; ++z) {
    for (std::size_t y = 0; y < dims.y; ++y) {
      for (std::size_t x = 0; x < dims.x; ++x) {
        const std::size_t k = map.grid.leaf_at({x, y, z});
        if (k < map.grid.size()) field[(z * dims.y + y) * dims.x + x] = std::abs(map.values[k]);
      }
    }
  }
  std::array<GrayImage, 3> out;
  for (std::size_t i = 0; i < 3; ++i) {
    out[i] = detail::scale_slice({kPlanes[i], dims}, field);
  }
  return out;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  detail::write_file(path, encode_pgm(img));
}

}  // namespace patchkit
