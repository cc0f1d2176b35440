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

// Synthetic two-class "atrophy phantoms": a smooth bright ellipsoid on a dark
// background, with intensity loss inside planted lesion regions for class 1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "patchkit/errors.hpp"
#include "patchkit/json_io.hpp"
#include "patchkit/parallel.hpp"
#include "patchkit/rng.hpp"
#include "patchkit/volume.hpp"

namespace patchkit {

struct PhantomSpec {
  Dims dims{64, 64, 64};
  std::size_t n_per_class = 100;
  std::vector<Region> lesion_regions{{{36, 20, 28}, {12, 12, 12}}};
  double lesion_delta = 0.4;
  double noise_sigma = 0.05;
  std::size_t smooth_radius = 1;
  std::uint64_t seed = 1234;

  void validate() const {
    if (dims.min() == 0) throw InvalidArgument("phantom dims must be >= 1");
    if (n_per_class < 1) throw InvalidArgument("n_per_class must be >= 1");
    if (!(lesion_delta > 0.0 && lesion_delta <= 1.0)) {
      throw InvalidArgument(
          "lesion_delta must lie in (0, 1]; 0 makes the classes identical");
    }
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
      throw InvalidArgument("noise_sigma must be finite and >= 0");
    }
    for (const Region& r : lesion_regions) {
      if (!r.inside(dims)) {
        throw InvalidArgument("lesion region " + to_string(r) +
                              " outside phantom dims");
      }
    }
  }
};

inline void to_json(json& j, const PhantomSpec& s) {
  j = json{{"dims", s.dims},
           {"n_per_class", s.n_per_class},
           {"lesion_regions", s.lesion_regions},
           {"lesion_delta", s.lesion_delta},
           {"noise_sigma", s.noise_sigma},
           {"smooth_radius", s.smooth_radius},
           {"seed", s.seed}};
}

inline void from_json(const json& j, PhantomSpec& s) {
  PhantomSpec d;
  s.dims = j.value("dims", d.dims);
  s.n_per_class = j.value("n_per_class", d.n_per_class);
  s.lesion_regions = j.value("lesion_regions", d.lesion_regions);
  s.lesion_delta = j.value("lesion_delta", d.lesion_delta);
  s.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  s.smooth_radius = j.value("smooth_radius", d.smooth_radius);
  s.seed = j.value("seed", d.seed);
}

// Labelled volumes held in memory.
struct Dataset {
  std::vector<Volume> volumes;
  std::vector<int> labels;  // 0 = NC analogue, 1 = AD analogue

  std::size_t size() const { return volumes.size(); }
  Dims dims() const {
    if (volumes.empty()) throw InvalidArgument("empty dataset");
    return volumes.front().dims();
  }
  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.volumes.reserve(idx.size());
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) {
      out.volumes.push_back(volumes.at(i));
      out.labels.push_back(labels.at(i));
    }
    return out;
  }
};

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  int label = 0;
};

struct DatasetManifest {
  PhantomSpec spec;
  std::vector<Region> ground_truth;
  std::vector<ManifestEntry> entries;
};

inline void to_json(json& j, const DatasetManifest& m) {
  json entries = json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"path", e.path}, {"label", e.label}});
  }
  j = json{{"spec", m.spec}, {"ground_truth", m.ground_truth},
           {"entries", entries}};
}

inline void from_json(const json& j, DatasetManifest& m) {
  m.spec = j.at("spec").get<PhantomSpec>();
  m.ground_truth = j.at("ground_truth").get<std::vector<Region>>();
  m.entries.clear();
  for (const auto& e : j.at("entries")) {
    const int label = e.at("label").get<int>();
    if (label != 0 && label != 1) throw InvalidArgument("label must be 0 or 1");
    m.entries.push_back({e.at("path").get<std::string>(), label});
  }
}

// Fixed anatomy template: intensity 0.25 + 0.6 (1 - r^2) inside an ellipsoid
// with semi-axes 0.4 * dims, 0.05 outside.
inline std::vector<double> base_anatomy(const Dims& dims) {
  std::vector<double> base(dims.product());
  const double cx = 0.5 * static_cast<double>(dims.x);
  const double cy = 0.5 * static_cast<double>(dims.y);
  const double cz = 0.5 * static_cast<double>(dims.z);
  const double ax = 0.4 * static_cast<double>(dims.x);
  const double ay = 0.4 * static_cast<double>(dims.y);
  const double az = 0.4 * static_cast<double>(dims.z);
  std::size_t i = 0;
  for (std::size_t z = 0; z < dims.z; ++z) {
    for (std::size_t y = 0; y < dims.y; ++y) {
      for (std::size_t x = 0; x < dims.x; ++x, ++i) {
        const double dx = (static_cast<double>(x) + 0.5 - cx) / ax;
        const double dy = (static_cast<double>(y) + 0.5 - cy) / ay;
        const double dz = (static_cast<double>(z) + 0.5 - cz) / az;
        const double r2 = dx * dx + dy * dy + dz * dz;
        base[i] = r2 < 1.0 ? 0.25 + 0.6 * (1.0 - r2) : 0.05;
      }
    }
  }
  return base;
}

// Separable box blur with window 2r+1, averaging over in-bounds voxels only.
inline void box_blur(std::vector<double>& data, const Dims& dims,
                     std::size_t radius) {
  if (radius == 0) return;
  std::vector<double> line, prefix;
  auto pass = [&](std::size_t n, std::size_t stride, std::size_t count_a,
                  std::size_t stride_a, std::size_t count_b,
                  std::size_t stride_b) {
    line.resize(n);
    prefix.resize(n + 1);
    for (std::size_t b = 0; b < count_b; ++b) {
      for (std::size_t a = 0; a < count_a; ++a) {
        const std::size_t base = a * stride_a + b * stride_b;
        prefix[0] = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          prefix[k + 1] = prefix[k] + data[base + k * stride];
        }
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t lo = k >= radius ? k - radius : 0;
          const std::size_t hi = std::min(n, k + radius + 1);
          line[k] = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
        }
        for (std::size_t k = 0; k < n; ++k) data[base + k * stride] = line[k];
      }
    }
  };
  const std::size_t W = dims.x, H = dims.y, D = dims.z;
  pass(W, 1, H, W, D, W * H);
  pass(H, W, W, 1, D, W * H);
  pass(D, W * H, W, 1, H, W);
}

// One phantom volume. Its noise stream depends only on (seed, index).
inline Volume generate_volume(const PhantomSpec& spec,
                              const std::vector<double>& base,
                              std::size_t index, int label) {
  Rng rng(spec.seed, index);
  const Dims& dims = spec.dims;
  std::vector<double> v(base.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = base[i] + (spec.noise_sigma > 0 ? spec.noise_sigma * rng.normal() : 0.0);
  }
  if (label == 1) {
    const double keep = 1.0 - spec.lesion_delta;
    for (const Region& r : spec.lesion_regions) {
      const Index3 e = r.end();
      for (std::size_t z = r.origin.z; z < e.z; ++z) {
        for (std::size_t y = r.origin.y; y < e.y; ++y) {
          for (std::size_t x = r.origin.x; x < e.x; ++x) {
            v[(z * dims.y + y) * dims.x + x] *= keep;
          }
        }
      }
    }
  }
  box_blur(v, dims, spec.smooth_radius);
  std::vector<float> voxels(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    voxels[i] = static_cast<float>(std::clamp(v[i], 0.0, 1.0));
  }
  return Volume(dims, std::move(voxels));
}

// Entry i carries label i % 2, so classes interleave and stay balanced.
inline Dataset generate_dataset(const PhantomSpec& spec, std::size_t threads = 1) {
  spec.validate();
  const auto base = base_anatomy(spec.dims);
  const std::size_t n = 2 * spec.n_per_class;
  Dataset ds;
  ds.volumes.resize(n);
  ds.labels.resize(n);
  parallel_for(n, threads, [&](std::size_t i) {
    ds.labels[i] = static_cast<int>(i % 2);
    ds.volumes[i] = generate_volume(spec, base, i, ds.labels[i]);
  });
  return ds;
}

// Writes volumes/vol_NNNN.vol and manifest.json under out_dir.
inline DatasetManifest generate(const PhantomSpec& spec,
                                const std::filesystem::path& out_dir,
                                std::size_t threads = 1) {
  const Dataset ds = generate_dataset(spec, threads);
  DatasetManifest m;
  m.spec = spec;
  m.ground_truth = spec.lesion_regions;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "volumes/vol_%04zu.vol", i);
    write_volume(out_dir / name, ds.volumes[i]);
    m.entries.push_back({name, ds.labels[i]});
  }
  detail::write_file(out_dir / "manifest.json", json(m).dump(2) + "\n");
  return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(detail::read_file(path));
  } catch (const json::parse_error& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
  return j.get<DatasetManifest>();
}

inline Dataset load_dataset(const DatasetManifest& m,
                            const std::filesystem::path& manifest_dir) {
  Dataset ds;
  for (const auto& e : m.entries) {
    ds.volumes.push_back(read_volume(manifest_dir / e.path));
    ds.labels.push_back(e.label);
  }
  return ds;
}

// Per-volume patch means, one row per volume.
inline std::vector<std::vector<double>> patch_feature_table(const Dataset& ds,
                                                            const PatchGrid& grid) {
  std::vector<std::vector<double>> rows;
  rows.reserve(ds.size());
  for (const Volume& v : ds.volumes) {
    if (!(v.dims() == grid.volume_dims)) {
      throw InvalidArgument("volume dims do not match grid");
    }
    rows.push_back(patch_means(v, grid));
  }
  return rows;
}

// Per patch: mean over class 1 minus mean over class 0 of patch-mean intensity.
inline std::vector<double> class_separability(const Dataset& ds,
                                              const PatchGrid& grid) {
  const auto rows = patch_feature_table(ds, grid);
  std::vector<double> sum0(grid.size(), 0.0), sum1(grid.size(), 0.0);
  std::size_t n0 = 0, n1 = 0;
  for (std::size_t s = 0; s < rows.size(); ++s) {
    auto& acc = ds.labels[s] == 1 ? sum1 : sum0;
    (ds.labels[s] == 1 ? n1 : n0)++;
    for (std::size_t k = 0; k < grid.size(); ++k) acc[k] += rows[s][k];
  }
  if (n0 == 0 || n1 == 0) throw InvalidArgument("both classes required");
  std::vector<double> out(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) {
    out[k] = sum1[k] / static_cast<double>(n1) - sum0[k] / static_cast<double>(n0);
  }
  return out;
}

}  // namespace patchkit
