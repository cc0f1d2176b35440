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
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "patchkit/errors.hpp"
#include "patchkit/json_io.hpp"
#include "patchkit/optim.hpp"
#include "patchkit/patchnet.hpp"
#include "patchkit/phantom.hpp"
#include "patchkit/rng.hpp"
#include "patchkit/shapley.hpp"
#include "patchkit/volume.hpp"

namespace patchkit {

// Network inputs: per sample, the selected patches flattened back to back in
// ascending grid order.
struct PatchSamples {
  std::size_t sample_len = 0;
  std::vector<float> data;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const float> sample(std::size_t i) const {
    return std::span<const float>(data).subspan(i * sample_len, sample_len);
  }
  PatchSamples subset(std::span<const std::size_t> idx) const {
    PatchSamples out;
    out.sample_len = sample_len;
    for (std::size_t i : idx) {
      const auto s = sample(i);
      out.data.insert(out.data.end(), s.begin(), s.end());
      out.labels.push_back(labels.at(i));
    }
    return out;
  }
};

inline PatchSamples extract_samples(const Dataset& ds, const SelectionResult& sel) {
  const auto order = sel.grid_order();
  PatchSamples out;
  out.sample_len = order.size() * sel.grid.patch_edge * sel.grid.patch_edge *
                   sel.grid.patch_edge;
  out.data.reserve(ds.size() * out.sample_len);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!(ds.volumes[i].dims() == sel.grid.volume_dims)) {
      throw InvalidArgument("volume dims do not match the selection grid");
    }
    for (std::size_t k : order) {
      const auto patch = extract_patch(ds.volumes[i], sel.grid.regions.at(k));
      out.data.insert(out.data.end(), patch.begin(), patch.end());
    }
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

struct TrainSchedule {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  std::uint64_t seed = 11;
};

inline void to_json(json& j, const TrainSchedule& s) {
  j = json{{"epochs", s.epochs}, {"batch_size", s.batch_size},
           {"lr_max", s.lr_max}, {"lr_min", s.lr_min}, {"seed", s.seed}};
}

inline void from_json(const json& j, TrainSchedule& s) {
  const TrainSchedule d;
  s.epochs = j.value("epochs", d.epochs);
  s.batch_size = j.value("batch_size", d.batch_size);
  s.lr_max = j.value("lr_max", d.lr_max);
  s.lr_min = j.value("lr_min", d.lr_min);
  s.seed = j.value("seed", d.seed);
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double train_acc = 0.0;
  double val_acc = std::numeric_limits<double>::quiet_NaN();
};

inline json to_json_line(const EpochLog& e) {
  json j{{"epoch", e.epoch}, {"lr", e.lr}, {"loss", e.loss}, {"train_acc", e.train_acc}};
  j["val_acc"] = std::isnan(e.val_acc) ? json(nullptr) : json(e.val_acc);
  return j;
}

struct TrainResult {
  PatchNetParams<float> best;  // best validation accuracy (last if no validation)
  PatchNetParams<float> last;  // last finite iterate
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_val_acc = std::numeric_limits<double>::quiet_NaN();
  bool diverged = false;
  std::string failure;
};

// Eval-mode P(class 1) per sample, batched for speed (results do not depend
// on the batching because eval-mode BN uses running statistics).
inline std::vector<double> predict_scores(const PatchNetParams<float>& p,
                                          const PatchSamples& s,
                                          std::size_t batch = 32) {
  std::vector<double> out;
  out.reserve(s.size());
  const std::size_t C = p.config.class_count;
  for (std::size_t b0 = 0; b0 < s.size(); b0 += batch) {
    const std::size_t n = std::min(batch, s.size() - b0);
    const auto in = std::span<const float>(s.data).subspan(b0 * s.sample_len, n * s.sample_len);
    const auto r = forward<float>(in, n, p, Mode::eval);
    for (std::size_t i = 0; i < n; ++i) out.push_back(r.probs[i * C + 1]);
  }
  return out;
}

inline double accuracy(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t ok = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) ok += (scores[i] >= 0.5 ? 1 : 0) == labels[i];
  return static_cast<double>(ok) / static_cast<double>(scores.size());
}

// Seeded mini-batch Adam on mean cross-entropy with a per-epoch cosine
// learning rate. Single threaded, so equal inputs give bit-identical results.
inline TrainResult train(const PatchSamples& train_set, const PatchSamples* val_set,
                         const PatchNetConfig& config, const TrainSchedule& sched) {
  config.validate();
  if (train_set.size() == 0) throw InvalidArgument("empty training set");
  if (train_set.sample_len != config.patch_count * config.patch_len()) {
    throw InvalidArgument("sample length does not match the network config");
  }
  if (sched.batch_size == 0) throw InvalidArgument("batch_size must be >= 1");
  TrainResult result;
  auto params = init_params<float>(config);
  AdamState<float> adam(config);
  result.best = params;
  result.last = params;
  double best_val = -1.0;

  std::vector<std::size_t> order(train_set.size());
  std::vector<float> batch_data;
  std::vector<int> batch_labels;
  for (std::size_t epoch = 0; epoch < sched.epochs; ++epoch) {
    EpochLog e;
    e.epoch = epoch;
    e.lr = cosine_lr(epoch, sched.epochs, sched.lr_max, sched.lr_min);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(sched.seed, epoch);
    rng.shuffle(std::span<std::size_t>(order));
    const AdamHyper hyper{e.lr};
    double loss_sum = 0.0;
    try {
      for (std::size_t b0 = 0; b0 < order.size(); b0 += sched.batch_size) {
        const std::size_t n = std::min(sched.batch_size, order.size() - b0);
        batch_data.clear();
        batch_labels.clear();
        for (std::size_t i = b0; i < b0 + n; ++i) {
          const auto s = train_set.sample(order[i]);
          batch_data.insert(batch_data.end(), s.begin(), s.end());
          batch_labels.push_back(train_set.labels[order[i]]);
        }
        auto lg = loss_and_grad<float>(batch_data, batch_labels, params);
        loss_sum += lg.loss * static_cast<double>(n);
        adam_step(params, lg.grads, adam, hyper);
        update_running_stats(params, lg.cache);
      }
      e.loss = loss_sum / static_cast<double>(order.size());
      e.train_acc = accuracy(predict_scores(params, train_set), train_set.labels);
      if (val_set && val_set->size() > 0) {
        e.val_acc = accuracy(predict_scores(params, *val_set), val_set->labels);
      }
    } catch (const NumericalFailure& err) {
      result.diverged = true;
      result.failure = "epoch " + std::to_string(epoch) + ": " + err.what();
      break;
    }
    result.log.push_back(e);
    result.last = params;
    if (!val_set || val_set->size() == 0) {
      result.best = params;
      result.best_epoch = epoch;
    } else if (e.val_acc >= best_val) {
      best_val = e.val_acc;
      result.best = params;
      result.best_epoch = epoch;
      result.best_val_acc = e.val_acc;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// PNC1 checkpoints: "PNC1", u32 version, u32 length + JSON metadata (holding
// at least "config"), then per tensor: u32 name length, UTF-8 name, u32 rank,
// u32 dims, little-endian float32 data. Tensors run to end of file.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const PatchNetParams<float>& p, json meta = json::object()) {
  meta["config"] = p.config;
  const std::string blob = meta.dump();
  std::string out = "PNC1";
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint32_t>(blob.size()));
  out += blob;
  p.for_each([&](const std::string& name, const Tensor<float>& t, bool) {
    detail::put_le(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t dim : t.shape) detail::put_le(out, static_cast<std::uint32_t>(dim));
    for (float x : t.data) detail::put_le(out, x);
  });
  return out;
}

struct Checkpoint {
  PatchNetParams<float> params;
  json meta;
};

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw IoError("truncated PNC1 checkpoint");
  };
  auto u32 = [&] {
    need(4);
    const auto v = detail::get_le<std::uint32_t>(p + pos);
    pos += 4;
    return v;
  };
  need(4);
  if (bytes.substr(0, 4) != "PNC1") throw IoError("not a PNC1 checkpoint (bad magic)");
  pos = 4;
  if (u32() != kCheckpointVersion) throw IoError("unsupported PNC1 version");
  const std::uint32_t blob_len = u32();
  need(blob_len);
  Checkpoint ck;
  try {
    ck.meta = json::parse(bytes.substr(pos, blob_len));
  } catch (const json::parse_error& e) {
    throw IoError(std::string("malformed PNC1 metadata: ") + e.what());
  }
  pos += blob_len;
  ck.params = PatchNetParams<float>::zeros(ck.meta.at("config").get<PatchNetConfig>());
  std::map<std::string, Tensor<float>*> slots;
  ck.params.for_each([&](const std::string& name, Tensor<float>& t, bool) { slots[name] = &t; });
  std::size_t loaded = 0;
  while (pos < bytes.size()) {
    const std::uint32_t name_len = u32();
    need(name_len);
    const std::string name(bytes.substr(pos, name_len));
    pos += name_len;
    const std::uint32_t rank = u32();
    std::vector<std::size_t> shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(u32());
    const auto it = slots.find(name);
    if (it == slots.end()) throw IoError("unexpected tensor \"" + name + "\" in checkpoint");
    if (it->second->shape != shape) throw IoError("shape mismatch for tensor \"" + name + "\"");
    need(4 * it->second->size());
    for (auto& x : it->second->data) {
      x = detail::get_le<float>(p + pos);
      pos += 4;
    }
    ++loaded;
  }
  if (loaded != slots.size()) throw IoError("checkpoint is missing tensors");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const PatchNetParams<float>& p,
                            json meta = json::object()) {
  detail::write_file(path, encode_checkpoint(p, std::move(meta)));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

}  // namespace patchkit
