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

// Patch-grid classifier: linear patch projection plus learned position
// embedding, then `depth` blocks of
//   global spatial mixing   X' = BN(DepthwiseConv_mxm(X)) + X
//   local channel mixing    Z  = BN(ReLU(PointwiseConv(X')))
// then spatial average pooling and an affine classifier.
//
// Activations are laid out (batch, channel d, site s) with s = row * m + col
// over the m x m patch plane. Backward passes are written out per op.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "patchkit/errors.hpp"
#include "patchkit/json_io.hpp"
#include "patchkit/rng.hpp"

namespace patchkit {

struct PatchNetConfig {
  std::size_t patch_edge = 8;    // p
  std::size_t patch_count = 36;  // M = m^2
  std::size_t embed_dim = 64;    // d
  std::size_t depth = 4;         // L
  std::size_t class_count = 2;
  std::uint64_t seed = 7;

  std::size_t side() const {
    return static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patch_count))));
  }
  std::size_t patch_len() const { return patch_edge * patch_edge * patch_edge; }

  void validate() const {
    if (patch_edge < 1) throw InvalidArgument("patch_edge must be >= 1");
    if (patch_count < 1 || side() * side() != patch_count) {
      throw InvalidArgument("patch_count must be a perfect square");
    }
    if (embed_dim < 1) throw InvalidArgument("embed_dim must be >= 1");
    if (class_count < 2) throw InvalidArgument("class_count must be >= 2");
  }
  friend bool operator==(const PatchNetConfig&, const PatchNetConfig&) = default;
};

inline void to_json(json& j, const PatchNetConfig& c) {
  j = json{{"patch_edge", c.patch_edge}, {"patch_count", c.patch_count},
           {"embed_dim", c.embed_dim},   {"depth", c.depth},
           {"class_count", c.class_count}, {"seed", c.seed}};
}

inline void from_json(const json& j, PatchNetConfig& c) {
  const PatchNetConfig d;
  c.patch_edge = j.value("patch_edge", d.patch_edge);
  c.patch_count = j.value("patch_count", d.patch_count);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.depth = j.value("depth", d.depth);
  c.class_count = j.value("class_count", d.class_count);
  c.seed = j.value("seed", d.seed);
}

template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, T fill = T{})
      : shape(std::move(s)), data(count(shape), fill) {}

  static std::size_t count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t x : s) n *= x;
    return n;
  }
  std::size_t size() const { return data.size(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma, beta;                 // trainable
  Tensor<T> running_mean, running_var;   // buffers

  static BatchNorm identity(std::size_t d) {
    return {Tensor<T>({d}, T(1)), Tensor<T>({d}, T(0)), Tensor<T>({d}, T(0)),
            Tensor<T>({d}, T(1))};
  }
  friend bool operator==(const BatchNorm&, const BatchNorm&) = default;
};

template <typename T>
struct PatchNetBlock {
  Tensor<T> gsi_kernel;  // (d, m, m), depthwise
  Tensor<T> gsi_bias;    // (d)
  BatchNorm<T> gsi_bn;
  Tensor<T> lpi_weight;  // (d_out, d_in)
  Tensor<T> lpi_bias;    // (d)
  BatchNorm<T> lpi_bn;
  friend bool operator==(const PatchNetBlock&, const PatchNetBlock&) = default;
};

template <typename T>
struct PatchNetParams {
  PatchNetConfig config;
  Tensor<T> proj;        // (p^3, d)
  Tensor<T> pos;         // (M, d)
  std::vector<PatchNetBlock<T>> blocks;
  Tensor<T> cls_weight;  // (d, classes)
  Tensor<T> cls_bias;    // (classes)

  // Visits every tensor in a fixed order as fn(name, tensor, trainable).
  template <typename Fn>
  void for_each(Fn&& fn) {
    fn(std::string("proj"), proj, true);
    fn(std::string("pos"), pos, true);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const std::string b = "blocks." + std::to_string(l) + ".";
      auto& blk = blocks[l];
      fn(b + "gsi.kernel", blk.gsi_kernel, true);
      fn(b + "gsi.bias", blk.gsi_bias, true);
      fn(b + "gsi.bn.gamma", blk.gsi_bn.gamma, true);
      fn(b + "gsi.bn.beta", blk.gsi_bn.beta, true);
      fn(b + "gsi.bn.running_mean", blk.gsi_bn.running_mean, false);
      fn(b + "gsi.bn.running_var", blk.gsi_bn.running_var, false);
      fn(b + "lpi.weight", blk.lpi_weight, true);
      fn(b + "lpi.bias", blk.lpi_bias, true);
      fn(b + "lpi.bn.gamma", blk.lpi_bn.gamma, true);
      fn(b + "lpi.bn.beta", blk.lpi_bn.beta, true);
      fn(b + "lpi.bn.running_mean", blk.lpi_bn.running_mean, false);
      fn(b + "lpi.bn.running_var", blk.lpi_bn.running_var, false);
    }
    fn(std::string("classifier.weight"), cls_weight, true);
    fn(std::string("classifier.bias"), cls_bias, true);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    const_cast<PatchNetParams*>(this)->for_each(
        [&](const std::string& name, Tensor<T>& t, bool trainable) {
          fn(name, static_cast<const Tensor<T>&>(t), trainable);
        });
  }

  std::vector<Tensor<T>*> trainable() {
    std::vector<Tensor<T>*> out;
    for_each([&](const std::string&, Tensor<T>& t, bool tr) {
      if (tr) out.push_back(&t);
    });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t, bool tr) {
      if (tr) n += t.size();
    });
    return n;
  }

  // Every tensor filled with 0, e.g. gradient or optimizer moment buffers.
  static PatchNetParams zeros_like(const PatchNetConfig& c) {
    auto p = zeros(c);
    p.for_each([](const std::string&, Tensor<T>& t, bool) {
      std::fill(t.data.begin(), t.data.end(), T(0));
    });
    return p;
  }

  // Correctly shaped parameters: zero weights, identity batch norms.
  static PatchNetParams zeros(const PatchNetConfig& c) {
    c.validate();
    const std::size_t d = c.embed_dim, m = c.side();
    PatchNetParams p;
    p.config = c;
    p.proj = Tensor<T>({c.patch_len(), d});
    p.pos = Tensor<T>({c.patch_count, d});
    for (std::size_t l = 0; l < c.depth; ++l) {
      PatchNetBlock<T> b;
      b.gsi_kernel = Tensor<T>({d, m, m});
      b.gsi_bias = Tensor<T>({d});
      b.gsi_bn = BatchNorm<T>::identity(d);
      b.lpi_weight = Tensor<T>({d, d});
      b.lpi_bias = Tensor<T>({d});
      b.lpi_bn = BatchNorm<T>::identity(d);
      p.blocks.push_back(std::move(b));
    }
    p.cls_weight = Tensor<T>({d, c.class_count});
    p.cls_bias = Tensor<T>({c.class_count});
    return p;
  }

  template <typename U>
  PatchNetParams<U> cast() const {
    auto out = PatchNetParams<U>::zeros(config);
    std::vector<const Tensor<T>*> src;
    for_each([&](const std::string&, const Tensor<T>& t, bool) { src.push_back(&t); });
    std::size_t i = 0;
    out.for_each([&](const std::string&, Tensor<U>& t, bool) {
      const auto& s = *src[i++];
      for (std::size_t k = 0; k < t.size(); ++k) t[k] = static_cast<U>(s[k]);
    });
    return out;
  }

  friend bool operator==(const PatchNetParams&, const PatchNetParams&) = default;
};

// Xavier-uniform projection, pointwise and classifier weights; N(0, 0.02)
// depthwise kernels and position embedding; zero biases; BN gamma 1, beta 0.
template <typename T>
PatchNetParams<T> init_params(const PatchNetConfig& c) {
  auto p = PatchNetParams<T>::zeros(c);
  Rng rng(c.seed);
  auto xavier = [&](Tensor<T>& t, std::size_t fan_in, std::size_t fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& x : t.data) x = static_cast<T>(rng.uniform(-a, a));
  };
  auto normal = [&](Tensor<T>& t, double sd) {
    for (auto& x : t.data) x = static_cast<T>(sd * rng.normal());
  };
  const std::size_t d = c.embed_dim;
  xavier(p.proj, c.patch_len(), d);
  normal(p.pos, 0.02);
  for (auto& b : p.blocks) {
    normal(b.gsi_kernel, 0.02);
    xavier(b.lpi_weight, d, d);
  }
  xavier(p.cls_weight, d, c.class_count);
  return p;
}

enum class Mode { train, eval };

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

template <typename T>
struct BnCache {
  std::vector<T> xhat;
  std::vector<double> mean, var, inv_std;
};

template <typename T>
struct BlockCache {
  std::vector<T> gsi_in;
  BnCache<T> gsi_bn;
  std::vector<T> lpi_in;
  std::vector<T> lpi_pre;  // before ReLU
  BnCache<T> lpi_bn;
};

template <typename T>
struct ForwardCache {
  std::size_t batch = 0;
  std::vector<BlockCache<T>> blocks;
  std::vector<T> pooled;  // (B, d)
};

template <typename T>
struct ForwardResult {
  std::vector<T> logits;  // (B, classes)
  std::vector<T> probs;   // (B, classes)
};

namespace net_detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}

// In-place batch norm over (B, d, S): statistics per channel over B * S.
template <typename T>
void bn_forward(std::vector<T>& x, std::size_t batch, std::size_t d, std::size_t S,
                const BatchNorm<T>& bn, Mode mode, BnCache<T>* cache) {
  const double n = static_cast<double>(batch * S);
  if (mode == Mode::eval) {
    for (std::size_t c = 0; c < d; ++c) {
      const double rv = static_cast<double>(bn.running_var[c]);
      if (!(rv > 0.0) || !std::isfinite(rv) ||
          !std::isfinite(static_cast<double>(bn.running_mean[c]))) {
        throw InvalidState("batch norm running statistics are not initialised");
      }
    }
  }
  if (cache) {
    cache->xhat.resize(x.size());
    cache->mean.assign(d, 0.0);
    cache->var.assign(d, 0.0);
    cache->inv_std.assign(d, 0.0);
  }
  for (std::size_t c = 0; c < d; ++c) {
    double mean, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* row = x.data() + (b * d + c) * S;
        for (std::size_t i = 0; i < S; ++i) s += row[i];
      }
      mean = s / n;
      double ss = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* row = x.data() + (b * d + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const double u = row[i] - mean;
          ss += u * u;
        }
      }
      var = ss / n;
    } else {
      mean = bn.running_mean[c];
      var = bn.running_var[c];
    }
    const double inv = 1.0 / std::sqrt(var + kBnEps);
    const double g = bn.gamma[c], be = bn.beta[c];
    if (cache) {
      cache->mean[c] = mean;
      cache->var[c] = var;
      cache->inv_std[c] = inv;
    }
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * d + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const T xh = static_cast<T>((x[off + i] - mean) * inv);
        if (cache) cache->xhat[off + i] = xh;
        x[off + i] = static_cast<T>(g * xh + be);
      }
    }
  }
}

// dy is replaced by dx; gamma/beta gradients accumulate into dbn.
template <typename T>
void bn_backward(std::vector<T>& dy, std::size_t batch, std::size_t d, std::size_t S,
                 const BatchNorm<T>& bn, const BnCache<T>& cache, BatchNorm<T>& dbn) {
  const double n = static_cast<double>(batch * S);
  for (std::size_t c = 0; c < d; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * d + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        sum_dy += dy[off + i];
        sum_dy_xhat += static_cast<double>(dy[off + i]) * cache.xhat[off + i];
      }
    }
    dbn.gamma[c] += static_cast<T>(sum_dy_xhat);
    dbn.beta[c] += static_cast<T>(sum_dy);
    const double k = static_cast<double>(bn.gamma[c]) * cache.inv_std[c] / n;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * d + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        dy[off + i] = static_cast<T>(
            k * (n * dy[off + i] - sum_dy - cache.xhat[off + i] * sum_dy_xhat));
      }
    }
  }
}

template <typename T>
void check_finite(std::span<const T> v, const char* where) {
  for (T x : v) {
    if (!std::isfinite(static_cast<double>(x))) {
      throw NumericalFailure(std::string("non-finite activation in ") + where);
    }
  }
}

}  // namespace net_detail

// (B, M, p^3) flattened patches -> (B, d, M): row s is patches[s] . E + E_pos[s].
template <typename T>
std::vector<T> embed_patches(std::span<const T> patches, std::size_t batch,
                             const PatchNetParams<T>& p) {
  const auto& c = p.config;
  const std::size_t P = c.patch_len(), M = c.patch_count, d = c.embed_dim;
  net_detail::require(patches.size() == batch * M * P,
                      "embed_patches: expected " + std::to_string(batch * M * P) +
                          " values, got " + std::to_string(patches.size()));
  std::vector<T> out(batch * d * M);
  std::vector<T> acc(d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < M; ++s) {
      for (std::size_t ch = 0; ch < d; ++ch) acc[ch] = p.pos[s * d + ch];
      const T* x = patches.data() + (b * M + s) * P;
      for (std::size_t k = 0; k < P; ++k) {
        const T xv = x[k];
        if (xv == T(0)) continue;
        const T* e = p.proj.data.data() + k * d;
        for (std::size_t ch = 0; ch < d; ++ch) acc[ch] += xv * e[ch];
      }
      for (std::size_t ch = 0; ch < d; ++ch) out[(b * d + ch) * M + s] = acc[ch];
    }
  }
  return out;
}

// Depthwise m x m convolution with same-size zero padding (low side
// floor((m-1)/2), the remainder on the high side), BN, then residual add.
template <typename T>
std::vector<T> gsi_block(const std::vector<T>& x, std::size_t batch,
                         const PatchNetBlock<T>& blk, std::size_t m, Mode mode,
                         BlockCache<T>* cache = nullptr) {
  const std::size_t d = blk.gsi_bias.size(), S = m * m;
  net_detail::require(x.size() == batch * d * S, "gsi_block: input shape mismatch");
  const std::ptrdiff_t lo = static_cast<std::ptrdiff_t>((m - 1) / 2);
  const auto im = static_cast<std::ptrdiff_t>(m);
  std::vector<T> y(x.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < d; ++c) {
      const T* in = x.data() + (b * d + c) * S;
      const T* k = blk.gsi_kernel.data.data() + c * S;
      T* out = y.data() + (b * d + c) * S;
      for (std::ptrdiff_t i = 0; i < im; ++i) {
        for (std::ptrdiff_t j = 0; j < im; ++j) {
          T acc = blk.gsi_bias[c];
          for (std::ptrdiff_t u = 0; u < im; ++u) {
            const std::ptrdiff_t ii = i + u - lo;
            if (ii < 0 || ii >= im) continue;
            for (std::ptrdiff_t v = 0; v < im; ++v) {
              const std::ptrdiff_t jj = j + v - lo;
              if (jj < 0 || jj >= im) continue;
              acc += k[u * im + v] * in[ii * im + jj];
            }
          }
          out[i * im + j] = acc;
        }
      }
    }
  }
  net_detail::bn_forward(y, batch, d, S, blk.gsi_bn, mode,
                         cache ? &cache->gsi_bn : nullptr);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
  if (cache) cache->gsi_in = x;
  return y;
}

// Pointwise (1x1) channel mixing, ReLU, then BN.
template <typename T>
std::vector<T> lpi_block(const std::vector<T>& x, std::size_t batch,
                         const PatchNetBlock<T>& blk, std::size_t S, Mode mode,
                         BlockCache<T>* cache = nullptr) {
  const std::size_t d = blk.lpi_bias.size();
  net_detail::require(x.size() == batch * d * S, "lpi_block: input shape mismatch");
  std::vector<T> y(x.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t co = 0; co < d; ++co) {
      T* out = y.data() + (b * d + co) * S;
      std::fill(out, out + S, blk.lpi_bias[co]);
      const T* w = blk.lpi_weight.data.data() + co * d;
      for (std::size_t ci = 0; ci < d; ++ci) {
        const T wv = w[ci];
        const T* in = x.data() + (b * d + ci) * S;
        for (std::size_t s = 0; s < S; ++s) out[s] += wv * in[s];
      }
    }
  }
  if (cache) {
    cache->lpi_in = x;
    cache->lpi_pre = y;
  }
  for (T& v : y) v = v > T(0) ? v : T(0);
  net_detail::bn_forward(y, batch, d, S, blk.lpi_bn, mode,
                         cache ? &cache->lpi_bn : nullptr);
  return y;
}

template <typename T>
ForwardResult<T> forward(std::span<const T> patches, std::size_t batch,
                         const PatchNetParams<T>& p, Mode mode,
                         ForwardCache<T>* cache = nullptr) {
  const auto& c = p.config;
  const std::size_t d = c.embed_dim, m = c.side(), S = c.patch_count,
                    C = c.class_count;
  net_detail::require(batch >= 1, "forward: empty batch");
  std::vector<T> h = embed_patches(patches, batch, p);
  if (cache) {
    cache->batch = batch;
    cache->blocks.assign(p.blocks.size(), {});
  }
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    BlockCache<T>* bc = cache ? &cache->blocks[l] : nullptr;
    h = gsi_block(h, batch, p.blocks[l], m, mode, bc);
    h = lpi_block(h, batch, p.blocks[l], S, mode, bc);
  }
  std::vector<T> pooled(batch * d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ch = 0; ch < d; ++ch) {
      const T* row = h.data() + (b * d + ch) * S;
      double s = 0.0;
      for (std::size_t i = 0; i < S; ++i) s += row[i];
      pooled[b * d + ch] = static_cast<T>(s / static_cast<double>(S));
    }
  }
  ForwardResult<T> r;
  r.logits.resize(batch * C);
  r.probs.resize(batch * C);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < C; ++j) {
      T z = p.cls_bias[j];
      for (std::size_t ch = 0; ch < d; ++ch) z += pooled[b * d + ch] * p.cls_weight[ch * C + j];
      r.logits[b * C + j] = z;
    }
    T mx = r.logits[b * C];
    for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, r.logits[b * C + j]);
    double den = 0.0;
    for (std::size_t j = 0; j < C; ++j) den += std::exp(static_cast<double>(r.logits[b * C + j] - mx));
    for (std::size_t j = 0; j < C; ++j) {
      r.probs[b * C + j] =
          static_cast<T>(std::exp(static_cast<double>(r.logits[b * C + j] - mx)) / den);
    }
  }
  net_detail::check_finite<T>(r.logits, "forward");
  if (cache) cache->pooled = std::move(pooled);
  return r;
}

// Mean cross-entropy of logits (B, C) against integer labels.
template <typename T>
double cross_entropy(std::span<const T> logits, std::span<const int> labels,
                     std::size_t classes) {
  const std::size_t batch = labels.size();
  net_detail::require(batch >= 1 && logits.size() == batch * classes,
                      "cross_entropy: shape mismatch");
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t y = static_cast<std::size_t>(labels[b]);
    net_detail::require(y < classes, "cross_entropy: label out of range");
    double mx = logits[b * classes];
    for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, double(logits[b * classes + j]));
    double den = 0.0;
    for (std::size_t j = 0; j < classes; ++j) den += std::exp(double(logits[b * classes + j]) - mx);
    loss += mx + std::log(den) - double(logits[b * classes + y]);
  }
  return loss / static_cast<double>(batch);
}

template <typename T>
struct LossAndGrad {
  double loss = 0.0;
  PatchNetParams<T> grads;
  ForwardCache<T> cache;  // batch statistics for the running-stat update
  ForwardResult<T> out;
};

// Train-mode forward and full reverse pass. Parameters are not modified; use
// update_running_stats() with the returned cache to advance BN buffers.
template <typename T>
LossAndGrad<T> loss_and_grad(std::span<const T> patches, std::span<const int> labels,
                             const PatchNetParams<T>& p) {
  const auto& c = p.config;
  const std::size_t batch = labels.size();
  const std::size_t d = c.embed_dim, m = c.side(), S = c.patch_count,
                    C = c.class_count, P = c.patch_len(), M = c.patch_count;
  net_detail::require(batch >= 1, "loss_and_grad: empty batch");
  LossAndGrad<T> r;
  r.out = forward(patches, batch, p, Mode::train, &r.cache);
  r.loss = cross_entropy<T>(r.out.logits, labels, C);
  if (!std::isfinite(r.loss)) {
    throw NumericalFailure("non-finite loss " + std::to_string(r.loss) +
                           " (first logit " + std::to_string(double(r.out.logits[0])) + ")");
  }
  auto& g = r.grads;
  g = PatchNetParams<T>::zeros_like(c);

  // Classifier and pooling.
  const T inv_b = T(1) / static_cast<T>(batch);
  std::vector<T> dh(batch * d * S);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < C; ++j) {
      const T dz = (r.out.probs[b * C + j] - (static_cast<std::size_t>(labels[b]) == j ? T(1) : T(0))) * inv_b;
      g.cls_bias[j] += dz;
      for (std::size_t ch = 0; ch < d; ++ch) {
        g.cls_weight[ch * C + j] += r.cache.pooled[b * d + ch] * dz;
      }
    }
    for (std::size_t ch = 0; ch < d; ++ch) {
      T dp = 0;
      for (std::size_t j = 0; j < C; ++j) {
        dp += p.cls_weight[ch * C + j] *
              (r.out.probs[b * C + j] - (static_cast<std::size_t>(labels[b]) == j ? T(1) : T(0))) * inv_b;
      }
      const T ds = dp / static_cast<T>(S);
      std::fill_n(dh.begin() + static_cast<std::ptrdiff_t>((b * d + ch) * S), S, ds);
    }
  }

  const std::ptrdiff_t lo = static_cast<std::ptrdiff_t>((m - 1) / 2);
  const auto im = static_cast<std::ptrdiff_t>(m);
  for (std::size_t l = p.blocks.size(); l-- > 0;) {
    const auto& blk = p.blocks[l];
    auto& gb = g.blocks[l];
    const auto& bc = r.cache.blocks[l];

    // LPI: BN(ReLU(W x + b)).
    net_detail::bn_backward(dh, batch, d, S, blk.lpi_bn, bc.lpi_bn, gb.lpi_bn);
    for (std::size_t i = 0; i < dh.size(); ++i) {
      if (!(bc.lpi_pre[i] > T(0))) dh[i] = T(0);
    }
    std::vector<T> dx(batch * d * S, T(0));
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t co = 0; co < d; ++co) {
        const T* dpre = dh.data() + (b * d + co) * S;
        T bsum = 0;
        for (std::size_t s = 0; s < S; ++s) bsum += dpre[s];
        gb.lpi_bias[co] += bsum;
        for (std::size_t ci = 0; ci < d; ++ci) {
          const T* in = bc.lpi_in.data() + (b * d + ci) * S;
          T* din = dx.data() + (b * d + ci) * S;
          const T w = blk.lpi_weight[co * d + ci];
          T acc = 0;
          for (std::size_t s = 0; s < S; ++s) {
            acc += dpre[s] * in[s];
            din[s] += w * dpre[s];
          }
          gb.lpi_weight[co * d + ci] += acc;
        }
      }
    }
    dh = std::move(dx);

    // GSI: BN(conv(x)) + x.
    std::vector<T> dconv = dh;
    net_detail::bn_backward(dconv, batch, d, S, blk.gsi_bn, bc.gsi_bn, gb.gsi_bn);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t ch = 0; ch < d; ++ch) {
        const T* dy = dconv.data() + (b * d + ch) * S;
        const T* in = bc.gsi_in.data() + (b * d + ch) * S;
        const T* k = blk.gsi_kernel.data.data() + ch * S;
        T* dk = gb.gsi_kernel.data.data() + ch * S;
        T* din = dh.data() + (b * d + ch) * S;
        for (std::ptrdiff_t i = 0; i < im; ++i) {
          for (std::ptrdiff_t j = 0; j < im; ++j) {
            const T go = dy[i * im + j];
            gb.gsi_bias[ch] += go;
            for (std::ptrdiff_t u = 0; u < im; ++u) {
              const std::ptrdiff_t ii = i + u - lo;
              if (ii < 0 || ii >= im) continue;
              for (std::ptrdiff_t v = 0; v < im; ++v) {
                const std::ptrdiff_t jj = j + v - lo;
                if (jj < 0 || jj >= im) continue;
                dk[u * im + v] += go * in[ii * im + jj];
                din[ii * im + jj] += go * k[u * im + v];
              }
            }
          }
        }
      }
    }
  }

  // Embedding.
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < M; ++s) {
      const T* x = patches.data() + (b * M + s) * P;
      for (std::size_t ch = 0; ch < d; ++ch) {
        const T go = dh[(b * d + ch) * M + s];
        g.pos[s * d + ch] += go;
      }
      for (std::size_t k = 0; k < P; ++k) {
        const T xv = x[k];
        if (xv == T(0)) continue;
        T* ge = g.proj.data.data() + k * d;
        for (std::size_t ch = 0; ch < d; ++ch) ge[ch] += xv * dh[(b * d + ch) * M + s];
      }
    }
  }
  return r;
}

// Exponential moving average of the batch statistics recorded in `cache`.
template <typename T>
void update_running_stats(PatchNetParams<T>& p, const ForwardCache<T>& cache,
                          double momentum = kBnMomentum) {
  auto upd = [&](BatchNorm<T>& bn, const BnCache<T>& bc) {
    for (std::size_t c = 0; c < bn.gamma.size(); ++c) {
      bn.running_mean[c] = static_cast<T>((1 - momentum) * bn.running_mean[c] + momentum * bc.mean[c]);
      bn.running_var[c] = static_cast<T>((1 - momentum) * bn.running_var[c] + momentum * bc.var[c]);
    }
  };
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    upd(p.blocks[l].gsi_bn, cache.blocks[l].gsi_bn);
    upd(p.blocks[l].lpi_bn, cache.blocks[l].lpi_bn);
  }
}

}  // namespace patchkit
