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
#include <numbers>
#include <span>

#include "patchkit/errors.hpp"
#include "patchkit/patchnet.hpp"

namespace patchkit {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update of theta in place; `step` is 1-based.
template <typename T>
void adam_update(std::span<T> theta, std::span<const T> grad, std::span<T> m,
                 std::span<T> v, std::size_t step, const AdamHyper& h) {
  if (grad.size() != theta.size() || m.size() != theta.size() ||
      v.size() != theta.size()) {
    throw InvalidArgument("adam_update: state shape mismatch");
  }
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = grad[i];
    const double mi = h.beta1 * m[i] + (1.0 - h.beta1) * g;
    const double vi = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    theta[i] = static_cast<T>(theta[i] - h.lr * (mi / c1) / (std::sqrt(vi / c2) + h.eps));
  }
}

template <typename T>
struct AdamState {
  PatchNetParams<T> m, v;
  std::size_t step = 0;

  explicit AdamState(const PatchNetConfig& c)
      : m(PatchNetParams<T>::zeros_like(c)), v(PatchNetParams<T>::zeros_like(c)) {}
};

// Updates every trainable tensor of params; BN buffers are left alone.
template <typename T>
void adam_step(PatchNetParams<T>& params, PatchNetParams<T>& grads,
               AdamState<T>& state, const AdamHyper& h) {
  if (!(params.config == state.m.config) || !(params.config == grads.config)) {
    throw InvalidArgument("adam_step: configuration mismatch");
  }
  ++state.step;
  auto p = params.trainable();
  auto g = grads.trainable();
  auto m = state.m.trainable();
  auto v = state.v.trainable();
  for (std::size_t i = 0; i < p.size(); ++i) {
    adam_update<T>(p[i]->data, g[i]->data, m[i]->data, v[i]->data, state.step, h);
  }
}

// Cosine decay from lr_max at epoch 0 to lr_min at the final epoch.
inline double cosine_lr(std::size_t epoch, std::size_t epochs, double lr_max,
                        double lr_min) {
  if (epochs <= 1) return lr_max;
  const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace patchkit
