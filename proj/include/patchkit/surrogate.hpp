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

// Per-patch-mean linear/logistic classifier. It is the black box explained
// by the attribution engine, and with the identity link it is the additive
// probe whose Shapley values are known in closed form.

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "patchkit/errors.hpp"
#include "patchkit/json_io.hpp"
#include "patchkit/phantom.hpp"
#include "patchkit/shapley.hpp"
#include "patchkit/volume.hpp"

namespace patchkit {

enum class Link { identity, logistic };

inline std::string to_string(Link l) {
  return l == Link::identity ? "identity" : "logistic";
}

inline Link parse_link(const std::string& s) {
  if (s == "identity") return Link::identity;
  if (s == "logistic") return Link::logistic;
  throw InvalidArgument("unknown link \"" + s + "\"");
}

struct SurrogateParams {
  PatchGrid grid;
  std::vector<double> weights;  // one per grid patch
  double bias = 0.0;
  Link link = Link::logistic;
};

inline void to_json(json& j, const SurrogateParams& p) {
  j = json{{"grid", p.grid}, {"link", to_string(p.link)},
           {"weights", p.weights}, {"bias", p.bias}};
}

inline void from_json(const json& j, SurrogateParams& p) {
  p.grid = j.at("grid").get<PatchGrid>();
  p.link = parse_link(j.at("link").get<std::string>());
  p.weights = j.at("weights").get<std::vector<double>>();
  p.bias = j.at("bias").get<double>();
  if (p.weights.size() != p.grid.size()) {
    throw InvalidArgument("surrogate weight count does not match grid");
  }
}

namespace detail {

// Summed-volume table with a zero border: S[(z*(H+1)+y)*(W+1)+x] is the sum
// of voxels with coordinates strictly below (x, y, z).
class IntegralVolume {
 public:
  explicit IntegralVolume(const Volume& v)
      : w_(v.dims().x + 1), h_(v.dims().y + 1), d_(v.dims().z + 1),
        s_(w_ * h_ * d_, 0.0) {
    for (std::size_t z = 1; z < d_; ++z) {
      for (std::size_t y = 1; y < h_; ++y) {
        double row = 0.0;
        for (std::size_t x = 1; x < w_; ++x) {
          row += v.at(x - 1, y - 1, z - 1);
          s_[at(x, y, z)] = row + s_[at(x, y - 1, z)] + s_[at(x, y, z - 1)] -
                            s_[at(x, y - 1, z - 1)];
        }
      }
    }
  }

  double sum(const Region& r) const {
    const Index3 a = r.origin, b = r.end();
    return s_[at(b.x, b.y, b.z)] - s_[at(a.x, b.y, b.z)] - s_[at(b.x, a.y, b.z)] -
           s_[at(b.x, b.y, a.z)] + s_[at(a.x, a.y, b.z)] + s_[at(a.x, b.y, a.z)] +
           s_[at(b.x, a.y, a.z)] - s_[at(a.x, a.y, a.z)];
  }

 private:
  std::size_t at(std::size_t x, std::size_t y, std::size_t z) const {
    return (z * h_ + y) * w_ + x;
  }
  std::size_t w_, h_, d_;
  std::vector<double> s_;
};

inline Region intersect(const Region& a, const Region& b) {
  const Index3 ea = a.end(), eb = b.end();
  const Index3 lo{std::max(a.origin.x, b.origin.x), std::max(a.origin.y, b.origin.y),
                  std::max(a.origin.z, b.origin.z)};
  const Index3 hi{std::min(ea.x, eb.x), std::min(ea.y, eb.y), std::min(ea.z, eb.z)};
  return {lo, {hi.x - lo.x, hi.y - lo.y, hi.z - lo.z}};
}

}  // namespace detail

class SurrogateModel final : public Predictor {
 public:
  explicit SurrogateModel(SurrogateParams params) : p_(std::move(params)) {
    if (p_.weights.size() != p_.grid.size()) {
      throw InvalidArgument("surrogate weight count does not match grid");
    }
    for (double w : p_.weights) {
      if (!std::isfinite(w)) throw InvalidArgument("non-finite surrogate weight");
    }
  }

  const SurrogateParams& params() const { return p_; }

  double score(std::span<const double> features) const {
    double z = p_.bias;
    for (std::size_t k = 0; k < features.size(); ++k) z += p_.weights[k] * features[k];
    return p_.link == Link::logistic ? 1.0 / (1.0 + std::exp(-z)) : z;
  }

  Probabilities predict(const Volume& v) const override {
    const double p = score(patch_means(v, p_.grid));
    return {1.0 - p, p};
  }

  // Patch sums come from a summed-volume table, so each perturbed evaluation
  // costs O(patches touched) instead of a full volume pass.
  std::unique_ptr<BoundPredictor> bind(const Volume& v) const override {
    if (!(v.dims() == p_.grid.volume_dims)) {
      throw InvalidArgument("volume dims do not match surrogate grid");
    }
    struct Pooled final : BoundPredictor {
      Pooled(const SurrogateModel& m, const Volume& v) : m(m), table(v) {
        const auto& g = m.p_.grid;
        sums.reserve(g.size());
        for (const Region& r : g.regions) sums.push_back(table.sum(r));
      }
      Probabilities operator()(std::span<const Region> zeroed) const override {
        const auto& g = m.p_.grid;
        for (std::size_t i = 0; i < zeroed.size(); ++i) {
          require_inside(zeroed[i], g.volume_dims);
          for (std::size_t j = 0; j < i; ++j) {
            if (zeroed[i].intersects(zeroed[j])) {
              throw InvalidArgument("pooled route needs disjoint zero regions");
            }
          }
        }
        std::vector<double> feat = sums;
        const std::size_t p = g.patch_edge;
        for (const Region& r : zeroed) {
          const Index3 e = r.end();
          const std::size_t kx1 = std::min((e.x - 1) / p + 1, g.counts.x);
          const std::size_t ky1 = std::min((e.y - 1) / p + 1, g.counts.y);
          const std::size_t kz1 = std::min((e.z - 1) / p + 1, g.counts.z);
          for (std::size_t kz = r.origin.z / p; kz < kz1; ++kz) {
            for (std::size_t ky = r.origin.y / p; ky < ky1; ++ky) {
              for (std::size_t kx = r.origin.x / p; kx < kx1; ++kx) {
                const std::size_t k = g.index_of(kx, ky, kz);
                feat[k] -= table.sum(detail::intersect(r, g.regions[k]));
              }
            }
          }
        }
        const double vol = static_cast<double>(p * p * p);
        for (double& f : feat) f /= vol;
        const double s = m.score(feat);
        return {1.0 - s, s};
      }
      const SurrogateModel& m;
      detail::IntegralVolume table;
      std::vector<double> sums;
    };
    return std::make_unique<Pooled>(*this, v);
  }

 private:
  SurrogateParams p_;
};

struct SurrogateTrainOptions {
  Link link = Link::logistic;
  double l2 = 1e-2;
  std::size_t max_iter = 20000;
  double tol = 1e-7;  // on the gradient norm
};

struct SurrogateFit {
  SurrogateParams params;
  std::size_t iterations = 0;
  bool converged = false;
  double loss = 0.0;
  double train_accuracy = 0.0;
};

// Full-batch gradient descent on centred patch-mean features: logistic loss
// for Link::logistic, half squared error to the labels for Link::identity,
// plus (l2/2)|w|^2. The step is 1/L with L bounded by the feature-covariance
// trace.
inline SurrogateFit surrogate_train(const Dataset& ds, const PatchGrid& grid,
                                    const SurrogateTrainOptions& opts = {}) {
  std::size_t n0 = 0, n1 = 0;
  for (int l : ds.labels) (l == 1 ? n1 : n0)++;
  if (n0 < 2 || n1 < 2) {
    throw InvalidArgument("surrogate training needs two samples per class");
  }
  const auto rows = patch_feature_table(ds, grid);
  const std::size_t n = rows.size(), k = grid.size();
  std::vector<double> mu(k, 0.0);
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < k; ++j) mu[j] += r[j];
  }
  for (double& m : mu) m /= static_cast<double>(n);
  std::vector<std::vector<double>> xc(rows);
  double trace = 0.0;
  for (auto& r : xc) {
    for (std::size_t j = 0; j < k; ++j) {
      r[j] -= mu[j];
      trace += r[j] * r[j];
    }
  }
  trace /= static_cast<double>(n);
  const double curvature = opts.link == Link::logistic ? 0.25 : 1.0;
  const double step = 1.0 / (curvature * std::max(trace, 1.0) + opts.l2);

  std::vector<double> w(k, 0.0), gw(k);
  double b = 0.0;
  auto predict_row = [&](const std::vector<double>& x) {
    double z = b;
    for (std::size_t j = 0; j < k; ++j) z += w[j] * x[j];
    return opts.link == Link::logistic ? 1.0 / (1.0 + std::exp(-z)) : z;
  };
  auto objective = [&] {
    double loss = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double p = predict_row(xc[s]);
      const double y = ds.labels[s];
      if (opts.link == Link::logistic) {
        const double pc = std::clamp(p, 1e-300, 1.0 - 1e-16);
        loss -= y * std::log(pc) + (1 - y) * std::log1p(-pc);
      } else {
        loss += 0.5 * (p - y) * (p - y);
      }
    }
    double reg = 0.0;
    for (double x : w) reg += x * x;
    return loss / static_cast<double>(n) + 0.5 * opts.l2 * reg;
  };

  SurrogateFit fit;
  double best_loss = objective();
  std::vector<double> best_w = w;
  double best_b = b;
  for (fit.iterations = 0; fit.iterations < opts.max_iter; ++fit.iterations) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double r = predict_row(xc[s]) - ds.labels[s];
      gb += r;
      for (std::size_t j = 0; j < k; ++j) gw[j] += r * xc[s][j];
    }
    double gnorm2 = 0.0;
    gb /= static_cast<double>(n);
    gnorm2 += gb * gb;
    for (std::size_t j = 0; j < k; ++j) {
      gw[j] = gw[j] / static_cast<double>(n) + opts.l2 * w[j];
      gnorm2 += gw[j] * gw[j];
    }
    if (std::sqrt(gnorm2) < opts.tol) {
      fit.converged = true;
      break;
    }
    b -= step * gb;
    for (std::size_t j = 0; j < k; ++j) w[j] -= step * gw[j];
    const double loss = objective();
    if (!std::isfinite(loss)) break;
    if (loss <= best_loss) {
      best_loss = loss;
      best_w = w;
      best_b = b;
    }
  }
  // The model consumes raw features: fold the centring into the bias.
  double raw_bias = best_b;
  for (std::size_t j = 0; j < k; ++j) raw_bias -= best_w[j] * mu[j];
  fit.params = {grid, best_w, raw_bias, opts.link};
  fit.loss = best_loss;
  const SurrogateModel model(fit.params);
  std::size_t correct = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const int pred = model.score(rows[s]) >= 0.5 ? 1 : 0;
    correct += pred == ds.labels[s];
  }
  fit.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return fit;
}

}  // namespace patchkit
