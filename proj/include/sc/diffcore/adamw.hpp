/* Copyright 2026 The sparse-contrast Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef SC_DIFFCORE_ADAMW_HPP_
#define SC_DIFFCORE_ADAMW_HPP_

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sc/diffcore/tensor.hpp"
#include "sc/error.hpp"

namespace sc {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Moments are keyed by parameter name. Each slot keeps its own step count so
// bias correction stays exact when parameter groups are updated on
// alternating steps.
template <class T>
struct OptimizerState {
  struct Slot {
    std::vector<T> m;
    std::vector<T> v;
    std::uint64_t step = 0;
  };

  AdamWConfig config;
  std::map<std::string, Slot> slots;
  std::uint64_t updates = 0;  // number of adamw_step calls
};

// One decoupled-weight-decay Adam update of `param` using its grad slot. The
// decay p <- p - lr*wd*p is applied before the Adam step. Throws, leaving the
// parameter and moments untouched, if the gradient holds a NaN or Inf.
template <class T>
void adamw_update(OptimizerState<T>& state, const std::string& name, Tensor<T>& param) {
  const AdamWConfig& c = state.config;
  if (!(c.lr > 0)) throw ConfigError("adamw: lr must be > 0");
  auto& slot = state.slots[name];
  if (slot.m.empty()) {
    slot.m.assign(param.size(), T{0});
    slot.v.assign(param.size(), T{0});
  }
  if (slot.m.size() != param.size()) {
    throw ShapeError("adamw_step", "moment size " + std::to_string(slot.m.size()) +
                                       " for parameter " + name + " " +
                                       shape_str(param.shape()));
  }
  if (!param.has_grad()) param.zero_grad();
  auto g = param.grad();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) {
      throw DomainError("adamw_step", "non-finite gradient in " + name + "[" +
                                          std::to_string(i) + "]");
    }
  }
  const std::uint64_t t = slot.step + 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  auto p = param.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    double pi = static_cast<double>(p[i]);
    pi -= c.lr * c.weight_decay * pi;
    const double gi = static_cast<double>(g[i]);
    const double m = c.beta1 * static_cast<double>(slot.m[i]) + (1.0 - c.beta1) * gi;
    const double v = c.beta2 * static_cast<double>(slot.v[i]) + (1.0 - c.beta2) * gi * gi;
    slot.m[i] = static_cast<T>(m);
    slot.v[i] = static_cast<T>(v);
    pi -= c.lr * (m / bc1) / (std::sqrt(v / bc2) + c.eps);
    p[i] = static_cast<T>(pi);
  }
  slot.step = t;
}

// Updates every named parameter of `params` selected by `include`.
template <class T, class ParamMap, class Pred>
void adamw_step(OptimizerState<T>& state, ParamMap& params, Pred include) {
  // Validate every gradient first so a NaN aborts the whole step.
  for (auto& [name, tensor] : params) {
    if (!include(name) || !tensor.has_grad()) continue;
    for (T gi : tensor.grad()) {
      if (!std::isfinite(gi)) {
        throw DomainError("adamw_step", "non-finite gradient in " + name);
      }
    }
  }
  for (auto& [name, tensor] : params) {
    if (include(name)) adamw_update(state, name, tensor);
  }
  ++state.updates;
}

}  // namespace sc

#endif  // SC_DIFFCORE_ADAMW_HPP_
