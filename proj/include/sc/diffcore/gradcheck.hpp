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

#ifndef SC_DIFFCORE_GRADCHECK_HPP_
#define SC_DIFFCORE_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "sc/diffcore/graph.hpp"
#include "sc/diffcore/tensor.hpp"

namespace sc {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_fd = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // probes that crossed a branch point
  std::size_t at_noise_floor = 0;  // both gradients within rounding noise of 0
  bool finite = true;
  std::string location;  // first non-finite analytic gradient, if any
};

struct GradCheckReport {
  std::string label;
  double tol = 0.0;
  std::vector<GradCheckEntry> entries;

  bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [&](const auto& e) {
      return e.finite && e.max_rel_error < tol;
    });
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
};

using NamedParam = std::pair<std::string, Tensor<double>*>;
using LossBuilder = std::function<Var<double>(Graph<double>&)>;

namespace detail {

struct Probe {
  double value;
  std::uint64_t branches;
};

inline Probe evaluate(const LossBuilder& f) {
  auto& mon = branch_monitor();
  const BranchMonitor saved = mon;
  mon = BranchMonitor{};
  mon.active = true;
  Graph<double> g;
  Probe p{};
  try {
    p.value = f(g).value().item();
  } catch (...) {
    mon = saved;
    throw;
  }
  p.branches = mon.hash ^ mon.count;
  mon = saved;
  return p;
}

}  // namespace detail

// Compares reverse-mode gradients of the scalar built by `f` against central
// differences for every scalar of every parameter. The error per scalar is
// |g_analytic - g_fd| / (|g_fd| + 1e-8). Probes whose forward pass takes a
// different branch (relu/abs sign, top-k membership) than the unperturbed
// pass are skipped, which excludes non-differentiable points. A scalar whose
// analytic and finite-difference gradients both lie below the rounding noise
// of the difference quotient, 64*eps*|f|/h, is counted as zero instead of
// checked: there the quotient is pure rounding and the relative error
// carries no information.
inline GradCheckReport grad_check(const LossBuilder& f, const std::vector<NamedParam>& params,
                                  double tol, double h = 1e-5, std::string label = {}) {
  GradCheckReport report;
  report.label = std::move(label);
  report.tol = tol;
  for (auto& [name, t] : params) {
    t->set_requires_grad(true);
    t->zero_grad();
  }
  const detail::Probe base = detail::evaluate(f);
  {
    Graph<double> g;
    auto loss = f(g);
    g.backward(loss);
  }
  for (auto& [name, t] : params) {
    GradCheckEntry e;
    e.name = name;
    const std::vector<double> analytic(t->grad().begin(), t->grad().end());
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      if (!std::isfinite(analytic[i])) {
        e.finite = false;
        e.location = name + "[" + std::to_string(i) + "]";
        break;
      }
    }
    if (!e.finite) {
      report.entries.push_back(std::move(e));
      continue;
    }
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double orig = (*t)[i];
      (*t)[i] = orig + h;
      const detail::Probe plus = detail::evaluate(f);
      (*t)[i] = orig - h;
      const detail::Probe minus = detail::evaluate(f);
      (*t)[i] = orig;
      if (plus.branches != base.branches || minus.branches != base.branches) {
        ++e.skipped;
        continue;
      }
      const double fd = (plus.value - minus.value) / (2.0 * h);
      const double noise = 64.0 * std::numeric_limits<double>::epsilon() *
                           std::max({std::abs(plus.value), std::abs(minus.value), 1.0}) / h;
      if (std::abs(fd) <= noise && std::abs(analytic[i]) <= noise) {
        ++e.at_noise_floor;
        continue;
      }
      const double err = std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-8);
      ++e.checked;
      if (err > e.max_rel_error) {
        e.max_rel_error = err;
        e.worst_index = i;
        e.worst_analytic = analytic[i];
        e.worst_fd = fd;
      }
    }
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace sc

#endif  // SC_DIFFCORE_GRADCHECK_HPP_
