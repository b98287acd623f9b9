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

#ifndef SC_LOSSES_HPP_
#define SC_LOSSES_HPP_

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "sc/diffcore/graph.hpp"
#include "sc/diffcore/ops.hpp"
#include "sc/error.hpp"

namespace sc {

namespace detail {
template <class T>
void check_unit_rows(const char* op, const Tensor<T>& z) {
  const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-6;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < z.cols(); ++j) ss += static_cast<double>(z(i, j)) * z(i, j);
    if (std::abs(std::sqrt(ss) - 1.0) > tol) {
      throw DomainError(op, "row " + std::to_string(i) + " is not unit-norm (norm " +
                                std::to_string(std::sqrt(ss)) + ")");
    }
  }
}
}  // namespace detail

// Symmetrised InfoNCE over N pairs. Row i of z_a and z_b are two views of the
// same image. Every one of the 2N vectors is an anchor; its positive is the
// other view of the same image and its negatives are both views of every
// other image (2N - 2 of them).
template <class T>
Var<T> info_nce(Var<T> z_a, Var<T> z_b, double tau) {
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0, got " + std::to_string(tau));
  if (z_a.shape() != z_b.shape() || z_a.value().rank() != 2) {
    throw ShapeError("info_nce", shape_str(z_a.shape()) + " vs " + shape_str(z_b.shape()));
  }
  detail::check_unit_rows("info_nce", z_a.value());
  detail::check_unit_rows("info_nce", z_b.value());
  const std::size_t n = z_a.rows();
  Var<T> z = concat_rows<T>({z_a, z_b});
  Var<T> logits = scale(matmul_nt(z, z), static_cast<T>(1.0 / tau));
  std::vector<char> self_mask(4 * n * n, 0);
  std::vector<std::size_t> positive(2 * n);
  for (std::size_t i = 0; i < 2 * n; ++i) {
    self_mask[i * 2 * n + i] = 1;
    positive[i] = i < n ? i + n : i - n;
  }
  Var<T> prob = row_softmax(logits, self_mask);
  return scale(mean(log(pick_per_row(prob, positive))), T{-1});
}

struct SparsityTerms {
  double soft_indicator = 0.0;  // |mean sigmoid((s_hat - theta)/t) - rho|
  double hard_indicator = 0.0;  // |(1/L) #{s_hat > theta} - rho|
  double recon = 0.0;
};

template <class T>
struct SparsityLoss {
  Var<T> value;
  SparsityTerms terms;
};

// |(1/L) sum 1(s_hat_i > theta) - rho|, reported as a metric.
template <class T>
double hard_indicator_term(std::span<const T> s_hat, double theta, double rho) {
  std::size_t above = 0;
  for (T v : s_hat) above += static_cast<double>(v) > theta ? 1 : 0;
  return std::abs(static_cast<double>(above) / static_cast<double>(s_hat.size()) - rho);
}

// Sigmoid-relaxed indicator term plus the mean squared reconstruction error
// of the selected patches, averaged over images. `s_hat` is n x L (one row
// per image); `recon` and `target` are the n*K selected patch rows
// (P*P*C wide), aligned, so dividing their summed error by n*K gives the
// per-image (1/K) sum averaged over images.
template <class T>
SparsityLoss<T> sparsity_loss(Var<T> s_hat, double theta, double rho, Var<T> target,
                              Var<T> recon, double t_ind) {
  if (!(t_ind > 0.0)) throw ConfigError("t_ind must be > 0, got " + std::to_string(t_ind));
  if (recon.value().rank() != 2 || recon.rows() == 0) {
    throw DomainError("sparsity_loss", "empty selection");
  }
  if (recon.shape() != target.shape()) {
    throw ShapeError("sparsity_loss", shape_str(recon.shape()) + " vs " +
                                          shape_str(target.shape()));
  }
  const std::size_t n = s_hat.rows(), L = s_hat.cols();
  Var<T> ind = sigmoid(scale(add_scalar(s_hat, static_cast<T>(-theta)),
                             static_cast<T>(1.0 / t_ind)));
  Var<T> frac = mean_row_blocks(reshape(ind, Shape{n * L, 1}), L);
  Var<T> term1 = mean(abs(add_scalar(frac, static_cast<T>(-rho))));
  Var<T> term2 = scale(sum(sq_diff(target, recon)),
                       static_cast<T>(1.0 / static_cast<double>(recon.rows())));
  SparsityLoss<T> out{add(term1, term2), {}};
  out.terms.soft_indicator = term1.value().item();
  const auto sh = s_hat.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    out.terms.hard_indicator += hard_indicator_term<T>(sh.subspan(i * L, L), theta, rho);
  }
  out.terms.hard_indicator /= static_cast<double>(n);
  out.terms.recon = term2.value().item();
  return out;
}

// L_total = L_contrast + lambda * L_sparse.
template <class T>
Var<T> total_loss(Var<T> l_contrast, Var<T> l_sparse, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0, got " + std::to_string(lambda));
  return add(l_contrast, scale(l_sparse, static_cast<T>(lambda)));
}

}  // namespace sc

#endif  // SC_LOSSES_HPP_
