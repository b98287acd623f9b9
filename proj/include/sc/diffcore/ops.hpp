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

// Differentiable primitives. Each forward records a node whose backward rule
// accumulates exact analytic gradients into the inputs that need them.

#ifndef SC_DIFFCORE_OPS_HPP_
#define SC_DIFFCORE_OPS_HPP_

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sc/diffcore/counter.hpp"
#include "sc/diffcore/graph.hpp"
#include "sc/diffcore/tensor.hpp"
#include "sc/error.hpp"

namespace sc {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<const RowMat<T>> as_mat(const Tensor<T>& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()),
          static_cast<Eigen::Index>(t.cols())};
}
template <class T>
Eigen::Map<const RowMat<T>> as_mat(std::span<const T> s, std::size_t r, std::size_t c) {
  return {s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}
template <class T>
Eigen::Map<RowMat<T>> as_mat(std::span<T> s, std::size_t r, std::size_t c) {
  return {s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

template <class T>
void require_matrix(const char* op, const Tensor<T>& t) {
  if (t.rank() > 2) {
    throw ShapeError(op, "expected rank <= 2, got " + shape_str(t.shape()));
  }
}

template <class T>
std::string pair_str(const Tensor<T>& a, const Tensor<T>& b) {
  return shape_str(a.shape()) + " vs " + shape_str(b.shape());
}

enum class Broadcast { kSame, kRow, kScalar };

template <class T>
Broadcast broadcast_kind(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.size() == 1) return Broadcast::kScalar;
  if (a.rank() <= 2 && b.rank() <= 2 && b.rows() == 1 && b.cols() == a.cols()) {
    return Broadcast::kRow;
  }
  throw ShapeError(op, pair_str(a, b));
}

// Adds g (shaped like the broadcast output) into the gradient of b.
template <class T>
void reduce_into(Broadcast kind, std::span<const T> g, std::span<T> gb,
                 std::size_t cols) {
  switch (kind) {
    case Broadcast::kSame:
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      break;
    case Broadcast::kRow:
      for (std::size_t off = 0; off < g.size(); off += cols) {
        for (std::size_t j = 0; j < cols; ++j) gb[j] += g[off + j];
      }
      break;
    case Broadcast::kScalar: {
      T s{0};
      for (T v : g) s += v;
      gb[0] += s;
      break;
    }
  }
}

// out[i] = f(a[i], b broadcast to a's shape).
template <class T, class F>
void broadcast_apply(Broadcast kind, std::span<const T> a, std::span<const T> b, std::span<T> out,
                     std::size_t cols, F f) {
  switch (kind) {
    case Broadcast::kSame:
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
      break;
    case Broadcast::kRow:
      for (std::size_t off = 0; off < a.size(); off += cols) {
        for (std::size_t j = 0; j < cols; ++j) out[off + j] = f(a[off + j], b[j]);
      }
      break;
    case Broadcast::kScalar: {
      const T b0 = b[0];
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b0);
      break;
    }
  }
}

inline void check_index(const char* op, std::size_t idx, std::size_t bound) {
  if (idx >= bound) {
    throw ShapeError(op, "index " + std::to_string(idx) + " outside [0, " +
                             std::to_string(bound) + ")");
  }
}

}  // namespace detail

// a (m x k) times b (k x n).
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require_matrix("matmul", A);
  detail::require_matrix("matmul", B);
  if (A.cols() != B.rows()) throw ShapeError("matmul", detail::pair_str(A, B));
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor<T> out(Shape{m, n});
  detail::as_mat(out.data(), m, n).noalias() = detail::as_mat(A) * detail::as_mat(B);
  count_matmul(m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("matmul", std::move(out), {ia, ib},
      [ia, ib, m, k, n](Graph<T>& g, std::size_t self) {
        auto G = detail::as_mat(g.upstream(self), m, n);
        if (g.needs_grad(ia)) {
          detail::as_mat(g.grad_buffer(ia), m, k).noalias() +=
              G * detail::as_mat(g.value(ib)).transpose();
        }
        if (g.needs_grad(ib)) {
          detail::as_mat(g.grad_buffer(ib), k, n).noalias() +=
              detail::as_mat(g.value(ia)).transpose() * G;
        }
      });
}

// x (m x k) times w (k x n) plus the row vector b (1 x n).
template <class T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b) {
  const auto& X = x.value();
  const auto& W = w.value();
  detail::require_matrix("affine", X);
  detail::require_matrix("affine", W);
  if (X.cols() != W.rows()) throw ShapeError("affine", detail::pair_str(X, W));
  const std::size_t m = X.rows(), k = X.cols(), n = W.cols();
  if (b.value().size() != n || b.value().rank() > 2 || b.value().rows() != 1) {
    throw ShapeError("affine", "bias " + shape_str(b.shape()) + " for " + std::to_string(n) +
                                   " outputs");
  }
  Tensor<T> out(Shape{m, n});
  auto O = detail::as_mat(out.data(), m, n);
  O.noalias() = detail::as_mat(X) * detail::as_mat(W);
  O.rowwise() += detail::as_mat(b.value().data(), 1, n).row(0);
  count_matmul(m, k, n);
  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  return x.graph().record("affine", std::move(out), {ix, iw, ib},
      [ix, iw, ib, m, k, n](Graph<T>& g, std::size_t self) {
        auto G = detail::as_mat(g.upstream(self), m, n);
        if (g.needs_grad(ix)) {
          detail::as_mat(g.grad_buffer(ix), m, k).noalias() +=
              G * detail::as_mat(g.value(iw)).transpose();
        }
        if (g.needs_grad(iw)) {
          detail::as_mat(g.grad_buffer(iw), k, n).noalias() +=
              detail::as_mat(g.value(ix)).transpose() * G;
        }
        if (g.needs_grad(ib)) {
          detail::as_mat(g.grad_buffer(ib), 1, n) += G.colwise().sum();
        }
      });
}

// a (m x k) times b^T, b is (n x k).
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require_matrix("matmul_nt", A);
  detail::require_matrix("matmul_nt", B);
  if (A.cols() != B.cols()) throw ShapeError("matmul_nt", detail::pair_str(A, B));
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  Tensor<T> out(Shape{m, n});
  detail::as_mat(out.data(), m, n).noalias() =
      detail::as_mat(A) * detail::as_mat(B).transpose();
  count_matmul(m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("matmul_nt", std::move(out), {ia, ib},
      [ia, ib, m, k, n](Graph<T>& g, std::size_t self) {
        auto G = detail::as_mat(g.upstream(self), m, n);
        if (g.needs_grad(ia)) {
          detail::as_mat(g.grad_buffer(ia), m, k).noalias() +=
              G * detail::as_mat(g.value(ib));
        }
        if (g.needs_grad(ib)) {
          detail::as_mat(g.grad_buffer(ib), n, k).noalias() +=
              G.transpose() * detail::as_mat(g.value(ia));
        }
      });
}

template <class T>
Var<T> transpose(Var<T> a) {
  const auto& A = a.value();
  detail::require_matrix("transpose", A);
  const std::size_t r = A.rows(), c = A.cols();
  Tensor<T> out(Shape{c, r});
  detail::as_mat(out.data(), c, r) = detail::as_mat(A).transpose();
  const std::size_t ia = a.id();
  return a.graph().record("transpose", std::move(out), {ia},
      [ia, r, c](Graph<T>& g, std::size_t self) {
        detail::as_mat(g.grad_buffer(ia), r, c) +=
            detail::as_mat(g.upstream(self), c, r).transpose();
      });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    throw ShapeError("reshape", shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), a.value().storage());
  const std::size_t ia = a.id();
  return a.graph().record("reshape", std::move(out), {ia},
      [ia](Graph<T>& g, std::size_t self) {
        auto gb = g.grad_buffer(ia);
        auto up = g.upstream(self);
        for (std::size_t i = 0; i < up.size(); ++i) gb[i] += up[i];
      });
}

// Elementwise a + b. b may also be a 1 x n row (broadcast over rows of a) or
// a single value.
template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  const auto kind = detail::broadcast_kind("add", A, B);
  const std::size_t cols = A.cols();
  Tensor<T> out(A.shape());
  detail::broadcast_apply<T>(kind, A.data(), B.data(), out.data(), cols,
                             [](T x, T y) { return x + y; });
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("add", std::move(out), {ia, ib},
      [ia, ib, kind, cols](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        if (g.needs_grad(ia)) detail::reduce_into(detail::Broadcast::kSame, up, g.grad_buffer(ia), cols);
        if (g.needs_grad(ib)) detail::reduce_into(kind, up, g.grad_buffer(ib), cols);
      });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  const auto kind = detail::broadcast_kind("sub", A, B);
  const std::size_t cols = A.cols();
  Tensor<T> out(A.shape());
  detail::broadcast_apply<T>(kind, A.data(), B.data(), out.data(), cols,
                             [](T x, T y) { return x - y; });
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("sub", std::move(out), {ia, ib},
      [ia, ib, kind, cols](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        if (g.needs_grad(ia)) detail::reduce_into(detail::Broadcast::kSame, up, g.grad_buffer(ia), cols);
        if (g.needs_grad(ib)) {
          std::vector<T> neg(up.begin(), up.end());
          for (T& v : neg) v = -v;
          detail::reduce_into<T>(kind, neg, g.grad_buffer(ib), cols);
        }
      });
}

// Elementwise product with the same broadcasting rules as add.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  const auto kind = detail::broadcast_kind("mul", A, B);
  const std::size_t cols = A.cols();
  Tensor<T> out(A.shape());
  detail::broadcast_apply<T>(kind, A.data(), B.data(), out.data(), cols,
                             [](T x, T y) { return x * y; });
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("mul", std::move(out), {ia, ib},
      [ia, ib, kind, cols](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        const auto& A = g.value(ia);
        const auto& B = g.value(ib);
        if (g.needs_grad(ia)) {
          auto ga = g.grad_buffer(ia);
          std::vector<T> t(up.size());
          detail::broadcast_apply<T>(kind, up, B.data(), t, cols, [](T x, T y) { return x * y; });
          for (std::size_t i = 0; i < up.size(); ++i) ga[i] += t[i];
        }
        if (g.needs_grad(ib)) {
          std::vector<T> t(up.size());
          for (std::size_t i = 0; i < up.size(); ++i) t[i] = up[i] * A[i];
          detail::reduce_into<T>(kind, t, g.grad_buffer(ib), cols);
        }
      });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
  Tensor<T> out(a.shape());
  const auto& A = a.value();
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * c;
  const std::size_t ia = a.id();
  return a.graph().record("scale", std::move(out), {ia},
      [ia, c](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        auto ga = g.grad_buffer(ia);
        for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * c;
      });
}

template <class T>
Var<T> add_scalar(Var<T> a, T c) {
  Tensor<T> out(a.shape());
  const auto& A = a.value();
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + c;
  const std::size_t ia = a.id();
  return a.graph().record("add_scalar", std::move(out), {ia},
      [ia](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        auto ga = g.grad_buffer(ia);
        for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i];
      });
}

// max(x, 0); the derivative at exactly 0 is taken as 0.
template <class T>
Var<T> relu(Var<T> a) {
  const auto& A = a.value();
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] > T{0} ? A[i] : T{0};
  if (auto& mon = branch_monitor(); mon.active) {
    for (std::size_t i = 0; i < A.size(); ++i) mon.record(A[i] > T{0} ? 2 * i + 1 : 2 * i);
  }
  const std::size_t ia = a.id();
  return a.graph().record("relu", std::move(out), {ia},
      [ia](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        const auto& A = g.value(ia);
        auto ga = g.grad_buffer(ia);
        for (std::size_t i = 0; i < up.size(); ++i) {
          ga[i] += A[i] > T{0} ? up[i] : T{0};
        }
      });
}

// |x|; derivative sign(x), 0 at x = 0.
template <class T>
Var<T> abs(Var<T> a) {
  const auto& A = a.value();
  Tensor<T> out(A.shape());
  auto& mon = branch_monitor();
  for (std::size_t i = 0; i < A.size(); ++i) {
    out[i] = std::abs(A[i]);
    if (mon.active) mon.record(A[i] > T{0} ? 3 * i + 1 : (A[i] < T{0} ? 3 * i + 2 : 3 * i));
  }
  const std::size_t ia = a.id();
  return a.graph().record("abs", std::move(out), {ia},
      [ia](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        const auto& A = g.value(ia);
        auto ga = g.grad_buffer(ia);
        for (std::size_t i = 0; i < up.size(); ++i) {
          if (A[i] > T{0}) ga[i] += up[i];
          else if (A[i] < T{0}) ga[i] -= up[i];
        }
      });
}

template <class T>
Var<T> exp(Var<T> a) {
  const auto& A = a.value();
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = std::exp(A[i]);
  count_exps(A.size());
  const std::size_t ia = a.id();
  return a.graph().record("exp", std::move(out), {ia},
      [ia](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        const auto& Y = g.value(self);
        auto ga = g.grad_buffer(ia);
        for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * Y[i];
      });
}

template <class T>
Var<T> log(Var<T> a) {
  const auto& A = a.value();
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) {
    if (!(A[i] > T{0})) {
      throw DomainError("log", "non-positive input " + std::to_string(A[i]) +
                                   " at index " + std::to_string(i));
    }
    out[i] = std::log(A[i]);
  }
  const std::size_t ia = a.id();
  return a.graph().record("log", std::move(out), {ia},
      [ia](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        const auto& A = g.value(ia);
        auto ga = g.grad_buffer(ia);
        for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] / A[i];
      });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  const auto& A = a.value();
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) {
    const T x = A[i];
    out[i] = x >= T{0} ? T{1} / (T{1} + std::exp(-x))
                       : std::exp(x) / (T{1} + std::exp(x));
  }
  count_exps(A.size());
  const std::size_t ia = a.id();
  return a.graph().record("sigmoid", std::move(out), {ia},
      [ia](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        const auto& Y = g.value(self);
        auto ga = g.grad_buffer(ia);
        for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * Y[i] * (T{1} - Y[i]);
      });
}

// Softmax over each row with max subtraction. With a mask, entries whose
// mask byte is nonzero are excluded: their output is exactly 0 and they do
// not enter the normaliser.
template <class T>
Var<T> row_softmax(Var<T> a, std::span<const char> mask = {}) {
  const auto& A = a.value();
  detail::require_matrix("row_softmax", A);
  const std::size_t r = A.rows(), c = A.cols();
  if (!mask.empty() && mask.size() != A.size()) {
    throw ShapeError("row_softmax", "mask of length " + std::to_string(mask.size()) +
                                        " for " + shape_str(A.shape()));
  }
  Tensor<T> out(A.shape());
  std::uint64_t n_exp = 0;
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = &A[i * c];
    T* y = &out[i * c];
    const char* mk = mask.empty() ? nullptr : &mask[i * c];
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      if (!mk || !mk[j]) mx = std::max(mx, x[j]);
    }
    if (mx == -std::numeric_limits<T>::infinity()) {
      throw DomainError("row_softmax", "row " + std::to_string(i) + " fully masked");
    }
    T sum{0};
    for (std::size_t j = 0; j < c; ++j) {
      if (mk && mk[j]) continue;
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
      ++n_exp;
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j < c; ++j) y[j] *= inv;
  }
  count_exps(n_exp);
  count_divs(n_exp);
  const std::size_t ia = a.id();
  return a.graph().record("row_softmax", std::move(out), {ia},
      [ia, r, c](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        const auto& Y = g.value(self);
        auto ga = g.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i) {
          T dot{0};
          for (std::size_t j = 0; j < c; ++j) dot += up[i * c + j] * Y[i * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            ga[i * c + j] += Y[i * c + j] * (up[i * c + j] - dot);
          }
        }
      });
}

// Row-wise layer normalisation with affine gamma, beta of length cols.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const auto& X = x.value();
  detail::require_matrix("layer_norm", X);
  const std::size_t r = X.rows(), c = X.cols();
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw ShapeError("layer_norm", shape_str(X.shape()) + " with gamma " +
                                       shape_str(gamma.shape()) + ", beta " +
                                       shape_str(beta.shape()));
  }
  Tensor<T> out(X.shape());
  std::vector<T> xhat(X.size());
  std::vector<T> inv_std(r);
  const auto& G = gamma.value();
  const auto& B = beta.value();
  for (std::size_t i = 0; i < r; ++i) {
    T mu{0};
    for (std::size_t j = 0; j < c; ++j) mu += X[i * c + j];
    mu /= static_cast<T>(c);
    T var{0};
    for (std::size_t j = 0; j < c; ++j) {
      const T dlt = X[i * c + j] - mu;
      var += dlt * dlt;
    }
    var /= static_cast<T>(c);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (X[i * c + j] - mu) * inv_std[i];
      out[i * c + j] = G[j] * xhat[i * c + j] + B[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ibt = beta.id();
  return x.graph().record("layer_norm", std::move(out), {ix, ig, ibt},
      [ix, ig, ibt, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        const auto& G = g.value(ig);
        const auto U = detail::as_mat(up, r, c);
        const auto Xh = detail::as_mat(std::span<const T>(xhat), r, c);
        if (g.needs_grad(ig)) {
          detail::as_mat(g.grad_buffer(ig), 1, c) += (U.array() * Xh.array()).colwise().sum().matrix();
        }
        if (g.needs_grad(ibt)) {
          detail::as_mat(g.grad_buffer(ibt), 1, c) += U.colwise().sum();
        }
        if (g.needs_grad(ix)) {
          auto gx = detail::as_mat(g.grad_buffer(ix), r, c);
          const auto gam = detail::as_mat(G.data(), 1, c);
          Eigen::Matrix<T, 1, Eigen::Dynamic> dxh(static_cast<Eigen::Index>(c));
          const T inv_c = T{1} / static_cast<T>(c);
          for (std::size_t i = 0; i < r; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            dxh = U.row(ii).cwiseProduct(gam);
            const T m1 = dxh.sum() * inv_c;
            const T m2 = dxh.dot(Xh.row(ii)) * inv_c;
            gx.row(ii).array() +=
                inv_std[i] * (dxh.array() - m1 - Xh.row(ii).array() * m2);
          }
        }
      });
}

// Rows of x selected by index, in the given order.
template <class T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> idx) {
  const auto& X = x.value();
  detail::require_matrix("gather_rows", X);
  const std::size_t r = X.rows(), c = X.cols();
  if (idx.empty()) throw ShapeError("gather_rows", "empty index set");
  Tensor<T> out(Shape{idx.size(), c});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    detail::check_index("gather_rows", idx[k], r);
    std::copy_n(&X[idx[k] * c], c, &out[k * c]);
  }
  const std::size_t ix = x.id();
  std::vector<std::size_t> ids(idx.begin(), idx.end());
  return x.graph().record("gather_rows", std::move(out), {ix},
      [ix, c, ids = std::move(ids)](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        auto gx = g.grad_buffer(ix);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          for (std::size_t j = 0; j < c; ++j) gx[ids[k] * c + j] += up[k * c + j];
        }
      });
}

template <class T>
Var<T> gather_cols(Var<T> x, std::span<const std::size_t> idx) {
  const auto& X = x.value();
  detail::require_matrix("gather_cols", X);
  const std::size_t r = X.rows(), c = X.cols();
  if (idx.empty()) throw ShapeError("gather_cols", "empty index set");
  for (std::size_t k : idx) detail::check_index("gather_cols", k, c);
  const std::size_t n = idx.size();
  Tensor<T> out(Shape{r, n});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t k = 0; k < n; ++k) out[i * n + k] = X[i * c + idx[k]];
  }
  const std::size_t ix = x.id();
  std::vector<std::size_t> ids(idx.begin(), idx.end());
  return x.graph().record("gather_cols", std::move(out), {ix},
      [ix, r, c, ids = std::move(ids)](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        auto gx = g.grad_buffer(ix);
        const std::size_t n = ids.size();
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t k = 0; k < n; ++k) gx[i * c + ids[k]] += up[i * n + k];
        }
      });
}

// out[i] = x[i, cols[i]] for every row i; shape (rows).
template <class T>
Var<T> pick_per_row(Var<T> x, std::span<const std::size_t> cols) {
  const auto& X = x.value();
  detail::require_matrix("pick_per_row", X);
  const std::size_t r = X.rows(), c = X.cols();
  if (cols.size() != r) {
    throw ShapeError("pick_per_row", std::to_string(cols.size()) +
                                         " indices for " + shape_str(X.shape()));
  }
  Tensor<T> out(Shape{r});
  for (std::size_t i = 0; i < r; ++i) {
    detail::check_index("pick_per_row", cols[i], c);
    out[i] = X[i * c + cols[i]];
  }
  const std::size_t ix = x.id();
  std::vector<std::size_t> ids(cols.begin(), cols.end());
  return x.graph().record("pick_per_row", std::move(out), {ix},
      [ix, c, ids = std::move(ids)](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        auto gx = g.grad_buffer(ix);
        for (std::size_t i = 0; i < ids.size(); ++i) gx[i * c + ids[i]] += up[i];
      });
}

template <class T>
Var<T> sum(Var<T> x) {
  T s{0};
  for (T v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.graph().record("sum", Tensor<T>::scalar(s), {ix},
      [ix](Graph<T>& g, std::size_t self) {
        const T up = g.upstream(self)[0];
        for (T& v : g.grad_buffer(ix)) v += up;
      });
}

template <class T>
Var<T> mean(Var<T> x) {
  const T n = static_cast<T>(x.value().size());
  T s{0};
  for (T v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.graph().record("mean", Tensor<T>::scalar(s / n), {ix},
      [ix, n](Graph<T>& g, std::size_t self) {
        const T up = g.upstream(self)[0] / n;
        for (T& v : g.grad_buffer(ix)) v += up;
      });
}

// Column means over rows: (r x c) -> (1 x c).
template <class T>
Var<T> mean_rows(Var<T> x) {
  const auto& X = x.value();
  detail::require_matrix("mean_rows", X);
  const std::size_t r = X.rows(), c = X.cols();
  Tensor<T> out(Shape{1, c});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j] += X[i * c + j];
  }
  for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<T>(r);
  const std::size_t ix = x.id();
  return x.graph().record("mean_rows", std::move(out), {ix},
      [ix, r, c](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        auto gx = g.grad_buffer(ix);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += up[j] / static_cast<T>(r);
        }
      });
}

// Column means over consecutive blocks of `block` rows:
// (n*block x c) -> (n x c).
template <class T>
Var<T> mean_row_blocks(Var<T> x, std::size_t block) {
  const auto& X = x.value();
  detail::require_matrix("mean_row_blocks", X);
  const std::size_t r = X.rows(), c = X.cols();
  if (block == 0 || r % block != 0) {
    throw ShapeError("mean_row_blocks", shape_str(X.shape()) + " not divisible into blocks of " +
                                            std::to_string(block) + " rows");
  }
  const std::size_t n = r / block;
  const T inv = T{1} / static_cast<T>(block);
  Tensor<T> out(Shape{n, c});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[(i / block) * c + j] += X[i * c + j];
  }
  for (T& v : out.data()) v *= inv;
  const std::size_t ix = x.id();
  return x.graph().record("mean_row_blocks", std::move(out), {ix},
      [ix, r, c, block, inv](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        auto gx = g.grad_buffer(ix);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += up[(i / block) * c + j] * inv;
        }
      });
}

// Elementwise (a - b)^2.
template <class T>
Var<T> sq_diff(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape()) throw ShapeError("sq_diff", detail::pair_str(A, B));
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) {
    const T dlt = A[i] - B[i];
    out[i] = dlt * dlt;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("sq_diff", std::move(out), {ia, ib},
      [ia, ib](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        const auto& A = g.value(ia);
        const auto& B = g.value(ib);
        if (g.needs_grad(ia)) {
          auto ga = g.grad_buffer(ia);
          for (std::size_t i = 0; i < up.size(); ++i) ga[i] += T{2} * (A[i] - B[i]) * up[i];
        }
        if (g.needs_grad(ib)) {
          auto gb = g.grad_buffer(ib);
          for (std::size_t i = 0; i < up.size(); ++i) gb[i] -= T{2} * (A[i] - B[i]) * up[i];
        }
      });
}

// Scales every row to unit Euclidean norm.
template <class T>
Var<T> l2_normalize_rows(Var<T> x) {
  const auto& X = x.value();
  detail::require_matrix("l2_normalize_rows", X);
  const std::size_t r = X.rows(), c = X.cols();
  Tensor<T> out(X.shape());
  std::vector<T> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    T ss{0};
    for (std::size_t j = 0; j < c; ++j) ss += X[i * c + j] * X[i * c + j];
    norms[i] = std::sqrt(ss);
    if (!(norms[i] > T{0})) {
      throw DomainError("l2_normalize_rows", "zero-norm row " + std::to_string(i));
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = X[i * c + j] / norms[i];
  }
  const std::size_t ix = x.id();
  return x.graph().record("l2_normalize_rows", std::move(out), {ix},
      [ix, r, c, norms = std::move(norms)](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        const auto& Y = g.value(self);
        auto gx = g.grad_buffer(ix);
        for (std::size_t i = 0; i < r; ++i) {
          T dot{0};
          for (std::size_t j = 0; j < c; ++j) dot += up[i * c + j] * Y[i * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            gx[i * c + j] += (up[i * c + j] - Y[i * c + j] * dot) / norms[i];
          }
        }
      });
}

// Stacks matrices with equal column counts on top of each other.
template <class T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows", "no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    detail::require_matrix("concat_rows", p.value());
    if (p.cols() != c) {
      throw ShapeError("concat_rows", detail::pair_str(parts[0].value(), p.value()));
    }
    r += p.rows();
  }
  Tensor<T> out(Shape{r, c});
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), &out[off]);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.value().size();
  }
  return parts[0].graph().record("concat_rows", std::move(out), ids,
      [ids, offsets](Graph<T>& g, std::size_t self) {
        auto up = g.upstream(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!g.needs_grad(ids[k])) continue;
          auto gp = g.grad_buffer(ids[k]);
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += up[offsets[k] + i];
        }
      });
}

template <class T>
Var<T> concat_rows(std::initializer_list<Var<T>> parts) {
  std::vector<Var<T>> v(parts);
  return concat_rows<T>(std::span<const Var<T>>(v));
}

}  // namespace sc

#endif  // SC_DIFFCORE_OPS_HPP_
