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

// Saliency normalisation, top-K patch selection and attention restricted to
// the selected key set, plus the dense reference it generalises.
//
// Two routes compute the same attention:
//   * sparse_attention / dense_attention: forward-only kernels that index the
//     selected keys in place (no gathered copies, no L x L scores unless
//     inspection is requested). Used for inference, benchmarks and the
//     invariant suites.
//   * attend(): the differentiable version composed from diffcore
//     primitives, used for training.

#ifndef SC_SPARSE_ATTN_HPP_
#define SC_SPARSE_ATTN_HPP_

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sc/diffcore/counter.hpp"
#include "sc/diffcore/graph.hpp"
#include "sc/diffcore/ops.hpp"
#include "sc/diffcore/tensor.hpp"
#include "sc/error.hpp"

namespace sc {

enum class BiasMode { kNone, kSaliency };

inline std::string_view to_string(BiasMode m) {
  return m == BiasMode::kNone ? "none" : "saliency";
}

inline BiasMode parse_bias_mode(std::string_view s) {
  if (s == "none") return BiasMode::kNone;
  if (s == "saliency") return BiasMode::kSaliency;
  throw ConfigError("bias_mode must be none|saliency, got '" + std::string(s) + "'");
}

// K = max(1, floor(rho * L)).
inline std::size_t topk_count(double rho, std::size_t L) {
  if (!(rho > 0.0 && rho <= 1.0)) {
    throw ConfigError("rho must lie in (0, 1], got " + std::to_string(rho));
  }
  // The epsilon absorbs products such as 0.29 * 100 = 28.999999999999996.
  const auto k = static_cast<std::size_t>(std::floor(rho * static_cast<double>(L) + 1e-9));
  return std::max<std::size_t>(1, std::min(k, L));
}

template <class T>
std::vector<T> normalize_scores(std::span<const T> s) {
  if (s.empty()) throw ShapeError("normalize_scores", "empty score vector");
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!std::isfinite(s[i])) {
      throw DomainError("normalize_scores", "non-finite score at index " + std::to_string(i));
    }
    mx = std::max(mx, s[i]);
  }
  std::vector<T> out(s.size());
  T sum{0};
  for (std::size_t i = 0; i < s.size(); ++i) {
    out[i] = std::exp(s[i] - mx);
    sum += out[i];
  }
  for (T& v : out) v /= sum;
  return out;
}

struct Selection {
  std::size_t k = 0;
  std::vector<std::size_t> indices;  // strictly increasing
};

// Indices of the K largest normalised scores. Ties go to the lower index and
// the result is sorted ascending.
template <class T>
Selection select_topk(std::span<const T> s_hat, double rho) {
  const std::size_t L = s_hat.size();
  if (L == 0) throw ShapeError("select_topk", "empty score vector");
  const std::size_t k = topk_count(rho, L);
  std::vector<std::size_t> order(L);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) {
    return s_hat[a] > s_hat[b] || (s_hat[a] == s_hat[b] && a < b);
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                    order.end(), better);
  order.resize(k);
  std::sort(order.begin(), order.end());
  auto& mon = branch_monitor();
  if (mon.active) {
    for (std::size_t i : order) mon.record(0xabcdef00ULL + i);
  }
  return Selection{k, std::move(order)};
}

struct SaliencyState {
  std::vector<double> s;
  std::vector<double> s_hat;
  double theta = 0.0;
  double rho = 0.3;
  std::size_t k = 0;
  std::vector<std::size_t> S;
};

template <class T>
SaliencyState make_saliency_state(std::span<const T> s, double rho, double theta) {
  SaliencyState st;
  st.s.assign(s.begin(), s.end());
  st.s_hat = normalize_scores<double>(st.s);
  st.theta = theta;
  st.rho = rho;
  auto sel = select_topk<double>(st.s_hat, rho);
  st.k = sel.k;
  st.S = std::move(sel.indices);
  return st;
}

inline void validate_support(const char* op, std::span<const std::size_t> S, std::size_t L) {
  if (S.empty()) throw DomainError(op, "empty key support S");
  for (std::size_t i = 0; i < S.size(); ++i) {
    if (S[i] >= L) {
      throw ShapeError(op, "support index " + std::to_string(S[i]) + " outside [0, " +
                               std::to_string(L) + ")");
    }
    if (i > 0 && S[i] <= S[i - 1]) {
      throw DomainError(op, "support must be strictly increasing");
    }
  }
}

// Attention weights restricted to a column support. `weights` holds the
// L x |support| nonzero block; `full` is the materialised L x L matrix and is
// only filled in inspection mode.
template <class T>
struct AttentionMap {
  std::size_t L = 0;
  std::vector<std::size_t> support;
  Tensor<T> weights;
  std::optional<Tensor<T>> full;

  // Entry (i, j) of the L x L matrix; exactly 0 off the support.
  T at(std::size_t i, std::size_t j) const {
    auto it = std::lower_bound(support.begin(), support.end(), j);
    if (it == support.end() || *it != j) return T{0};
    return weights(i, static_cast<std::size_t>(it - support.begin()));
  }

  Tensor<T> materialize() const {
    Tensor<T> A(Shape{L, L});
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t k = 0; k < support.size(); ++k) A(i, support[k]) = weights(i, k);
    }
    return A;
  }

  std::vector<T> row_sums() const {
    std::vector<T> out(L, T{0});
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t k = 0; k < support.size(); ++k) out[i] += weights(i, k);
    }
    return out;
  }
};

template <class T>
struct AttentionResult {
  Tensor<T> F;
  AttentionMap<T> A;
};

namespace detail {

template <class T>
void check_qkv(const char* op, const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V) {
  if (Q.rank() != 2 || K.shape() != Q.shape() || V.rank() != 2 || V.rows() != K.rows()) {
    throw ShapeError(op, "Q " + shape_str(Q.shape()) + ", K " + shape_str(K.shape()) +
                             ", V " + shape_str(V.shape()));
  }
}

// Shared row kernel: scores over the given key rows, softmax, weighted sum.
template <class T>
void attention_rows(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                    std::span<const std::size_t> keys, std::span<const T> log_bias,
                    Tensor<T>& F, Tensor<T>& W) {
  using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
  const std::size_t L = Q.rows(), d = Q.cols(), dv = V.cols(), nk = keys.size();
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(d));
  {
    StageScope stage(Stage::kAttentionScores);
    for (std::size_t i = 0; i < L; ++i) {
      Eigen::Map<const RowVec> q(&Q(i, 0), static_cast<Eigen::Index>(d));
      T* w = &W(i, 0);
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < nk; ++k) {
        Eigen::Map<const RowVec> kv(&K(keys[k], 0), static_cast<Eigen::Index>(d));
        w[k] = q.dot(kv) * inv_sqrt_d;
        if (!log_bias.empty()) w[k] += log_bias[k];
        mx = std::max(mx, w[k]);
      }
      T sum{0};
      for (std::size_t k = 0; k < nk; ++k) {
        w[k] = std::exp(w[k] - mx);
        sum += w[k];
      }
      const T inv = T{1} / sum;
      for (std::size_t k = 0; k < nk; ++k) w[k] *= inv;
    }
    count_matmul(L, d, nk);
    count_exps(L * nk);
    count_divs(L * nk);
  }
  {
    StageScope stage(Stage::kAttentionValues);
    for (std::size_t i = 0; i < L; ++i) {
      Eigen::Map<RowVec> f(&F(i, 0), static_cast<Eigen::Index>(dv));
      f.setZero();
      const T* w = &W(i, 0);
      for (std::size_t k = 0; k < nk; ++k) {
        f += w[k] * Eigen::Map<const RowVec>(&V(keys[k], 0), static_cast<Eigen::Index>(dv));
      }
    }
    count_matmul(L, nk, dv);
  }
}

}  // namespace detail

// Attention with keys restricted to S. With BiasMode::kSaliency each
// selected key's numerator is multiplied by s_hat[j]. Only |S| key columns
// are touched; the L x L matrix is materialised only when `inspect` is set.
template <class T>
AttentionResult<T> sparse_attention(const Tensor<T>& Q, const Tensor<T>& K,
                                    const Tensor<T>& V, std::span<const std::size_t> S,
                                    std::span<const T> s_hat, BiasMode bias,
                                    bool inspect = false) {
  detail::check_qkv("sparse_attention", Q, K, V);
  const std::size_t L = Q.rows();
  validate_support("sparse_attention", S, K.rows());
  std::vector<T> log_bias;
  if (bias == BiasMode::kSaliency) {
    if (s_hat.size() != K.rows()) {
      throw ShapeError("sparse_attention", "s_hat of length " + std::to_string(s_hat.size()) +
                                               " for " + std::to_string(K.rows()) + " keys");
    }
    log_bias.reserve(S.size());
    for (std::size_t j : S) {
      if (!(s_hat[j] > T{0})) {
        throw DomainError("sparse_attention", "non-positive s_hat at " + std::to_string(j));
      }
      log_bias.push_back(std::log(s_hat[j]));
    }
  }
  AttentionResult<T> r;
  r.F = Tensor<T>(Shape{L, V.cols()});
  r.A.L = K.rows();
  r.A.support.assign(S.begin(), S.end());
  r.A.weights = Tensor<T>(Shape{L, S.size()});
  detail::attention_rows<T>(Q, K, V, S, log_bias, r.F, r.A.weights);
  if (inspect) r.A.full = r.A.materialize();
  return r;
}

// softmax(Q K^T / sqrt(d)) V over all keys.
template <class T>
AttentionResult<T> dense_attention(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V) {
  detail::check_qkv("dense_attention", Q, K, V);
  const std::size_t L = Q.rows();
  std::vector<std::size_t> all(K.rows());
  std::iota(all.begin(), all.end(), std::size_t{0});
  AttentionResult<T> r;
  r.F = Tensor<T>(Shape{L, V.cols()});
  r.A.L = K.rows();
  r.A.weights = Tensor<T>(Shape{L, K.rows()});
  detail::attention_rows<T>(Q, K, V, all, {}, r.F, r.A.weights);
  r.A.support = std::move(all);
  r.A.full = r.A.weights;
  return r;
}

// Differentiable attention. `support` restricts the keys (dense when empty).
// With kSaliency, log(s_hat_row[j]) is added to each selected score, which
// multiplies the numerator by s_hat[j] and gives the saliency scores a
// gradient path. The selection itself carries no gradient.
template <class T>
Var<T> attend(Var<T> Q, Var<T> K, Var<T> V, std::span<const std::size_t> support,
              std::optional<Var<T>> s_hat_row, BiasMode bias) {
  const std::size_t d = Q.cols();
  if (Q.value().rank() != 2 || K.shape() != Q.shape() || V.rows() != K.rows()) {
    throw ShapeError("attend", "Q " + shape_str(Q.shape()) + ", K " + shape_str(K.shape()) +
                                   ", V " + shape_str(V.shape()));
  }
  Var<T> Ks = K, Vs = V;
  if (!support.empty()) {
    validate_support("attend", support, K.rows());
    Ks = gather_rows(K, support);
    Vs = gather_rows(V, support);
  }
  Var<T> scores;
  {
    StageScope stage(Stage::kAttentionScores);
    scores = scale(matmul_nt(Q, Ks), T{1} / std::sqrt(static_cast<T>(d)));
    if (bias == BiasMode::kSaliency) {
      if (!s_hat_row) throw DomainError("attend", "saliency bias requires s_hat");
      Var<T> sh = support.empty() ? *s_hat_row : gather_cols(*s_hat_row, support);
      scores = add(scores, log(sh));
    }
    scores = row_softmax(scores);
  }
  StageScope stage(Stage::kAttentionValues);
  return matmul(scores, Vs);
}

// One attention head over a stack of n images: Q, K, V are n*L x d and image
// b owns rows [b*L, (b+1)*L). Per image this computes the same function as
// attend() with supports[b] and s_hat_rows[b] (1 x L), as a single node with a
// hand-written backward.
template <class T>
Var<T> attend_batch(Var<T> Q, Var<T> K, Var<T> V,
                    std::span<const std::span<const std::size_t>> supports,
                    std::span<const std::optional<Var<T>>> s_hat_rows, BiasMode bias) {
  using Mat = detail::RowMat<T>;
  const std::size_t n = supports.size();
  if (n == 0 || Q.value().rank() != 2 || K.shape() != Q.shape() || V.rows() != K.rows() ||
      Q.rows() % n != 0 || s_hat_rows.size() != n) {
    throw ShapeError("attend_batch", "Q " + shape_str(Q.shape()) + ", K " +
                                         shape_str(K.shape()) + ", V " + shape_str(V.shape()) +
                                         " for " + std::to_string(n) + " images");
  }
  const std::size_t L = Q.rows() / n, d = Q.cols(), dv = V.cols();
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(d));
  const bool biased = bias == BiasMode::kSaliency;

  struct Saved {
    std::vector<std::vector<std::size_t>> keys;
    std::vector<Mat> W;
    std::vector<std::size_t> bias_ids;  // node of s_hat row b, or SIZE_MAX
  };
  auto saved = std::make_shared<Saved>();
  saved->keys.resize(n);
  saved->W.resize(n);
  saved->bias_ids.assign(n, static_cast<std::size_t>(-1));
  std::vector<std::size_t> inputs{Q.id(), K.id(), V.id()};

  const auto Qm = detail::as_mat(Q.value());
  const auto Km = detail::as_mat(K.value());
  const auto Vm = detail::as_mat(V.value());
  Tensor<T> out(Shape{n * L, dv});
  auto Fm = detail::as_mat(out.data(), n * L, dv);
  Mat Ks, Vs;
  for (std::size_t b = 0; b < n; ++b) {
    auto& keys = saved->keys[b];
    if (supports[b].empty()) {
      keys.resize(L);
      std::iota(keys.begin(), keys.end(), std::size_t{0});
    } else {
      validate_support("attend_batch", supports[b], L);
      keys.assign(supports[b].begin(), supports[b].end());
    }
    const std::size_t nk = keys.size();
    const auto rows = static_cast<Eigen::Index>(b * L);
    const auto Lx = static_cast<Eigen::Index>(L);
    Ks.resize(static_cast<Eigen::Index>(nk), static_cast<Eigen::Index>(d));
    Vs.resize(static_cast<Eigen::Index>(nk), static_cast<Eigen::Index>(dv));
    for (std::size_t k = 0; k < nk; ++k) {
      Ks.row(static_cast<Eigen::Index>(k)) = Km.row(rows + static_cast<Eigen::Index>(keys[k]));
      Vs.row(static_cast<Eigen::Index>(k)) = Vm.row(rows + static_cast<Eigen::Index>(keys[k]));
    }
    Mat& W = saved->W[b];
    {
      StageScope stage(Stage::kAttentionScores);
      W.noalias() = Qm.middleRows(rows, Lx) * Ks.transpose();
      W *= inv_sqrt_d;
      if (biased) {
        if (!s_hat_rows[b]) throw DomainError("attend_batch", "saliency bias requires s_hat");
        const Var<T>& sh = *s_hat_rows[b];
        if (sh.value().size() != L) {
          throw ShapeError("attend_batch", "s_hat row " + shape_str(sh.shape()) + " for L=" +
                                               std::to_string(L));
        }
        for (std::size_t k = 0; k < nk; ++k) {
          const T s = sh.value().data()[keys[k]];
          if (!(s > T{0})) throw DomainError("log", "non-positive input");
          W.col(static_cast<Eigen::Index>(k)).array() += std::log(s);
        }
        saved->bias_ids[b] = sh.id();
        inputs.push_back(sh.id());
      }
      for (Eigen::Index i = 0; i < Lx; ++i) {
        auto r = W.row(i);
        r = (r.array() - r.maxCoeff()).exp();
        r /= r.sum();
      }
      count_matmul(L, d, nk);
      count_exps(L * nk);
      count_divs(L * nk);
    }
    StageScope stage(Stage::kAttentionValues);
    Fm.middleRows(rows, Lx).noalias() = W * Vs;
    count_matmul(L, nk, dv);
  }

  const std::size_t iq = Q.id(), ik = K.id(), iv = V.id();
  return Q.graph().record("attend_batch", std::move(out), std::move(inputs),
      [saved, iq, ik, iv, n, L, d, dv, inv_sqrt_d](Graph<T>& g, std::size_t self) {
        const auto G = detail::as_mat(g.upstream(self), n * L, dv);
        const auto Qv = detail::as_mat(g.value(iq));
        const auto Kv = detail::as_mat(g.value(ik));
        const auto Vv = detail::as_mat(g.value(iv));
        const bool gq = g.needs_grad(iq), gk = g.needs_grad(ik), gv = g.needs_grad(iv);
        std::span<T> dQs = gq ? g.grad_buffer(iq) : std::span<T>();
        std::span<T> dKs = gk ? g.grad_buffer(ik) : std::span<T>();
        std::span<T> dVs = gv ? g.grad_buffer(iv) : std::span<T>();
        Mat Ks, Vs, dW, dKsel, dVsel;
        const auto Lx = static_cast<Eigen::Index>(L);
        for (std::size_t b = 0; b < n; ++b) {
          const auto& keys = saved->keys[b];
          const Mat& W = saved->W[b];
          const auto nk = static_cast<Eigen::Index>(keys.size());
          const auto rows = static_cast<Eigen::Index>(b * L);
          Ks.resize(nk, static_cast<Eigen::Index>(d));
          Vs.resize(nk, static_cast<Eigen::Index>(dv));
          for (Eigen::Index k = 0; k < nk; ++k) {
            Ks.row(k) = Kv.row(rows + static_cast<Eigen::Index>(keys[k]));
            Vs.row(k) = Vv.row(rows + static_cast<Eigen::Index>(keys[k]));
          }
          const auto Gb = G.middleRows(rows, Lx);
          if (gv) {
            dVsel.noalias() = W.transpose() * Gb;
            auto dV = detail::as_mat(dVs, n * L, dv);
            for (Eigen::Index k = 0; k < nk; ++k) {
              dV.row(rows + static_cast<Eigen::Index>(keys[k])) += dVsel.row(k);
            }
          }
          // Softmax backward, then undo the 1/sqrt(d) scale.
          dW.noalias() = Gb * Vs.transpose();
          const auto dot = (dW.array() * W.array()).rowwise().sum().eval();
          dW = (W.array() * (dW.array().colwise() - dot)).matrix();
          const std::size_t bid = saved->bias_ids[b];
          if (bid != static_cast<std::size_t>(-1) && g.needs_grad(bid)) {
            std::span<T> ds = g.grad_buffer(bid);
            const auto& sv = g.value(bid).data();
            const auto col = dW.colwise().sum().eval();
            for (Eigen::Index k = 0; k < nk; ++k) ds[keys[k]] += col(k) / sv[keys[k]];
          }
          dW *= inv_sqrt_d;
          if (gq) {
            detail::as_mat(dQs, n * L, d).middleRows(rows, Lx).noalias() += dW * Ks;
          }
          if (gk) {
            dKsel.noalias() = dW.transpose() * Qv.middleRows(rows, Lx);
            auto dK = detail::as_mat(dKs, n * L, d);
            for (Eigen::Index k = 0; k < nk; ++k) {
              dK.row(rows + static_cast<Eigen::Index>(keys[k])) += dKsel.row(k);
            }
          }
        }
      });
}

}  // namespace sc

#endif  // SC_SPARSE_ATTN_HPP_
