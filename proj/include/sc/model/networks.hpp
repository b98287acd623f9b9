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

// Network forwards on a Graph: patch embedder, transformer-style backbone,
// saliency MLP, projection head, classifier head and patch decoder.

#ifndef SC_MODEL_NETWORKS_HPP_
#define SC_MODEL_NETWORKS_HPP_

#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sc/diffcore/counter.hpp"
#include "sc/diffcore/graph.hpp"
#include "sc/diffcore/ops.hpp"
#include "sc/model/params.hpp"
#include "sc/sparse_attn.hpp"

namespace sc {

template <class T>
Var<T> linear(Var<T> x, Tensor<T>& weight, Tensor<T>* bias) {
  Graph<T>& g = x.graph();
  if (bias) return affine(x, g.param(weight), g.param(*bias));
  return matmul(x, g.param(weight));
}

// patches (n*L x P*P*C) -> n*L x d for a stack of n images: a linear
// projection plus a learned position embedding, so row i depends only on
// patch i and its position.
template <class T>
Var<T> embed_patches(Var<T> patches, ModelParams<T>& p) {
  const auto& a = p.arch;
  if (patches.value().rank() != 2 || patches.rows() % a.L() != 0 || patches.rows() == 0 ||
      patches.cols() != a.patch_dim()) {
    throw ShapeError("embed_patches", "patches " + shape_str(patches.shape()) +
                                          " for L=" + std::to_string(a.L()) +
                                          ", patch_dim=" + std::to_string(a.patch_dim()));
  }
  StageScope stage(Stage::kEmbed);
  Graph<T>& g = patches.graph();
  Var<T> e = linear(patches, p.at("embed.weight"), &p.at("embed.bias"));
  Var<T> pos = g.param(p.at("embed.pos"));
  const std::size_t n = patches.rows() / a.L();
  if (n > 1) {
    std::vector<Var<T>> tiles(n, pos);
    pos = concat_rows<T>(std::span<const Var<T>>(tiles));
  }
  return add(e, pos);
}

// Where a forward pass may restrict attention keys, for one image.
template <class T>
struct AttentionPlan {
  std::span<const std::size_t> support;  // empty => dense attention
  std::optional<Var<T>> s_hat_row;       // 1 x L, required for kSaliency
  BiasMode bias = BiasMode::kNone;

  static AttentionPlan dense() { return {}; }
};

// Sees the per-image Q, K, V of every block (used by inspection).
template <class T>
using AttentionObserver = std::function<void(std::size_t block, std::size_t image,
                                             const Tensor<T>& Q, const Tensor<T>& K,
                                             const Tensor<T>& V)>;

// n_blocks pre-norm blocks: LN -> attention -> residual -> LN -> MLP ->
// residual, over a stack of plans.size() images (x is n*L x d). Attention
// mixes rows of the same image only and is dense unless that image's plan
// carries a support set.
template <class T>
Var<T> backbone_forward(Var<T> x, ModelParams<T>& p, std::span<const AttentionPlan<T>> plans,
                        const AttentionObserver<T>& observer = {}) {
  const auto& a = p.arch;
  const std::size_t L = a.L(), n = plans.size();
  if (n == 0 || x.value().rank() != 2 || x.rows() != n * L || x.cols() != a.d) {
    throw ShapeError("backbone_forward", "input " + shape_str(x.shape()) + " for " +
                                             std::to_string(n) + " images, L=" +
                                             std::to_string(L) + ", d=" + std::to_string(a.d));
  }
  Graph<T>& g = x.graph();
  std::vector<std::vector<std::size_t>> rows(n);
  for (std::size_t b = 0; b < n && n > 1 && observer; ++b) {
    rows[b].resize(L);
    std::iota(rows[b].begin(), rows[b].end(), b * L);
  }
  // The fused path takes one bias mode for the whole stack.
  const BiasMode bias = plans[0].bias;
  std::vector<std::span<const std::size_t>> supports(n);
  std::vector<std::optional<Var<T>>> s_hat_rows(n);
  for (std::size_t b = 0; b < n; ++b) {
    if (plans[b].bias != bias) {
      throw DomainError("backbone_forward", "attention plans mix bias modes");
    }
    supports[b] = plans[b].support;
    s_hat_rows[b] = plans[b].s_hat_row;
  }
  for (std::size_t blk = 0; blk < a.n_blocks; ++blk) {
    const std::string pre = block_prefix(blk);
    Var<T> h = layer_norm(x, g.param(p.at(pre + "ln1.gamma")), g.param(p.at(pre + "ln1.beta")));
    Var<T> q, k, v;
    {
      StageScope stage(Stage::kAttentionProjection);
      q = linear<T>(h, p.at(pre + "attn.wq"), nullptr);
      k = linear<T>(h, p.at(pre + "attn.wk"), nullptr);
      v = linear<T>(h, p.at(pre + "attn.wv"), nullptr);
    }
    Var<T> att;
    if (!observer) {
      att = attend_batch<T>(q, k, v, supports, s_hat_rows, bias);
    } else {
      std::vector<Var<T>> parts;
      parts.reserve(n);
      for (std::size_t b = 0; b < n; ++b) {
        Var<T> qb = q, kb = k, vb = v;
        if (n > 1) {
          qb = gather_rows(q, rows[b]);
          kb = gather_rows(k, rows[b]);
          vb = gather_rows(v, rows[b]);
        }
        observer(blk, b, qb.value(), kb.value(), vb.value());
        parts.push_back(attend(qb, kb, vb, plans[b].support, plans[b].s_hat_row, plans[b].bias));
      }
      att = n > 1 ? concat_rows<T>(std::span<const Var<T>>(parts)) : parts[0];
    }
    {
      StageScope stage(Stage::kAttentionProjection);
      att = linear<T>(att, p.at(pre + "attn.wo"), nullptr);
    }
    x = add(x, att);
    h = layer_norm(x, g.param(p.at(pre + "ln2.gamma")), g.param(p.at(pre + "ln2.beta")));
    StageScope stage(Stage::kBlockMlp);
    h = relu(linear(h, p.at(pre + "mlp.w1"), &p.at(pre + "mlp.b1")));
    h = linear(h, p.at(pre + "mlp.w2"), &p.at(pre + "mlp.b2"));
    x = add(x, h);
  }
  return x;
}

template <class T>
Var<T> backbone_forward(Var<T> x, ModelParams<T>& p, const AttentionPlan<T>& plan = {},
                        const AttentionObserver<T>& observer = {}) {
  return backbone_forward<T>(x, p, std::span<const AttentionPlan<T>>(&plan, 1), observer);
}

// Row-wise saliency MLP. Input is n*L x d_in for n images; the scores come
// back as an n x L matrix, one row per image.
template <class T>
Var<T> saliency_forward(Var<T> x, ModelParams<T>& p) {
  const auto& a = p.arch;
  if (x.value().rank() != 2 || x.cols() != a.saliency_in() || x.rows() % a.L() != 0) {
    throw ShapeError("saliency_forward", "input " + shape_str(x.shape()) +
                                             " for saliency input width " +
                                             std::to_string(a.saliency_in()) + ", L=" +
                                             std::to_string(a.L()));
  }
  StageScope stage(Stage::kSaliency);
  ++op_counts().saliency_forwards;
  const std::size_t n_layers = a.saliency_hidden.size() + 1;
  Var<T> h = x;
  for (std::size_t i = 0; i < n_layers; ++i) {
    const std::string pre = "saliency.l" + std::to_string(i) + ".";
    h = linear(h, p.at(pre + "weight"), &p.at(pre + "bias"));
    if (i + 1 < n_layers) h = relu(h);
  }
  return reshape(h, Shape{x.rows() / a.L(), a.L()});
}

// Per image: mean-pool over its L rows, two-layer MLP, L2 normalisation.
// (n*L x d) -> (n x d_z).
template <class T>
Var<T> projection_forward(Var<T> F, ModelParams<T>& p) {
  if (F.cols() != p.arch.d) {
    throw ShapeError("projection_forward", "features " + shape_str(F.shape()) + " for d=" +
                                               std::to_string(p.arch.d));
  }
  if (F.rows() % p.arch.L() != 0) {
    throw ShapeError("projection_forward", "features " + shape_str(F.shape()) + " for L=" +
                                               std::to_string(p.arch.L()));
  }
  StageScope stage(Stage::kHeads);
  Var<T> h = mean_row_blocks(F, p.arch.L());
  h = relu(linear(h, p.at("proj.l0.weight"), &p.at("proj.l0.bias")));
  h = linear(h, p.at("proj.l1.weight"), &p.at("proj.l1.bias"));
  return l2_normalize_rows(h);
}

// Class logits from the mean-pooled features (n x n_classes).
template <class T>
Var<T> classifier_logits(Var<T> F, ModelParams<T>& p) {
  if (F.cols() != p.arch.d) {
    throw ShapeError("classifier_forward", "features " + shape_str(F.shape()) + " for d=" +
                                               std::to_string(p.arch.d));
  }
  if (F.rows() % p.arch.L() != 0) {
    throw ShapeError("classifier_forward", "features " + shape_str(F.shape()) + " for L=" +
                                               std::to_string(p.arch.L()));
  }
  StageScope stage(Stage::kHeads);
  return linear(mean_row_blocks(F, p.arch.L()), p.at("cls.weight"), &p.at("cls.bias"));
}

template <class T>
Var<T> classifier_forward(Var<T> F, ModelParams<T>& p) {
  return row_softmax(classifier_logits(F, p));
}

// Linear decoder from backbone embeddings of the selected rows of F to pixel
// space: (|S| x d) -> (|S| x P*P*C), rows aligned with S.
template <class T>
Var<T> recon_forward(Var<T> F, std::span<const std::size_t> S, ModelParams<T>& p) {
  if (F.cols() != p.arch.d) {
    throw ShapeError("recon_forward", "features " + shape_str(F.shape()) + " for d=" +
                                          std::to_string(p.arch.d));
  }
  StageScope stage(Stage::kHeads);
  Var<T> sel = gather_rows(F, S);
  return linear(sel, p.at("recon.weight"), &p.at("recon.bias"));
}

}  // namespace sc

#endif  // SC_MODEL_NETWORKS_HPP_
