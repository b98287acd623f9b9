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

// Augmentation, contrastive pretraining with alternating parameter groups,
// attention-cache snapshots, fine-tuning and evaluation.

#ifndef SC_TRAINING_HPP_
#define SC_TRAINING_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sc/config.hpp"
#include "sc/diffcore/adamw.hpp"
#include "sc/diffcore/graph.hpp"
#include "sc/diffcore/ops.hpp"
#include "sc/diffcore/rng.hpp"
#include "sc/error.hpp"
#include "sc/losses.hpp"
#include "sc/model/networks.hpp"
#include "sc/model/params.hpp"
#include "sc/model/patches.hpp"
#include "sc/sparse_attn.hpp"
#include "sc/synthdata.hpp"

namespace sc {

// ---------------------------------------------------------------- augment

struct AugmentSpec {
  double flip_prob = 0.0;
  double noise_std = 0.0;
  double jitter = 0.0;    // multiplicative factor drawn from U[1-j, 1+j]
  double crop_min = 1.0;  // crop side as a fraction of the image side
  double crop_max = 1.0;

  static AugmentSpec from(const RunConfig& c) {
    return {c.flip_prob, c.noise_std, c.jitter, c.crop_min, c.crop_max};
  }
  bool disabled() const {
    return flip_prob == 0.0 && noise_std == 0.0 && jitter == 0.0 && crop_min == 1.0 &&
           crop_max == 1.0;
  }
};

// Seed of one augmented view; the same (base, image, view, epoch) always
// yields the same view.
inline std::uint64_t view_seed(std::uint64_t base, std::uint64_t image_id, std::uint64_t view,
                               std::uint64_t epoch) {
  return derive_seed(base, {0xa06u, image_id, view, epoch});
}

// Patch-aligned crop resized back (nearest neighbour), horizontal flip,
// intensity jitter, additive Gaussian noise; in that order.
inline Image augment(const Image& img, const AugmentSpec& s, std::size_t P, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image out = img;
  if (s.crop_min < 1.0 || s.crop_max < 1.0) {
    const double scale = s.crop_min + (s.crop_max - s.crop_min) * unit(rng);
    const std::size_t ch = static_cast<std::size_t>(scale * static_cast<double>(img.H / P)) * P;
    const std::size_t cw = static_cast<std::size_t>(scale * static_cast<double>(img.W / P)) * P;
    if (ch == 0 || cw == 0) {
      throw ShapeError("augment", "crop scale " + io::format_double(scale) +
                                      " leaves no whole patch of size " + std::to_string(P));
    }
    std::uniform_int_distribution<std::size_t> oy_d(0, img.H - ch), ox_d(0, img.W - cw);
    const std::size_t oy = oy_d(rng), ox = ox_d(rng);
    for (std::size_t y = 0; y < img.H; ++y) {
      for (std::size_t x = 0; x < img.W; ++x) {
        const std::size_t sy = oy + y * ch / img.H, sx = ox + x * cw / img.W;
        for (std::size_t c = 0; c < img.C; ++c) out.at(y, x, c) = img.at(sy, sx, c);
      }
    }
  }
  if (s.flip_prob > 0.0 && unit(rng) < s.flip_prob) {
    for (std::size_t y = 0; y < out.H; ++y) {
      for (std::size_t x = 0; x < out.W / 2; ++x) {
        for (std::size_t c = 0; c < out.C; ++c) std::swap(out.at(y, x, c), out.at(y, out.W - 1 - x, c));
      }
    }
  }
  if (s.jitter > 0.0) {
    const float f = static_cast<float>(1.0 - s.jitter + 2.0 * s.jitter * unit(rng));
    for (float& v : out.pixels) v *= f;
  }
  if (s.noise_std > 0.0) {
    std::normal_distribution<double> gauss(0.0, s.noise_std);
    for (float& v : out.pixels) v = static_cast<float>(v + gauss(rng));
  }
  return out;
}

struct ViewPair {
  Image x1;
  Image x2;
};

inline ViewPair make_views(const Image& img, const AugmentSpec& s, std::size_t P,
                           std::uint64_t base_seed, std::uint64_t image_id, std::uint64_t epoch) {
  check_divisible(img.H, img.W, P);
  return {augment(img, s, P, view_seed(base_seed, image_id, 0, epoch)),
          augment(img, s, P, view_seed(base_seed, image_id, 1, epoch))};
}

// Stacks the patch rows of several images: (n*L) x (P*P*C).
template <class T>
Tensor<T> stack_patches(std::span<const Image* const> images, std::size_t P) {
  if (images.empty()) throw ShapeError("stack_patches", "no images");
  const std::size_t L = (images[0]->H / P) * (images[0]->W / P);
  const std::size_t pd = P * P * images[0]->C;
  Tensor<T> out(Shape{images.size() * L, pd});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto grid = partition_patches<T>(*images[b], P, b);
    if (grid.L() != L || grid.patch_dim() != pd) {
      throw ShapeError("stack_patches", "images of different geometry in one batch");
    }
    std::copy(grid.patches.data().begin(), grid.patches.data().end(), &out[b * L * pd]);
  }
  return out;
}

// ------------------------------------------------------------ attn cache

// Per image index: the selected support and the normalised saliency.
struct AttnCache {
  struct Entry {
    std::vector<std::size_t> S;
    std::vector<float> s_hat;
    friend bool operator==(const Entry&, const Entry&) = default;
  };
  std::size_t L = 0;
  std::size_t K = 0;
  std::map<std::uint32_t, Entry> entries;

  std::size_t size() const { return entries.size(); }
  const Entry& at(std::uint32_t id) const {
    auto it = entries.find(id);
    if (it == entries.end()) {
      throw TrainingError("attention cache has no entry for image " + std::to_string(id));
    }
    return it->second;
  }
  friend bool operator==(const AttnCache&, const AttnCache&) = default;
};

// ---------------------------------------------------------------- encode

template <class T>
struct EncodeOptions {
  AttentionMode mode = AttentionMode::kSparse;
  double rho = 0.3;
  BiasMode bias = BiasMode::kSaliency;
  SaliencyInput saliency_input = SaliencyInput::kEmbedded;
  // Per image supports to use instead of fresh top-K selections.
  std::span<const std::vector<std::size_t>> fixed_supports{};
  // Cached normalised saliency (n x L); when set the saliency MLP is skipped.
  const Tensor<T>* cached_s_hat = nullptr;
  AttentionObserver<T> observer{};

  static EncodeOptions from(const RunConfig& c) {
    EncodeOptions o;
    o.mode = c.attention;
    o.rho = c.rho;
    o.bias = c.bias_mode;
    o.saliency_input = c.saliency_input;
    return o;
  }
};

template <class T>
struct Encoded {
  Var<T> F;                                   // n*L x d
  std::optional<Var<T>> s_hat;                // n x L (sparse mode)
  std::vector<std::vector<std::size_t>> supports;  // per image, empty when dense
};

// Normalised saliency of a stack of n images: n x L.
template <class T>
Var<T> saliency_scores(Var<T> patches, Var<T> embedded, ModelParams<T>& p, SaliencyInput in) {
  Var<T> s = saliency_forward(in == SaliencyInput::kEmbedded ? embedded : patches, p);
  return row_softmax(s);
}

// partition (done by the caller) -> embed -> saliency -> top-K -> backbone
// with every block's attention restricted to each image's support.
template <class T>
Encoded<T> encode(Var<T> patches, std::size_t n, ModelParams<T>& p, const EncodeOptions<T>& o) {
  const std::size_t L = p.arch.L();
  Graph<T>& g = patches.graph();
  Encoded<T> out;
  Var<T> e = embed_patches(patches, p);
  std::vector<AttentionPlan<T>> plans(n);
  if (o.mode == AttentionMode::kSparse) {
    if (o.cached_s_hat != nullptr) {
      if (o.cached_s_hat->shape() != Shape{n, L}) {
        throw ShapeError("encode", "cached s_hat " + shape_str(o.cached_s_hat->shape()));
      }
      out.s_hat = g.constant(*o.cached_s_hat);
    } else {
      out.s_hat = saliency_scores(patches, e, p, o.saliency_input);
    }
    if (!o.fixed_supports.empty()) {
      if (o.fixed_supports.size() != n) throw ShapeError("encode", "supports per image");
      out.supports.assign(o.fixed_supports.begin(), o.fixed_supports.end());
    } else {
      const auto sh = out.s_hat->value().data();
      for (std::size_t b = 0; b < n; ++b) {
        out.supports.push_back(select_topk<T>(sh.subspan(b * L, L), o.rho).indices);
      }
    }
    for (std::size_t b = 0; b < n; ++b) {
      plans[b].support = out.supports[b];
      plans[b].bias = o.bias;
      if (o.bias == BiasMode::kSaliency) {
        const std::size_t row = b;
        plans[b].s_hat_row = n == 1 ? *out.s_hat : gather_rows(*out.s_hat, std::span(&row, 1));
      }
    }
  } else {
    out.supports.assign(n, {});
  }
  out.F = backbone_forward<T>(e, p, plans, o.observer);
  return out;
}

// ------------------------------------------------------------ objectives

struct StepMetrics {
  std::size_t step = 0;
  double l_contrast = 0.0;
  double l_sparse_soft = 0.0;  // surrogate indicator term + reconstruction
  double l_sparse_hard = 0.0;  // hard indicator term + reconstruction
  double l_total = 0.0;
};

template <class T>
struct Objective {
  Var<T> total;
  Var<T> contrast;
  StepMetrics metrics;
};

// L_total for a stack of 2n views: rows [0, n) hold the first view of each
// image and rows [n, 2n) the second. In dense mode there is no saliency and
// the reconstruction covers every patch.
template <class T>
Objective<T> pretrain_objective(Graph<T>& g, ModelParams<T>& p, const Tensor<T>& views,
                                std::size_t n, const RunConfig& c,
                                std::span<const std::vector<std::size_t>> fixed_supports = {}) {
  const std::size_t L = p.arch.L();
  Var<T> patches = g.constant(views);
  auto opts = EncodeOptions<T>::from(c);
  opts.fixed_supports = fixed_supports;
  Encoded<T> enc = encode(patches, 2 * n, p, opts);
  Var<T> z = projection_forward(enc.F, p);
  std::vector<std::size_t> first(n), second(n);
  std::iota(first.begin(), first.end(), std::size_t{0});
  std::iota(second.begin(), second.end(), n);
  Objective<T> obj;
  obj.contrast = info_nce(gather_rows(z, first), gather_rows(z, second), c.tau);
  obj.metrics.l_contrast = obj.contrast.value().item();
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < 2 * n; ++b) {
    if (c.attention == AttentionMode::kSparse) {
      for (std::size_t j : enc.supports[b]) rows.push_back(b * L + j);
    } else {
      for (std::size_t j = 0; j < L; ++j) rows.push_back(b * L + j);
    }
  }
  Var<T> recon = recon_forward(enc.F, rows, p);
  Var<T> target = gather_rows(patches, rows);
  Var<T> l_sparse;
  if (c.attention == AttentionMode::kSparse) {
    auto sl = sparsity_loss(*enc.s_hat, c.theta_value(), c.rho, target, recon, c.t_ind);
    l_sparse = sl.value;
    obj.metrics.l_sparse_soft = sl.terms.soft_indicator + sl.terms.recon;
    obj.metrics.l_sparse_hard = sl.terms.hard_indicator + sl.terms.recon;
  } else {
    l_sparse = scale(sum(sq_diff(target, recon)),
                     static_cast<T>(1.0 / static_cast<double>(rows.size())));
    obj.metrics.l_sparse_soft = obj.metrics.l_sparse_hard = l_sparse.value().item();
  }
  obj.total = total_loss(obj.contrast, l_sparse, c.lambda);
  obj.metrics.l_total = obj.total.value().item();
  return obj;
}

// ------------------------------------------------------------- schedule

enum class Phase { kJoint, kSaliency, kBackbone };

inline std::string_view to_string(Phase ph) {
  switch (ph) {
    case Phase::kJoint: return "joint";
    case Phase::kSaliency: return "saliency";
    case Phase::kBackbone: return "backbone";
  }
  return "?";
}

inline Phase phase_for_step(std::size_t step, std::size_t alt_period) {
  if (alt_period == 0) return Phase::kJoint;
  return step % (2 * alt_period) < alt_period ? Phase::kSaliency : Phase::kBackbone;
}

// Parameters updated in a pretraining phase. The classifier is never touched
// by pretraining.
inline bool pretrain_updates(Phase ph, AttentionMode mode, std::string_view name) {
  if (name.starts_with("cls.")) return false;
  const bool sal = is_saliency_param(name);
  if (mode == AttentionMode::kDense) return !sal;
  switch (ph) {
    case Phase::kJoint: return true;
    case Phase::kSaliency: return sal;
    case Phase::kBackbone: return !sal;
  }
  return false;
}

// Fine-tuning updates the embedder, the backbone and the classifier only.
inline bool finetune_updates(std::string_view name) {
  return name.starts_with("embed.") || name.starts_with("backbone.") || name.starts_with("cls.");
}

// ------------------------------------------------------------ pretrain

struct Batcher {
  std::vector<std::size_t> pool;
  std::size_t batch = 1;
  std::uint64_t seed = 0;
  std::uint64_t tag = 0;

  std::size_t per_epoch() const { return pool.size() / batch; }

  // Images of `step`: a fresh seeded permutation of the pool every epoch,
  // consecutive slices within it, a trailing remainder is dropped.
  std::vector<std::size_t> at(std::size_t step, std::size_t* epoch_out = nullptr) const {
    if (pool.empty() || batch == 0 || batch > pool.size()) {
      throw TrainingError("batch of " + std::to_string(batch) + " from " +
                          std::to_string(pool.size()) + " images");
    }
    const std::size_t epoch = step / per_epoch(), slot = step % per_epoch();
    std::vector<std::size_t> perm = pool;
    Rng rng(derive_seed(seed, {tag, epoch}));
    std::shuffle(perm.begin(), perm.end(), rng);
    if (epoch_out) *epoch_out = epoch;
    return {perm.begin() + static_cast<std::ptrdiff_t>(slot * batch),
            perm.begin() + static_cast<std::ptrdiff_t>((slot + 1) * batch)};
  }
};

template <class T>
void require_finite_step(const Objective<T>& obj, std::size_t step) {
  if (!std::isfinite(obj.metrics.l_total)) {
    throw TrainingError("non-finite loss at step " + std::to_string(step) + " (L_contrast=" +
                        std::to_string(obj.metrics.l_contrast) + ", L_sparse=" +
                        std::to_string(obj.metrics.l_sparse_soft) + ")");
  }
}

// One optimisation step on a batch of dataset images.
template <class T>
StepMetrics pretrain_step(const Dataset& ds, std::span<const std::size_t> batch, std::size_t step,
                          std::size_t epoch, ModelParams<T>& p, OptimizerState<T>& opt,
                          const RunConfig& c,
                          const std::vector<std::vector<std::size_t>>* static_supports = nullptr) {
  const auto aug = AugmentSpec::from(c);
  const std::size_t n = batch.size();
  std::vector<Image> views(2 * n);
  for (std::size_t b = 0; b < n; ++b) {
    auto v = make_views(ds.samples[batch[b]].image, aug, ds.P, c.seed, batch[b], epoch);
    views[b] = std::move(v.x1);
    views[n + b] = std::move(v.x2);
  }
  std::vector<const Image*> ptrs;
  for (const auto& v : views) ptrs.push_back(&v);
  const Tensor<T> stack = stack_patches<T>(ptrs, ds.P);
  std::vector<std::vector<std::size_t>> fixed;
  if (static_supports != nullptr) {
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t b = 0; b < n; ++b) fixed.push_back((*static_supports)[batch[b]]);
    }
  }
  const Phase ph = phase_for_step(step, c.alt_period);
  auto updates = [&](const std::string& name) { return pretrain_updates(ph, c.attention, name); };
  p.set_trainable(updates);
  p.zero_grad();
  Graph<T> g;
  Objective<T> obj;
  try {
    obj = pretrain_objective<T>(g, p, stack, n, c, fixed);
    require_finite_step(obj, step);
    g.backward(obj.total);
    adamw_step(opt, p.tensors, updates);
  } catch (const DomainError& e) {
    throw TrainingError("pretraining aborted at step " + std::to_string(step) + " (" +
                        std::string(to_string(ph)) + " phase): " + e.what());
  }
  obj.metrics.step = step;
  return obj.metrics;
}

template <class T>
struct PretrainResult {
  ModelParams<T> params;
  OptimizerState<T> opt;
  std::vector<StepMetrics> metrics;
};

// Pool of pretraining images: the whole dataset, labels unused.
inline std::vector<std::size_t> all_indices(const Dataset& ds) {
  std::vector<std::size_t> v(ds.size());
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

template <class T>
std::vector<std::vector<std::size_t>> select_supports(const Dataset& ds,
                                                      std::span<const std::size_t> ids,
                                                      ModelParams<T>& p, const RunConfig& c);

template <class T>
PretrainResult<T> pretrain(const Dataset& ds, const RunConfig& c,
                           const std::function<void(const StepMetrics&)>& on_step = {}) {
  if (ds.H != c.image_h || ds.W != c.image_w || ds.C != c.channels || ds.P != c.P) {
    throw ShapeError("pretrain", "dataset geometry differs from the config");
  }
  PretrainResult<T> r{init_params<T>(c.arch(), c.seed), {}, {}};
  r.opt.config = c.adamw();
  Batcher batcher{all_indices(ds), c.batch, c.seed, 0xb47c4u};
  std::vector<std::vector<std::size_t>> statics;
  const bool is_static = c.attention == AttentionMode::kSparse &&
                         c.support_schedule == SupportSchedule::kStatic;
  if (is_static) {
    const auto ids = all_indices(ds);
    statics = select_supports<T>(ds, ids, r.params, c);
  }
  for (std::size_t step = 0; step < c.steps; ++step) {
    std::size_t epoch = 0;
    const auto batch = batcher.at(step, &epoch);
    auto m = pretrain_step<T>(ds, batch, step, epoch, r.params, r.opt, c,
                              is_static ? &statics : nullptr);
    r.metrics.push_back(m);
    if (on_step) on_step(m);
  }
  r.params.set_trainable([](const std::string&) { return true; });
  return r;
}

// ------------------------------------------------------------- snapshot

template <class T>
void for_each_chunk(std::span<const std::size_t> ids, std::size_t chunk,
                    const std::function<void(std::span<const std::size_t>)>& fn) {
  for (std::size_t off = 0; off < ids.size(); off += chunk) {
    fn(ids.subspan(off, std::min(chunk, ids.size() - off)));
  }
}

// Normalised saliency rows (n x L) of un-augmented images.
template <class T>
Tensor<T> saliency_of(const Dataset& ds, std::span<const std::size_t> ids, ModelParams<T>& p,
                      const RunConfig& c) {
  std::vector<const Image*> ptrs;
  for (std::size_t id : ids) ptrs.push_back(&ds.samples.at(id).image);
  Graph<T> g;
  Var<T> patches = g.constant(stack_patches<T>(ptrs, ds.P));
  Var<T> e = embed_patches(patches, p);
  return saliency_scores(patches, e, p, c.saliency_input).value();
}

template <class T>
std::vector<std::vector<std::size_t>> select_supports(const Dataset& ds,
                                                      std::span<const std::size_t> ids,
                                                      ModelParams<T>& p, const RunConfig& c) {
  std::vector<std::vector<std::size_t>> out(ds.size());
  const std::size_t L = ds.L();
  for_each_chunk<T>(ids, 64, [&](std::span<const std::size_t> chunk) {
    const Tensor<T> sh = saliency_of(ds, chunk, p, c);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      out[chunk[b]] = select_topk<T>(sh.data().subspan(b * L, L), c.rho).indices;
    }
  });
  return out;
}

// One un-augmented forward per image; stores S and s_hat.
template <class T>
AttnCache snapshot_cache(const Dataset& ds, std::span<const std::size_t> ids, ModelParams<T>& p,
                         const RunConfig& c) {
  AttnCache cache;
  cache.L = ds.L();
  cache.K = topk_count(c.rho, cache.L);
  const std::size_t L = cache.L;
  for_each_chunk<T>(ids, 64, [&](std::span<const std::size_t> chunk) {
    const Tensor<T> sh = saliency_of(ds, chunk, p, c);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const auto row = sh.data().subspan(b * L, L);
      AttnCache::Entry e;
      e.S = select_topk<T>(row, c.rho).indices;
      e.s_hat.assign(row.begin(), row.end());
      cache.entries[static_cast<std::uint32_t>(chunk[b])] = std::move(e);
    }
  });
  return cache;
}

template <class T>
AttnCache snapshot_cache(const Dataset& ds, ModelParams<T>& p, const RunConfig& c) {
  const auto ids = all_indices(ds);
  return snapshot_cache<T>(ds, ids, p, c);
}

// Mean over images of |mask ∩ S| / |mask|, for images with a non-empty mask.
inline double localization_recall(const Dataset& ds, const AttnCache& cache) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& [id, e] : cache.entries) {
    const auto& mask = ds.samples.at(id).anomaly_mask;
    if (mask.empty()) continue;
    std::size_t hit = 0;
    for (auto m : mask) hit += std::binary_search(e.S.begin(), e.S.end(), std::size_t{m}) ? 1 : 0;
    total += static_cast<double>(hit) / static_cast<double>(mask.size());
    ++n;
  }
  if (n == 0) throw DomainError("localization_recall", "no image with an anomaly mask");
  return total / static_cast<double>(n);
}

// ------------------------------------------------------------ fine-tune

struct FinetuneMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double batch_accuracy = 0.0;
};

// Forward of a batch of un-augmented images to class logits (n x classes).
// With reuse_cache the supports and saliency come from the cache and the
// saliency network is not evaluated.
template <class T>
Var<T> classify_batch(Graph<T>& g, const Dataset& ds, std::span<const std::size_t> ids,
                      ModelParams<T>& p, const RunConfig& c, const AttnCache* cache) {
  std::vector<const Image*> ptrs;
  for (std::size_t id : ids) ptrs.push_back(&ds.samples.at(id).image);
  Var<T> patches = g.constant(stack_patches<T>(ptrs, ds.P));
  auto opts = EncodeOptions<T>::from(c);
  std::vector<std::vector<std::size_t>> supports;
  Tensor<T> cached;
  if (c.attention == AttentionMode::kSparse && c.reuse_cache) {
    if (cache == nullptr) throw TrainingError("reuse_cache = true but no attention cache given");
    const std::size_t L = p.arch.L();
    if (cache->L != L) throw TrainingError("attention cache L differs from the model");
    cached = Tensor<T>(Shape{ids.size(), L});
    for (std::size_t b = 0; b < ids.size(); ++b) {
      const auto& e = cache->at(static_cast<std::uint32_t>(ids[b]));
      supports.push_back(e.S);
      for (std::size_t j = 0; j < L; ++j) cached(b, j) = static_cast<T>(e.s_hat[j]);
    }
    opts.fixed_supports = supports;
    opts.cached_s_hat = &cached;
  }
  Encoded<T> enc = encode(patches, ids.size(), p, opts);
  return classifier_logits(enc.F, p);
}

template <class T>
FinetuneMetrics finetune_step(const Dataset& ds, std::span<const std::size_t> batch,
                              std::size_t step, ModelParams<T>& p, OptimizerState<T>& opt,
                              const RunConfig& c, const AttnCache* cache) {
  p.set_trainable([](const std::string& n) { return finetune_updates(n); });
  p.zero_grad();
  Graph<T> g;
  FinetuneMetrics m;
  m.step = step;
  try {
    Var<T> logits = classify_batch<T>(g, ds, batch, p, c, cache);
    std::vector<std::size_t> labels;
    for (std::size_t id : batch) labels.push_back(ds.samples[id].label);
    Var<T> probs = row_softmax(logits);
    Var<T> loss = scale(mean(log(pick_per_row(probs, labels))), T{-1});
    m.loss = loss.value().item();
    if (!std::isfinite(m.loss)) throw TrainingError("non-finite fine-tune loss at step " + std::to_string(step));
    std::size_t correct = 0;
    const auto& P = probs.value();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < P.cols(); ++k) best = P(b, k) > P(b, best) ? k : best;
      correct += best == labels[b] ? 1 : 0;
    }
    m.batch_accuracy = static_cast<double>(correct) / static_cast<double>(batch.size());
    g.backward(loss);
    adamw_step(opt, p.tensors, [](const std::string& n) { return finetune_updates(n); });
  } catch (const DomainError& e) {
    throw TrainingError("fine-tuning aborted at step " + std::to_string(step) + ": " + e.what());
  }
  return m;
}

template <class T>
struct FinetuneResult {
  ModelParams<T> params;
  OptimizerState<T> opt;
  std::vector<FinetuneMetrics> metrics;
};

// Fine-tunes on dataset images [0, labeled).
template <class T>
FinetuneResult<T> finetune(const Dataset& ds, ModelParams<T> params, const RunConfig& c,
                           const AttnCache* cache,
                           const std::function<void(const FinetuneMetrics&)>& on_step = {}) {
  if (c.labeled == 0 || c.labeled > ds.size()) {
    throw TrainingError("labeled = " + std::to_string(c.labeled) + " for a dataset of " +
                        std::to_string(ds.size()) + " images");
  }
  std::vector<std::size_t> pool(c.labeled);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  FinetuneResult<T> r{std::move(params), {}, {}};
  r.opt.config = c.adamw(c.finetune_lr);
  Batcher batcher{pool, std::min(c.finetune_batch, pool.size()), c.seed, 0xf17e4u};
  for (std::size_t step = 0; step < c.finetune_steps; ++step) {
    const auto batch = batcher.at(step);
    auto m = finetune_step<T>(ds, batch, step, r.params, r.opt, c, cache);
    r.metrics.push_back(m);
    if (on_step) on_step(m);
  }
  r.params.set_trainable([](const std::string&) { return true; });
  return r;
}

// ------------------------------------------------------------- evaluate

// Mann-Whitney estimate of P(score_pos > score_neg) with ties counted half,
// via midranks.
inline double auc_binary(std::span<const double> scores, std::span<const char> positive) {
  if (scores.size() != positive.size()) throw ShapeError("auc", "scores vs labels");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double n_pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (positive[i]) {
      n_pos += 1.0;
      rank_sum += rank[i];
    }
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) {
    throw DomainError("auc", "AUC is undefined for a single-class set");
  }
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

// Binary: AUC of the class-1 probability. Multi-class: one-vs-rest AUC
// averaged over the classes present.
inline double auc_score(const std::vector<std::vector<double>>& probs,
                        std::span<const std::size_t> labels) {
  if (probs.size() != labels.size() || probs.empty()) throw ShapeError("auc", "probs vs labels");
  const std::size_t k = probs[0].size();
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < k; ++c) {
    if (std::find(labels.begin(), labels.end(), c) != labels.end()) present.push_back(c);
  }
  if (present.size() < 2) throw DomainError("auc", "AUC is undefined for a single-class set");
  auto one = [&](std::size_t cls) {
    std::vector<double> s;
    std::vector<char> pos;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s.push_back(probs[i][cls]);
      pos.push_back(labels[i] == cls ? 1 : 0);
    }
    return auc_binary(s, pos);
  };
  if (k == 2) return one(1);
  double total = 0.0;
  for (std::size_t c : present) total += one(c);
  return total / static_cast<double>(present.size());
}

struct EvalMetrics {
  double accuracy = 0.0;
  double auc = 0.0;
  std::size_t n = 0;
};

template <class T>
EvalMetrics evaluate(const Dataset& ds, std::span<const std::size_t> ids, ModelParams<T>& p,
                     const RunConfig& c, const AttnCache* cache) {
  if (ids.empty()) throw TrainingError("evaluation set is empty");
  std::vector<std::vector<double>> probs;
  std::vector<std::size_t> labels;
  std::size_t correct = 0;
  for_each_chunk<T>(ids, 64, [&](std::span<const std::size_t> chunk) {
    Graph<T> g;
    const auto& P = row_softmax(classify_batch<T>(g, ds, chunk, p, c, cache)).value();
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      std::vector<double> row(P.cols());
      std::size_t best = 0;
      for (std::size_t k = 0; k < P.cols(); ++k) {
        row[k] = static_cast<double>(P(b, k));
        best = row[k] > row[best] ? k : best;
      }
      labels.push_back(ds.samples[chunk[b]].label);
      correct += best == labels.back() ? 1 : 0;
      probs.push_back(std::move(row));
    }
  });
  EvalMetrics m;
  m.n = ids.size();
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.n);
  m.auc = auc_score(probs, labels);
  return m;
}

// Images held out from fine-tuning: [labeled, n), or every image when the
// whole dataset is labeled.
inline std::vector<std::size_t> heldout_indices(const Dataset& ds, std::size_t labeled) {
  std::vector<std::size_t> v;
  for (std::size_t i = labeled; i < ds.size(); ++i) v.push_back(i);
  if (v.empty()) v = all_indices(ds);
  return v;
}

}  // namespace sc

#endif  // SC_TRAINING_HPP_
