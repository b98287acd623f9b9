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

#ifndef SC_MODEL_PARAMS_HPP_
#define SC_MODEL_PARAMS_HPP_

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "sc/diffcore/rng.hpp"
#include "sc/diffcore/tensor.hpp"
#include "sc/error.hpp"

namespace sc {

enum class SaliencyInput { kEmbedded, kRaw };

inline std::string_view to_string(SaliencyInput s) {
  return s == SaliencyInput::kEmbedded ? "embedded" : "raw";
}

inline SaliencyInput parse_saliency_input(std::string_view s) {
  if (s == "embedded") return SaliencyInput::kEmbedded;
  if (s == "raw") return SaliencyInput::kRaw;
  throw ConfigError("saliency_input must be raw|embedded, got '" + std::string(s) + "'");
}

// Architecture descriptor. Every parameter shape is a function of it.
struct Architecture {
  std::size_t H = 64;
  std::size_t W = 64;
  std::size_t C = 1;
  std::size_t P = 8;
  std::size_t d = 64;
  std::size_t n_blocks = 2;
  std::size_t mlp_hidden = 128;
  std::vector<std::size_t> saliency_hidden{512, 256};
  std::size_t proj_hidden = 64;
  std::size_t d_z = 32;
  std::size_t n_classes = 2;
  SaliencyInput saliency_input = SaliencyInput::kEmbedded;

  std::size_t L() const { return (H / P) * (W / P); }
  std::size_t patch_dim() const { return P * P * C; }
  std::size_t saliency_in() const {
    return saliency_input == SaliencyInput::kEmbedded ? d : patch_dim();
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

inline bool is_saliency_param(std::string_view name) {
  return name.starts_with("saliency.");
}

inline std::string block_prefix(std::size_t b) { return "backbone." + std::to_string(b) + "."; }

// Expected (name -> shape) table for an architecture, in sorted name order.
inline std::map<std::string, Shape> expected_shapes(const Architecture& a) {
  if (a.P == 0 || a.H % a.P != 0 || a.W % a.P != 0) {
    throw ConfigError("image " + std::to_string(a.H) + "x" + std::to_string(a.W) +
                      " not divisible by patch size " + std::to_string(a.P));
  }
  if (a.d == 0 || a.d_z == 0 || a.n_classes == 0 || a.mlp_hidden == 0 || a.proj_hidden == 0) {
    throw ConfigError("architecture widths must be positive");
  }
  std::map<std::string, Shape> s;
  const std::size_t L = a.L(), pd = a.patch_dim(), d = a.d;
  s["embed.weight"] = {pd, d};
  s["embed.bias"] = {d};
  s["embed.pos"] = {L, d};
  for (std::size_t b = 0; b < a.n_blocks; ++b) {
    const std::string p = block_prefix(b);
    s[p + "ln1.gamma"] = {d};
    s[p + "ln1.beta"] = {d};
    s[p + "attn.wq"] = {d, d};
    s[p + "attn.wk"] = {d, d};
    s[p + "attn.wv"] = {d, d};
    s[p + "attn.wo"] = {d, d};
    s[p + "ln2.gamma"] = {d};
    s[p + "ln2.beta"] = {d};
    s[p + "mlp.w1"] = {d, a.mlp_hidden};
    s[p + "mlp.b1"] = {a.mlp_hidden};
    s[p + "mlp.w2"] = {a.mlp_hidden, d};
    s[p + "mlp.b2"] = {d};
  }
  std::size_t in = a.saliency_in();
  for (std::size_t i = 0; i <= a.saliency_hidden.size(); ++i) {
    const std::size_t out = i < a.saliency_hidden.size() ? a.saliency_hidden[i] : 1;
    if (out == 0) throw ConfigError("saliency hidden widths must be positive");
    s["saliency.l" + std::to_string(i) + ".weight"] = {in, out};
    s["saliency.l" + std::to_string(i) + ".bias"] = {out};
    in = out;
  }
  s["proj.l0.weight"] = {d, a.proj_hidden};
  s["proj.l0.bias"] = {a.proj_hidden};
  s["proj.l1.weight"] = {a.proj_hidden, a.d_z};
  s["proj.l1.bias"] = {a.d_z};
  s["cls.weight"] = {d, a.n_classes};
  s["cls.bias"] = {a.n_classes};
  s["recon.weight"] = {d, pd};
  s["recon.bias"] = {pd};
  return s;
}

// Named parameter collection, iterated in sorted name order.
template <class T>
struct ModelParams {
  Architecture arch;
  std::map<std::string, Tensor<T>> tensors;

  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
  }

  // Every expected name present with the expected shape and nothing else.
  void validate() const {
    const auto want = expected_shapes(arch);
    if (want.size() != tensors.size()) {
      throw ShapeError("ModelParams", "expected " + std::to_string(want.size()) +
                                          " tensors, found " + std::to_string(tensors.size()));
    }
    for (const auto& [name, shape] : want) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw ShapeError("ModelParams", "missing tensor '" + name + "'");
      if (it->second.shape() != shape) {
        throw ShapeError("ModelParams", name + " has shape " + shape_str(it->second.shape()) +
                                            ", architecture requires " + shape_str(shape));
      }
    }
  }

  void zero_grad() {
    for (auto& [_, t] : tensors) t.zero_grad();
  }

  // Marks which parameters receive gradients; frozen ones stay untouched
  // by backward().
  template <class Pred>
  void set_trainable(Pred pred) {
    for (auto& [name, t] : tensors) t.set_requires_grad(pred(name));
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.arch = arch;
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
    return out;
  }
};

// Weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero, layer-norm
// gains one. Initialisation order is the sorted name order.
template <class T>
ModelParams<T> init_params(const Architecture& arch, std::uint64_t seed) {
  ModelParams<T> p;
  p.arch = arch;
  Rng rng(derive_seed(seed, {0x1417u}));
  for (const auto& [name, shape] : expected_shapes(arch)) {
    Tensor<T> t(shape);
    const bool is_gain = name.ends_with(".gamma");
    const bool is_vector = shape.size() == 1;
    if (is_gain) {
      for (T& v : t.data()) v = T{1};
    } else if (!is_vector) {
      fill_xavier(t, rng, shape[0], shape[1]);
    }
    t.set_requires_grad(true);
    p.tensors.emplace(name, std::move(t));
  }
  return p;
}

}  // namespace sc

#endif  // SC_MODEL_PARAMS_HPP_
