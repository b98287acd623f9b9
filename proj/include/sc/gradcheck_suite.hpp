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

// The finite-difference suite behind `sc gradcheck`: every primitive, every
// model forward, every loss, and the full pretraining objective on a
// two-image toy batch, all in double precision.

#ifndef SC_GRADCHECK_SUITE_HPP_
#define SC_GRADCHECK_SUITE_HPP_

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sc/config.hpp"
#include "sc/diffcore/gradcheck.hpp"
#include "sc/diffcore/ops.hpp"
#include "sc/diffcore/rng.hpp"
#include "sc/losses.hpp"
#include "sc/model/networks.hpp"
#include "sc/sparse_attn.hpp"
#include "sc/training.hpp"

namespace sc {

enum class SuiteModule { kAll, kDiffcore, kModel, kLosses };

inline SuiteModule parse_suite_module(std::string_view s) {
  if (s == "all") return SuiteModule::kAll;
  if (s == "diffcore") return SuiteModule::kDiffcore;
  if (s == "model") return SuiteModule::kModel;
  if (s == "losses") return SuiteModule::kLosses;
  throw ConfigError("--module must be all|diffcore|model|losses, got '" + std::string(s) + "'");
}

struct SuiteResult {
  std::vector<GradCheckReport> reports;

  bool passed() const {
    for (const auto& r : reports) {
      if (!r.passed()) return false;
    }
    return !reports.empty();
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& r : reports) m = std::max(m, r.max_rel_error());
    return m;
  }
};

inline constexpr double kPrimitiveTol = 1e-6;
inline constexpr double kModelTol = 1e-4;

// Tiny architecture for finite differences: 8x8 images, P=4 => L=4.
inline RunConfig toy_config() {
  RunConfig c;
  c.image_h = c.image_w = 8;
  c.P = 4;
  c.d = 8;
  c.n_blocks = 1;
  c.mlp_hidden = 8;
  c.saliency_hidden = {8, 6};
  c.proj_hidden = 8;
  c.d_z = 4;
  c.rho = 0.5;
  return c;
}

namespace detail {

using DT = Tensor<double>;

// Scalar read-out used by every check: sum(out * W) with a fixed random W,
// so each output element carries a distinct weight.
inline Var<double> weighted_sum(Var<double> out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, out.graph().constant(random_tensor<double>(out.shape(), rng))));
}

class SuiteBuilder {
 public:
  SuiteBuilder(SuiteResult& r, std::uint64_t seed) : result_(r), rng_(seed) {}

  DT& tensor(Shape s, double lo = -1.0, double hi = 1.0) {
    store_.push_back(std::make_unique<DT>(random_tensor<double>(std::move(s), rng_, lo, hi)));
    return *store_.back();
  }

  // Adds one check whose inputs are `ins` (bound as graph params in order).
  void check(const std::string& label, std::vector<DT*> ins,
             std::function<Var<double>(Graph<double>&, std::vector<Var<double>>&)> body,
             double tol) {
    const std::uint64_t wseed = ++counter_;
    LossBuilder f = [ins, body, wseed](Graph<double>& g) {
      std::vector<Var<double>> vs;
      for (DT* t : ins) vs.push_back(g.param(*t));
      return weighted_sum(body(g, vs), wseed);
    };
    std::vector<NamedParam> named;
    for (std::size_t i = 0; i < ins.size(); ++i) named.emplace_back("in" + std::to_string(i), ins[i]);
    result_.reports.push_back(grad_check(f, named, tol, 1e-5, label));
  }

  // Check over all parameters of a model (named by parameter name).
  void check_params(const std::string& label, ModelParams<double>& p,
                    std::function<Var<double>(Graph<double>&)> body, double tol,
                    bool weighted = true) {
    const std::uint64_t wseed = ++counter_;
    LossBuilder f = [body, wseed, weighted](Graph<double>& g) {
      Var<double> out = body(g);
      return weighted ? weighted_sum(out, wseed) : out;
    };
    std::vector<NamedParam> named;
    for (auto& [name, t] : p.tensors) named.emplace_back(name, &t);
    result_.reports.push_back(grad_check(f, named, tol, 1e-5, label));
  }

  Rng& rng() { return rng_; }

 private:
  SuiteResult& result_;
  Rng rng_;
  std::uint64_t counter_ = 0;
  std::vector<std::unique_ptr<DT>> store_;
};

// Parameters with every vector moved off its initial value. Biases are
// lifted so most relu units are active on the toy batch and their gradients
// are actually exercised.
inline ModelParams<double> toy_params(const RunConfig& c, std::uint64_t seed, Rng& rng) {
  ModelParams<double> p = init_params<double>(c.arch(), seed);
  std::uniform_real_distribution<double> jitter(-0.3, 0.3), lift(0.5, 1.0);
  for (auto& [name, t] : p.tensors) {
    if (t.rank() != 1) continue;
    const bool bias = name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2");
    for (double& v : t.data()) v += bias ? lift(rng) : jitter(rng);
  }
  return p;
}

inline void primitive_checks(SuiteBuilder& b) {
  using V = std::vector<Var<double>>;
  using G = Graph<double>;
  const double tol = kPrimitiveTol;
  b.check("matmul", {&b.tensor({3, 4}), &b.tensor({4, 2})},
          [](G&, V& v) { return matmul(v[0], v[1]); }, tol);
  b.check("matmul_nt", {&b.tensor({3, 4}), &b.tensor({5, 4})},
          [](G&, V& v) { return matmul_nt(v[0], v[1]); }, tol);
  b.check("affine", {&b.tensor({3, 4}), &b.tensor({4, 2}), &b.tensor({2})},
          [](G&, V& v) { return affine(v[0], v[1], v[2]); }, tol);
  b.check("transpose", {&b.tensor({3, 2})}, [](G&, V& v) { return transpose(v[0]); }, tol);
  b.check("reshape", {&b.tensor({3, 2})},
          [](G&, V& v) { return reshape(v[0], Shape{2, 3}); }, tol);
  b.check("add", {&b.tensor({3, 2}), &b.tensor({3, 2})},
          [](G&, V& v) { return add(v[0], v[1]); }, tol);
  b.check("add_row_broadcast", {&b.tensor({3, 2}), &b.tensor({2})},
          [](G&, V& v) { return add(v[0], v[1]); }, tol);
  b.check("sub_scalar_broadcast", {&b.tensor({3, 2}), &b.tensor({1})},
          [](G&, V& v) { return sub(v[0], v[1]); }, tol);
  b.check("mul", {&b.tensor({3, 2}), &b.tensor({3, 2})},
          [](G&, V& v) { return mul(v[0], v[1]); }, tol);
  b.check("scale", {&b.tensor({3, 2})}, [](G&, V& v) { return scale(v[0], -1.7); }, tol);
  b.check("add_scalar", {&b.tensor({3, 2})}, [](G&, V& v) { return add_scalar(v[0], 0.3); }, tol);
  b.check("relu", {&b.tensor({4, 3})}, [](G&, V& v) { return relu(v[0]); }, tol);
  b.check("abs", {&b.tensor({4, 3})}, [](G&, V& v) { return abs(v[0]); }, tol);
  b.check("exp", {&b.tensor({3, 3})}, [](G&, V& v) { return exp(v[0]); }, tol);
  b.check("log", {&b.tensor({3, 3}, 0.5, 2.0)}, [](G&, V& v) { return log(v[0]); }, tol);
  b.check("sigmoid", {&b.tensor({3, 3})}, [](G&, V& v) { return sigmoid(v[0]); }, tol);
  b.check("row_softmax", {&b.tensor({3, 4})}, [](G&, V& v) { return row_softmax(v[0]); }, tol);
  b.check("row_softmax_masked", {&b.tensor({2, 4})},
          [](G&, V& v) {
            static const std::vector<char> mask{0, 1, 0, 0, 1, 0, 0, 1};
            return row_softmax(v[0], mask);
          },
          tol);
  b.check("layer_norm", {&b.tensor({3, 5}), &b.tensor({5}), &b.tensor({5})},
          [](G&, V& v) { return layer_norm(v[0], v[1], v[2]); }, tol);
  b.check("gather_rows", {&b.tensor({4, 3})},
          [](G&, V& v) {
            static const std::vector<std::size_t> idx{2, 0, 2};
            return gather_rows(v[0], idx);
          },
          tol);
  b.check("gather_cols", {&b.tensor({3, 4})},
          [](G&, V& v) {
            static const std::vector<std::size_t> idx{1, 3};
            return gather_cols(v[0], idx);
          },
          tol);
  b.check("pick_per_row", {&b.tensor({3, 4})},
          [](G&, V& v) {
            static const std::vector<std::size_t> idx{1, 3, 0};
            return pick_per_row(v[0], idx);
          },
          tol);
  b.check("sum", {&b.tensor({3, 4})}, [](G&, V& v) { return sum(v[0]); }, tol);
  b.check("mean", {&b.tensor({3, 4})}, [](G&, V& v) { return mean(v[0]); }, tol);
  b.check("mean_rows", {&b.tensor({3, 4})}, [](G&, V& v) { return mean_rows(v[0]); }, tol);
  b.check("mean_row_blocks", {&b.tensor({6, 2})},
          [](G&, V& v) { return mean_row_blocks(v[0], 3); }, tol);
  b.check("sq_diff", {&b.tensor({3, 2}), &b.tensor({3, 2})},
          [](G&, V& v) { return sq_diff(v[0], v[1]); }, tol);
  b.check("l2_normalize_rows", {&b.tensor({3, 4})},
          [](G&, V& v) { return l2_normalize_rows(v[0]); }, tol);
  b.check("concat_rows", {&b.tensor({2, 3}), &b.tensor({1, 3})},
          [](G&, V& v) { return concat_rows<double>({v[0], v[1]}); }, tol);
}

inline void attention_checks(SuiteBuilder& b) {
  using V = std::vector<Var<double>>;
  using G = Graph<double>;
  const double tol = kPrimitiveTol;
  static const std::vector<std::size_t> S{0, 2, 3};
  b.check("dense_attention", {&b.tensor({5, 3}), &b.tensor({5, 3}), &b.tensor({5, 3})},
          [](G&, V& v) { return attend<double>(v[0], v[1], v[2], {}, std::nullopt, BiasMode::kNone); },
          tol);
  b.check("sparse_attention", {&b.tensor({5, 3}), &b.tensor({5, 3}), &b.tensor({5, 3})},
          [](G&, V& v) { return attend<double>(v[0], v[1], v[2], S, std::nullopt, BiasMode::kNone); },
          tol);
  b.check("sparse_attention_bias",
          {&b.tensor({5, 3}), &b.tensor({5, 3}), &b.tensor({5, 3}), &b.tensor({1, 5}, 0.05, 1.0)},
          [](G&, V& v) {
            return attend<double>(v[0], v[1], v[2], S, v[3], BiasMode::kSaliency);
          },
          tol);
  // Two images of L=4 rows: one sparse, one dense, both with the log-bias.
  b.check("attend_batch",
          {&b.tensor({8, 3}), &b.tensor({8, 3}), &b.tensor({8, 3}), &b.tensor({2, 4}, 0.05, 1.0)},
          [](G&, V& v) {
            static const std::vector<std::size_t> s0{1, 3};
            const std::vector<std::span<const std::size_t>> sup{s0, {}};
            const std::size_t r0 = 0, r1 = 1;
            const std::vector<std::optional<Var<double>>> rows{
                gather_rows(v[3], std::span(&r0, 1)), gather_rows(v[3], std::span(&r1, 1))};
            return attend_batch<double>(v[0], v[1], v[2], sup, rows, BiasMode::kSaliency);
          },
          tol);
}

inline void model_checks(SuiteBuilder& b) {
  const RunConfig c = toy_config();
  const std::size_t L = c.arch().L();
  auto p = std::make_shared<ModelParams<double>>(toy_params(c, 11, b.rng()));
  auto x = std::make_shared<Tensor<double>>(
      random_tensor<double>(Shape{2 * L, c.arch().patch_dim()}, b.rng(), 0.0, 1.0));
  auto h = std::make_shared<Tensor<double>>(random_tensor<double>(Shape{2 * L, c.d}, b.rng()));
  const double tol = kModelTol;

  b.check_params("embed_patches", *p,
                 [p, x](Graph<double>& g) { return embed_patches(g.constant(*x), *p); }, tol);
  b.check_params("backbone_forward_dense", *p,
                 [p, h](Graph<double>& g) {
                   std::vector<AttentionPlan<double>> plans(2);
                   return backbone_forward<double>(g.constant(*h), *p, plans);
                 },
                 tol);
  b.check_params("backbone_forward_sparse", *p,
                 [p, h](Graph<double>& g) {
                   static const std::vector<std::size_t> s0{0, 2}, s1{1, 3};
                   std::vector<AttentionPlan<double>> plans(2);
                   plans[0].support = s0;
                   plans[1].support = s1;
                   return backbone_forward<double>(g.constant(*h), *p, plans);
                 },
                 tol);
  b.check_params("saliency_forward", *p,
                 [p, h](Graph<double>& g) { return saliency_forward(g.constant(*h), *p); }, tol);
  b.check_params("projection_forward", *p,
                 [p, h](Graph<double>& g) { return projection_forward(g.constant(*h), *p); }, tol);
  b.check_params("classifier_forward", *p,
                 [p, h](Graph<double>& g) { return classifier_forward(g.constant(*h), *p); }, tol);
  b.check_params("recon_forward", *p,
                 [p, h](Graph<double>& g) {
                   static const std::vector<std::size_t> S{1, 2, 6};
                   return recon_forward(g.constant(*h), S, *p);
                 },
                 tol);
}

inline void loss_checks(SuiteBuilder& b) {
  using V = std::vector<Var<double>>;
  using G = Graph<double>;
  const double tol = kModelTol;
  b.check("info_nce", {&b.tensor({3, 4}), &b.tensor({3, 4})},
          [](G&, V& v) { return info_nce(l2_normalize_rows(v[0]), l2_normalize_rows(v[1]), 0.5); },
          tol);
  // s_hat rows are softmaxes of free logits so they stay on the simplex.
  b.check("sparsity_loss",
          {&b.tensor({2, 4}), &b.tensor({4, 3}, 0.0, 1.0), &b.tensor({4, 3})},
          [](G&, V& v) {
            return sparsity_loss(row_softmax(v[0]), 0.25, 0.5, v[1], v[2], 0.05).value;
          },
          tol);
  b.check("total_loss", {&b.tensor({1}), &b.tensor({1})},
          [](G&, V& v) { return total_loss(v[0], v[1], 0.7); }, tol);

  // End to end: L_total over two images (four views) with every parameter
  // trainable, sparse attention with the saliency bias.
  const RunConfig c = toy_config();
  const std::size_t L = c.arch().L();
  auto p = std::make_shared<ModelParams<double>>(toy_params(c, 23, b.rng()));
  auto views = std::make_shared<Tensor<double>>(
      random_tensor<double>(Shape{4 * L, c.arch().patch_dim()}, b.rng(), 0.0, 1.0));
  for (BiasMode bias : {BiasMode::kSaliency, BiasMode::kNone}) {
    RunConfig cb = c;
    cb.bias_mode = bias;
    b.check_params(std::string("end_to_end_total_loss_bias_") + std::string(to_string(bias)), *p,
                   [p, views, cb](Graph<double>& g) {
                     return pretrain_objective<double>(g, *p, *views, 2, cb).total;
                   },
                   tol, false);
  }
}

}  // namespace detail

inline SuiteResult run_gradcheck_suite(SuiteModule m, std::uint64_t seed = 7) {
  SuiteResult r;
  detail::SuiteBuilder b(r, seed);
  if (m == SuiteModule::kAll || m == SuiteModule::kDiffcore) {
    detail::primitive_checks(b);
    detail::attention_checks(b);
  }
  if (m == SuiteModule::kAll || m == SuiteModule::kModel) detail::model_checks(b);
  if (m == SuiteModule::kAll || m == SuiteModule::kLosses) detail::loss_checks(b);
  return r;
}

}  // namespace sc

#endif  // SC_GRADCHECK_SUITE_HPP_
