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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "sc/config.hpp"
#include "sc/gradcheck_suite.hpp"
#include "sc/model/networks.hpp"
#include "sc/model/params.hpp"
#include "sc/model/patches.hpp"

namespace sc {
namespace {

using DT = Tensor<double>;

Image random_image(std::size_t H, std::size_t W, std::size_t C, std::uint64_t seed) {
  Image img(H, W, C);
  Rng rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (float& v : img.pixels) v = u(rng);
  return img;
}

RunConfig small_config() {
  RunConfig c = toy_config();
  c.saliency_hidden = {8, 6};
  return c;
}

void zero(Tensor<double>& t) {
  for (double& v : t.data()) v = 0.0;
}

// ------------------------------------------------------------- patches

TEST(Patches, DefaultGeometry) {
  const auto g = partition_patches<float>(Image(64, 64, 1, 0.5f), 8);
  EXPECT_EQ(g.L(), 64u);
  EXPECT_EQ(g.patch_dim(), 64u);
  EXPECT_EQ(g.patches.shape(), (Shape{64, 64}));
}

TEST(Patches, ConstantImageGivesConstantPatches) {
  const auto g = partition_patches<float>(Image(16, 24, 2, 0.375f), 8);
  for (float v : g.patches.data()) EXPECT_EQ(v, 0.375f);
}

TEST(Patches, RoundTripIsBitExact) {
  for (std::size_t C : {1u, 3u}) {
    const Image img = random_image(32, 48, C, 17 + C);
    EXPECT_EQ(reassemble(partition_patches<float>(img, 8)), img);
  }
}

TEST(Patches, RowMajorOrderTopLeftFirst) {
  Image img(16, 16, 1);
  img.at(0, 8) = 1.0f;   // top-right patch, its first pixel
  img.at(15, 0) = 2.0f;  // bottom-left patch, its last row
  const auto g = partition_patches<float>(img, 8);
  EXPECT_EQ(g.patches(1, 0), 1.0f);
  EXPECT_EQ(g.patches(2, 7 * 8), 2.0f);
}

TEST(Patches, IndivisibleSizeIsAnError) {
  EXPECT_THROW(partition_patches<float>(Image(60, 64, 1), 8), ShapeError);
  EXPECT_THROW(partition_patches<float>(Image(64, 64, 1), 0), ShapeError);
}

// -------------------------------------------------------------- params

TEST(Params, DefaultsAndValidation) {
  const RunConfig c;
  EXPECT_EQ(c.arch().saliency_hidden, (std::vector<std::size_t>{512, 256}));
  auto p = init_params<float>(c.arch(), 0);
  EXPECT_NO_THROW(p.validate());
  EXPECT_EQ(p.at("saliency.l0.weight").shape(), (Shape{64, 512}));
  EXPECT_EQ(p.at("saliency.l2.weight").shape(), (Shape{256, 1}));
  p.tensors.erase("cls.bias");
  EXPECT_THROW(p.validate(), ShapeError);
}

TEST(Params, InitIsXavierUniformAndDeterministic) {
  const RunConfig c;
  auto a = init_params<double>(c.arch(), 5);
  auto b = init_params<double>(c.arch(), 5);
  for (const auto& [name, t] : a.tensors) EXPECT_EQ(t, b.at(name)) << name;
  const auto& w = a.at("backbone.0.mlp.w1");
  const double bound = std::sqrt(6.0 / (64 + 128));
  for (double v : w.data()) EXPECT_LE(std::abs(v), bound);
  for (double v : a.at("backbone.0.mlp.b1").data()) EXPECT_EQ(v, 0.0);
  for (double v : a.at("backbone.0.ln1.gamma").data()) EXPECT_EQ(v, 1.0);
}

TEST(Params, RawSaliencyInputWidensFirstLayer) {
  RunConfig c;
  c.saliency_input = SaliencyInput::kRaw;
  c.P = 4;
  EXPECT_EQ(expected_shapes(c.arch()).at("saliency.l0.weight"), (Shape{16, 512}));
}

// --------------------------------------------------------------- embed

TEST(Embed, ZeroWeightsGiveZeroEmbeddings) {
  const RunConfig c = small_config();
  auto p = init_params<double>(c.arch(), 1);
  zero(p.at("embed.weight"));
  zero(p.at("embed.pos"));
  Rng rng(2);
  Graph<double> g;
  auto e = embed_patches(g.constant(random_tensor<double>(Shape{4, 16}, rng)), p);
  for (double v : e.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Embed, IdenticalPatchesDifferOnlyByPosition) {
  const RunConfig c = small_config();
  auto p = init_params<double>(c.arch(), 1);
  auto& pos = p.at("embed.pos");
  Rng rng(3);
  fill_uniform(pos, rng, -1.0, 1.0);
  // Tie rows 0 and 2.
  for (std::size_t j = 0; j < c.d; ++j) pos(2, j) = pos(0, j);
  DT x(Shape{4, 16});
  const DT patch = random_tensor<double>(Shape{1, 16}, rng);
  for (std::size_t i = 0; i < 4; ++i) std::copy_n(patch.data().begin(), 16, &x(i, 0));
  Graph<double> g;
  const DT e = embed_patches(g.constant(x), p).value();
  auto row_eq = [&](std::size_t a, std::size_t b) {
    for (std::size_t j = 0; j < c.d; ++j) {
      if (e(a, j) != e(b, j)) return false;
    }
    return true;
  };
  EXPECT_TRUE(row_eq(0, 2));
  EXPECT_FALSE(row_eq(0, 1));
  EXPECT_FALSE(row_eq(1, 3));
}

TEST(Embed, RejectsWrongPatchWidth) {
  const RunConfig c = small_config();
  auto p = init_params<double>(c.arch(), 1);
  Graph<double> g;
  EXPECT_THROW(embed_patches(g.constant(DT(Shape{4, 15})), p), ShapeError);
  EXPECT_THROW(embed_patches(g.constant(DT(Shape{3, 16})), p), ShapeError);
}

// ------------------------------------------------------------ backbone

TEST(Backbone, ZeroBlocksIsIdentity) {
  RunConfig c = small_config();
  c.n_blocks = 0;
  auto p = init_params<double>(c.arch(), 1);
  Rng rng(4);
  const DT x = random_tensor<double>(Shape{4, c.d}, rng);
  Graph<double> g;
  EXPECT_EQ(backbone_forward<double>(g.constant(x), p).value(), x);
}

TEST(Backbone, PermutationEquivariant) {
  RunConfig c = small_config();
  c.n_blocks = 2;
  Rng rng(5);
  auto p = detail::toy_params(c, 9, rng);
  const DT x = random_tensor<double>(Shape{4, c.d}, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  DT xp(x.shape());
  for (std::size_t i = 0; i < 4; ++i) std::copy_n(&x(perm[i], 0), c.d, &xp(i, 0));
  Graph<double> g;
  const DT y = backbone_forward<double>(g.constant(x), p).value();
  const DT yp = backbone_forward<double>(g.constant(xp), p).value();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < c.d; ++j) EXPECT_NEAR(yp(i, j), y(perm[i], j), 1e-13);
  }
}

TEST(Backbone, StackedImagesDoNotInteract) {
  const RunConfig c = small_config();
  Rng rng(6);
  auto p = detail::toy_params(c, 9, rng);
  const DT a = random_tensor<double>(Shape{4, c.d}, rng);
  const DT b = random_tensor<double>(Shape{4, c.d}, rng);
  DT ab(Shape{8, c.d});
  std::copy(a.data().begin(), a.data().end(), ab.data().begin());
  std::copy(b.data().begin(), b.data().end(), ab.data().begin() + 4 * c.d);
  static const std::vector<std::size_t> S{1, 3};
  Graph<double> g;
  std::vector<AttentionPlan<double>> plans(2);
  plans[1].support = S;
  const DT y = backbone_forward<double>(g.constant(ab), p, plans).value();
  AttentionPlan<double> sparse;
  sparse.support = S;
  const DT ya = backbone_forward<double>(g.constant(a), p).value();
  const DT yb = backbone_forward<double>(g.constant(b), p, sparse).value();
  for (std::size_t k = 0; k < 4 * c.d; ++k) {
    EXPECT_NEAR(y[k], ya[k], 1e-13);
    EXPECT_NEAR(y[4 * c.d + k], yb[k], 1e-13);
  }
}

TEST(Backbone, ObserverPathMatchesFusedPath) {
  const RunConfig c = small_config();
  Rng rng(7);
  auto p = detail::toy_params(c, 10, rng);
  const DT x = random_tensor<double>(Shape{8, c.d}, rng);
  const DT sh = random_tensor<double>(Shape{2, 4}, rng, 0.1, 1.0);
  static const std::vector<std::size_t> S0{0, 3}, S1{1, 2};
  auto run = [&](bool observe, std::vector<double>* grads) {
    p.zero_grad();
    Graph<double> g;
    Var<double> s = g.constant(sh);
    std::vector<AttentionPlan<double>> plans(2);
    plans[0].support = S0;
    plans[1].support = S1;
    const std::size_t r0 = 0, r1 = 1;
    plans[0].s_hat_row = gather_rows(s, std::span(&r0, 1));
    plans[1].s_hat_row = gather_rows(s, std::span(&r1, 1));
    plans[0].bias = plans[1].bias = BiasMode::kSaliency;
    std::size_t calls = 0;
    AttentionObserver<double> obs;
    if (observe) {
      obs = [&](std::size_t, std::size_t, const DT&, const DT&, const DT&) { ++calls; };
    }
    Var<double> y = backbone_forward<double>(g.constant(x), p, plans, obs);
    g.backward(detail::weighted_sum(y, 3));
    if (observe) {
      EXPECT_EQ(calls, 2 * c.n_blocks);
    }
    grads->assign(p.at("backbone.0.attn.wq").grad().begin(), p.at("backbone.0.attn.wq").grad().end());
    return y.value();
  };
  std::vector<double> g1, g2;
  const DT y1 = run(false, &g1);
  const DT y2 = run(true, &g2);
  for (std::size_t k = 0; k < y1.size(); ++k) EXPECT_NEAR(y1[k], y2[k], 1e-13);
  for (std::size_t k = 0; k < g1.size(); ++k) EXPECT_NEAR(g1[k], g2[k], 1e-12);
}

TEST(Backbone, MixedBiasModesRejected) {
  const RunConfig c = small_config();
  auto p = init_params<double>(c.arch(), 1);
  Graph<double> g;
  std::vector<AttentionPlan<double>> plans(2);
  plans[1].bias = BiasMode::kSaliency;
  plans[1].s_hat_row = g.constant(DT(Shape{1, 4}, 0.25));
  EXPECT_THROW(backbone_forward<double>(g.constant(DT(Shape{8, c.d}, 0.1)), p, plans), DomainError);
}

// ------------------------------------------------------------ saliency

TEST(Saliency, ZeroLastLayerGivesUniformScores) {
  const RunConfig c = small_config();
  Rng rng(8);
  auto p = detail::toy_params(c, 2, rng);
  zero(p.at("saliency.l2.weight"));
  zero(p.at("saliency.l2.bias"));
  Graph<double> g;
  auto s = saliency_forward(g.constant(random_tensor<double>(Shape{4, c.d}, rng)), p);
  EXPECT_EQ(s.shape(), (Shape{1, 4}));
  for (double v : s.value().data()) EXPECT_EQ(v, 0.0);
  for (double v : row_softmax(s).value().data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Saliency, DuplicateRowsScoreIdentically) {
  const RunConfig c = small_config();
  Rng rng(9);
  auto p = detail::toy_params(c, 2, rng);
  DT x = random_tensor<double>(Shape{4, c.d}, rng);
  std::copy_n(&x(1, 0), c.d, &x(3, 0));
  Graph<double> g;
  const DT s = saliency_forward(g.constant(x), p).value();
  EXPECT_EQ(s[1], s[3]);
  EXPECT_NE(s[0], s[1]);
}

TEST(Saliency, RejectsWrongWidth) {
  const RunConfig c = small_config();
  auto p = init_params<double>(c.arch(), 1);
  Graph<double> g;
  EXPECT_THROW(saliency_forward(g.constant(DT(Shape{4, c.d + 1})), p), ShapeError);
}

// ---------------------------------------------------------------- heads

TEST(Projection, UnitNorm) {
  const RunConfig c = small_config();
  Rng rng(10);
  auto p = detail::toy_params(c, 4, rng);
  Graph<double> g;
  const DT z = projection_forward(g.constant(random_tensor<double>(Shape{12, c.d}, rng)), p).value();
  ASSERT_EQ(z.shape(), (Shape{3, c.d_z}));
  for (std::size_t i = 0; i < 3; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c.d_z; ++j) ss += z(i, j) * z(i, j);
    EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-6);
  }
}

TEST(Projection, BiasFreeHeadIsScaleInvariant) {
  const RunConfig c = small_config();
  Rng rng(11);
  auto p = detail::toy_params(c, 4, rng);
  zero(p.at("proj.l0.bias"));
  zero(p.at("proj.l1.bias"));
  DT F = random_tensor<double>(Shape{4, c.d}, rng);
  DT F2 = F;
  for (double& v : F2.data()) v *= 2.0;
  Graph<double> g;
  const DT z1 = projection_forward(g.constant(F), p).value();
  const DT z2 = projection_forward(g.constant(F2), p).value();
  for (std::size_t k = 0; k < z1.size(); ++k) EXPECT_NEAR(z1[k], z2[k], 1e-14);
}

TEST(Projection, ZeroNormIsDomainError) {
  const RunConfig c = small_config();
  auto p = init_params<double>(c.arch(), 1);
  Graph<double> g;
  EXPECT_THROW(projection_forward(g.constant(DT(Shape{4, c.d})), p), DomainError);
}

TEST(Classifier, ZeroWeightsGiveUniform) {
  const RunConfig c = small_config();
  auto p = init_params<double>(c.arch(), 1);
  zero(p.at("cls.weight"));
  Rng rng(12);
  Graph<double> g;
  const DT y = classifier_forward(g.constant(random_tensor<double>(Shape{8, c.d}, rng)), p).value();
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Classifier, ClosedFormLogits) {
  const RunConfig c = small_config();
  auto p = init_params<double>(c.arch(), 1);
  zero(p.at("cls.weight"));
  p.at("cls.bias")[0] = std::log(3.0);
  p.at("cls.bias")[1] = 0.0;
  Rng rng(13);
  Graph<double> g;
  const DT y = classifier_forward(g.constant(random_tensor<double>(Shape{4, c.d}, rng)), p).value();
  EXPECT_NEAR(y[0], 0.75, 1e-15);
  EXPECT_NEAR(y[1], 0.25, 1e-15);
}

TEST(Recon, ZeroDecoderReproducesPatchNorms) {
  const RunConfig c = small_config();
  auto p = init_params<double>(c.arch(), 1);
  zero(p.at("recon.weight"));
  Rng rng(14);
  Graph<double> g;
  const std::vector<std::size_t> S{0, 2};
  Var<double> patches = g.constant(random_tensor<double>(Shape{4, 16}, rng));
  Var<double> F = g.constant(random_tensor<double>(Shape{4, c.d}, rng));
  Var<double> rec = recon_forward(F, S, p);
  EXPECT_EQ(rec.shape(), (Shape{2, 16}));
  Var<double> target = gather_rows(patches, S);
  const double term = sum(sq_diff(target, rec)).value().item() / 2.0;
  double want = 0.0;
  for (double v : target.value().data()) want += v * v;
  EXPECT_NEAR(term, want / 2.0, 1e-12);
}

TEST(Recon, MemorisedConstantPatchIsExact) {
  const RunConfig c = small_config();
  auto p = init_params<double>(c.arch(), 1);
  zero(p.at("recon.weight"));
  for (double& v : p.at("recon.bias").data()) v = 0.6;
  Graph<double> g;
  const std::vector<std::size_t> S{1};
  Var<double> rec = recon_forward(g.constant(DT(Shape{4, c.d}, 0.3)), S, p);
  Var<double> target = g.constant(DT(Shape{1, 16}, 0.6));
  EXPECT_EQ(sum(sq_diff(target, rec)).value().item(), 0.0);
}

TEST(Recon, IndexOutsideRangeIsAnError) {
  const RunConfig c = small_config();
  auto p = init_params<double>(c.arch(), 1);
  Graph<double> g;
  const std::vector<std::size_t> S{4};
  EXPECT_THROW(recon_forward(g.constant(DT(Shape{4, c.d}, 0.3)), S, p), ShapeError);
}

// ------------------------------------------------------------ gradients

TEST(ModelGradients, EveryForwardPassesFiniteDifferences) {
  const SuiteResult r = run_gradcheck_suite(SuiteModule::kModel);
  ASSERT_GE(r.reports.size(), 7u);
  for (const auto& rep : r.reports) {
    EXPECT_TRUE(rep.passed()) << rep.label << " max rel err " << rep.max_rel_error();
  }
}

TEST(ModelGradients, FrozenSaliencyGetsNoGradient) {
  const RunConfig c = small_config();
  Rng rng(15);
  auto p = detail::toy_params(c, 6, rng);
  p.set_trainable([](const std::string& n) { return !is_saliency_param(n); });
  p.zero_grad();
  const DT views = random_tensor<double>(Shape{4 * 4, 16}, rng, 0.0, 1.0);
  Graph<double> g;
  g.backward(pretrain_objective<double>(g, p, views, 2, c).total);
  double backbone_mass = 0.0;
  for (auto& [name, t] : p.tensors) {
    if (is_saliency_param(name)) {
      for (double v : t.grad()) EXPECT_EQ(v, 0.0) << name;
    } else if (name.starts_with("backbone.")) {
      for (double v : t.grad()) backbone_mass += std::abs(v);
    }
  }
  EXPECT_GT(backbone_mass, 0.0);
}

}  // namespace
}  // namespace sc
