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

// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// fails. Criteria can be selected by number on the command line.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sc/bench.hpp"
#include "sc/gradcheck_suite.hpp"
#include "sc/persist.hpp"
#include "sc/synthdata.hpp"
#include "sc/training.hpp"

namespace {

using namespace sc;

// ------------------------------------------------------------ tolerances

constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 120.0;
constexpr double kEquivTol = 1e-12;
constexpr std::size_t kEquivInstances = 100;
constexpr double kRowSumTol = 1e-6;
constexpr std::size_t kInvariantInstances = 1000;
constexpr double kTimeRatioMax = 0.7;
constexpr std::size_t kTimingTrials = 31;
constexpr double kRecallMin = 0.9;
constexpr double kLocalizationSecondsTarget = 600.0;
constexpr double kAccuracyMin = 0.95;
constexpr double kAucMin = 0.97;
constexpr double kBaselineAccuracyGap = 0.03;
constexpr double kAttentionCostRatioMin = 2.0;
constexpr std::size_t kSweepSteps = 600;

constexpr std::uint64_t kTrainDataSeed = 1;
constexpr std::uint64_t kHeldoutDataSeed = 999;
constexpr std::size_t kHeldoutImages = 256;

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

// ----------------------------------------------------- shared experiment

const Dataset& train_set() {
  static const Dataset ds = [] {
    SynthSpec s;
    s.seed = kTrainDataSeed;
    return make_dataset(s);
  }();
  return ds;
}

const Dataset& heldout_set() {
  static const Dataset ds = [] {
    SynthSpec s;
    s.seed = kHeldoutDataSeed;
    s.n_images = kHeldoutImages;
    return make_dataset(s);
  }();
  return ds;
}

std::vector<std::size_t> all_ids(const Dataset& ds) { return all_indices(ds); }

std::vector<std::size_t> positive_ids(const Dataset& ds) {
  std::vector<std::size_t> v;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.samples[i].label == 1) v.push_back(i);
  }
  return v;
}

RunConfig default_config(std::uint64_t seed) {
  RunConfig c;
  c.seed = seed;
  return c;
}

struct Pretrained {
  ModelParams<float> params;
  double cpu_s = 0.0;
};

// Pretrained models keyed by (attention mode, rho, steps, seed).
Pretrained& pretrained(AttentionMode mode, double rho, std::size_t steps, std::uint64_t seed) {
  static std::map<std::tuple<int, double, std::size_t, std::uint64_t>, Pretrained> memo;
  const auto key = std::make_tuple(static_cast<int>(mode), rho, steps, seed);
  auto it = memo.find(key);
  if (it != memo.end()) return it->second;
  RunConfig c = default_config(seed);
  c.attention = mode;
  c.rho = rho;
  c.steps = steps;
  const double t0 = cpu_seconds();
  auto r = pretrain<float>(train_set(), c);
  Pretrained p{std::move(r.params), cpu_seconds() - t0};
  std::cout << "  pretrained " << to_string(mode) << " rho=" << rho << " steps=" << steps
            << " seed=" << seed << " in " << fmt(p.cpu_s, 3) << " s CPU" << std::endl;
  return memo.emplace(key, std::move(p)).first->second;
}

struct Downstream {
  EvalMetrics heldout;
  std::uint64_t attention_flops = 0;  // fine-tune plus evaluation forwards
};

// Fine-tunes on the first 64 training images with frozen saliency and the
// pretraining cache, then scores the separately generated held-out set.
Downstream downstream(AttentionMode mode, double rho, std::size_t steps, std::uint64_t seed) {
  RunConfig c = default_config(seed);
  c.attention = mode;
  c.rho = rho;
  c.reuse_cache = true;
  ModelParams<float> p = pretrained(mode, rho, steps, seed).params;
  const OpCounts saved = op_counts();
  op_counts().reset();
  AttnCache train_cache, held_cache;
  const AttnCache* tc = nullptr;
  const AttnCache* hc = nullptr;
  if (mode == AttentionMode::kSparse) {
    train_cache = snapshot_cache<float>(train_set(), p, c);
    held_cache = snapshot_cache<float>(heldout_set(), p, c);
    tc = &train_cache;
    hc = &held_cache;
  }
  const std::uint64_t before = op_counts().attention_flops();
  auto ft = finetune<float>(train_set(), std::move(p), c, tc);
  const auto ids = all_ids(heldout_set());
  Downstream d;
  d.heldout = evaluate<float>(heldout_set(), ids, ft.params, c, hc);
  d.attention_flops = op_counts().attention_flops() - before;
  op_counts() = saved;
  return d;
}

// --------------------------------------------------------------- criteria

Outcome gradient_correctness() {
  const double t0 = cpu_seconds();
  const SuiteResult r = run_gradcheck_suite(SuiteModule::kAll);
  const double secs = cpu_seconds() - t0;
  std::size_t failed = 0;
  for (const auto& rep : r.reports) failed += rep.passed() ? 0 : 1;
  const bool ok = r.passed() && r.max_rel_error() < kGradTol && secs < kGradSeconds;
  return {ok, std::to_string(r.reports.size()) + " checks, " + std::to_string(failed) +
                  " failed, max rel err " + fmt(r.max_rel_error()) + " (tol " + fmt(kGradTol) +
                  "), " + fmt(secs, 3) + " s (limit " + fmt(kGradSeconds) + ")"};
}

// Textbook softmax(Q K^T / sqrt(d)) V, written without the library kernels.
std::vector<double> naive_dense(const Tensor<double>& Q, const Tensor<double>& K,
                                const Tensor<double>& V) {
  const std::size_t L = Q.rows(), d = Q.cols();
  std::vector<double> F(L * V.cols(), 0.0), w(L);
  for (std::size_t i = 0; i < L; ++i) {
    double mx = -1e300, z = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += Q(i, k) * K(j, k);
      w[j] = s / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, w[j]);
    }
    for (std::size_t j = 0; j < L; ++j) z += (w[j] = std::exp(w[j] - mx));
    for (std::size_t j = 0; j < L; ++j) {
      for (std::size_t k = 0; k < V.cols(); ++k) F[i * V.cols() + k] += w[j] / z * V(j, k);
    }
  }
  return F;
}

Outcome sparse_dense_equivalence() {
  Rng rng(derive_seed(2, {0xe0u}));
  std::uniform_int_distribution<std::size_t> Ld(2, 64), dd(1, 32);
  double worst = 0.0, worst_ref = 0.0;
  for (std::size_t t = 0; t < kEquivInstances; ++t) {
    const std::size_t L = Ld(rng), d = dd(rng);
    auto Q = random_tensor<double>(Shape{L, d}, rng);
    auto K = random_tensor<double>(Shape{L, d}, rng);
    auto V = random_tensor<double>(Shape{L, d}, rng);
    auto s = random_tensor<double>(Shape{L}, rng);
    const auto s_hat = normalize_scores<double>(s.data());
    const auto S = select_topk<double>(s_hat, 1.0).indices;
    const auto sp = sparse_attention<double>(Q, K, V, S, {}, BiasMode::kNone);
    const auto de = dense_attention(Q, K, V);
    const auto ref = naive_dense(Q, K, V);
    for (std::size_t i = 0; i < sp.F.size(); ++i) {
      worst = std::max(worst, std::abs(sp.F[i] - de.F[i]));
      worst_ref = std::max(worst_ref, std::abs(sp.F[i] - ref[i]));
    }
  }
  return {worst <= kEquivTol && worst_ref <= kEquivTol,
          std::to_string(kEquivInstances) + " instances, max |F_sparse - F_dense| " + fmt(worst) +
              ", vs independent reference " + fmt(worst_ref) + " (tol " + fmt(kEquivTol) + ")"};
}

Outcome attention_invariants() {
  Rng rng(derive_seed(3, {0x1a7u}));
  std::uniform_int_distribution<std::size_t> Ld(1, 96), dd(1, 16);
  std::uniform_real_distribution<double> rd(0.01, 1.0);
  double worst_sum = 0.0;
  std::size_t off_support_nonzero = 0;
  for (std::size_t t = 0; t < kInvariantInstances; ++t) {
    const std::size_t L = Ld(rng), d = dd(rng);
    const double rho = rd(rng);
    const BiasMode bias = t % 2 ? BiasMode::kSaliency : BiasMode::kNone;
    auto Q = random_tensor<double>(Shape{L, d}, rng, -3.0, 3.0);
    auto K = random_tensor<double>(Shape{L, d}, rng, -3.0, 3.0);
    auto V = random_tensor<double>(Shape{L, d}, rng);
    auto s = random_tensor<double>(Shape{L}, rng, -4.0, 4.0);
    const auto s_hat = normalize_scores<double>(s.data());
    const auto S = select_topk<double>(s_hat, rho).indices;
    const auto r = sparse_attention<double>(Q, K, V, S, s_hat, bias, true);
    const Tensor<double>& A = *r.A.full;
    std::vector<char> in_s(L, 0);
    for (std::size_t j : S) in_s[j] = 1;
    for (std::size_t i = 0; i < L; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        sum += A(i, j);
        if (!in_s[j] && A(i, j) != 0.0) ++off_support_nonzero;
      }
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    }
  }
  return {worst_sum <= kRowSumTol && off_support_nonzero == 0,
          std::to_string(kInvariantInstances) + " instances, max |row sum - 1| " + fmt(worst_sum) +
              " (tol " + fmt(kRowSumTol) + "), off-support nonzeros " +
              std::to_string(off_support_nonzero)};
}

Outcome complexity_ratio() {
  std::size_t cases = 0, exact = 0;
  std::ostringstream worst;
  for (std::size_t L : {16u, 64u, 256u}) {
    const OpCounts dense = instrumented_attention(L, L, 32, L);
    for (double rho : {0.1, 0.3, 0.5, 1.0}) {
      const std::size_t K = topk_count(rho, L);
      const OpCounts sparse = instrumented_attention(L, K, 32, L + K);
      // sparse/dense == K/L, cross-multiplied to stay in integers.
      const bool ok = sparse.attention_flops() * L == dense.attention_flops() * K &&
                      count_check(sparse, attention_cost(L, K, 32)).passed();
      ++cases;
      exact += ok ? 1 : 0;
      if (!ok) worst << " mismatch at L=" << L << " K=" << K;
    }
  }
  return {exact == cases, std::to_string(exact) + "/" + std::to_string(cases) +
                              " (L, rho) points with measured ratio exactly K/L" + worst.str()};
}

Outcome efficiency_trend() {
  const std::size_t L = 1024, d = 64, K = topk_count(0.3, L);
  const AttentionTiming t = time_attention(L, K, d, kTimingTrials, 5);
  std::vector<double> med;
  const std::vector<std::size_t> ks{64, 256, 512, 1024};
  for (std::size_t k : ks) med.push_back(time_attention(L, k, d, 11, 6).sparse.median_ms);
  const bool monotone = std::is_sorted(med.begin(), med.end());
  std::ostringstream os;
  os << "L=1024 K=" << K << " median sparse " << fmt(t.sparse.median_ms) << " ms, dense "
     << fmt(t.dense.median_ms) << " ms, ratio " << fmt(t.ratio(), 3) << " (max " << kTimeRatioMax
     << ", " << kTimingTrials << " trials); sparse ms over K={64,256,512,1024}:";
  for (double m : med) os << " " << fmt(m, 3);
  os << (monotone ? " monotone" : " NOT monotone");
  return {t.ratio() <= kTimeRatioMax && monotone, os.str()};
}

Outcome localization() {
  const auto pos = positive_ids(heldout_set());
  std::vector<double> recalls;
  double cpu = 0.0;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    Pretrained& p = pretrained(AttentionMode::kSparse, 0.3, 2000, seed);
    cpu += p.cpu_s;
    const RunConfig c = default_config(seed);
    const AttnCache cache = snapshot_cache<float>(heldout_set(), pos, p.params, c);
    recalls.push_back(localization_recall(heldout_set(), cache));
  }
  const double mean = std::accumulate(recalls.begin(), recalls.end(), 0.0) / 3.0;
  std::ostringstream os;
  os << pos.size() << " held-out anomalous images, recall per seed";
  for (double r : recalls) os << " " << fmt(r);
  os << ", mean " << fmt(mean) << " (min " << kRecallMin << "); pretraining " << fmt(cpu, 4)
     << " s CPU for 3 seeds (target " << kLocalizationSecondsTarget << " s"
     << (cpu <= kLocalizationSecondsTarget ? ", met)" : ", exceeded)");
  return {mean >= kRecallMin, os.str()};
}

Outcome downstream_utility() {
  const Downstream s = downstream(AttentionMode::kSparse, 0.3, 2000, 0);
  const Downstream d = downstream(AttentionMode::kDense, 0.3, 2000, 0);
  const double cost = static_cast<double>(d.attention_flops) / static_cast<double>(s.attention_flops);
  const double gap = std::abs(s.heldout.accuracy - d.heldout.accuracy);
  const bool ok = s.heldout.accuracy >= kAccuracyMin && s.heldout.auc >= kAucMin &&
                  gap <= kBaselineAccuracyGap && cost >= kAttentionCostRatioMin;
  std::ostringstream os;
  os << "sparse acc " << fmt(s.heldout.accuracy) << " auc " << fmt(s.heldout.auc) << " (min "
     << kAccuracyMin << ", " << kAucMin << "); dense acc " << fmt(d.heldout.accuracy) << " auc "
     << fmt(d.heldout.auc) << ", gap " << fmt(gap) << " (max " << kBaselineAccuracyGap
     << "); dense/sparse attention multiply-adds " << fmt(cost, 3) << " (min "
     << kAttentionCostRatioMin << "), n=" << s.heldout.n;
  return {ok, os.str()};
}

Outcome rho_sweep() {
  std::ostringstream table;
  table << "\n      rho    K  accuracy     auc  attn_madds";
  std::map<double, double> acc;
  for (double rho : {0.1, 0.3, 0.5, 1.0}) {
    const Downstream r = downstream(AttentionMode::kSparse, rho, kSweepSteps, 0);
    acc[rho] = r.heldout.accuracy;
    char line[160];
    std::snprintf(line, sizeof line, "\n     %4.2f  %3zu  %8.4f  %6.4f  %10llu", rho,
                  topk_count(rho, 64), r.heldout.accuracy, r.heldout.auc,
                  static_cast<unsigned long long>(r.attention_flops));
    table << line;
  }
  const bool ok = acc[0.3] >= acc[0.1];
  return {ok, "rho=0.3 accuracy " + fmt(acc[0.3]) + " vs rho=0.1 " + fmt(acc[0.1]) + " after " +
                  std::to_string(kSweepSteps) + " pretraining steps each" + table.str()};
}

template <class F>
bool throws_format(F&& f) {
  try {
    f();
  } catch (const FormatError&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

Outcome determinism_and_persistence() {
  namespace fs = std::filesystem;
  SynthSpec spec;
  spec.n_images = 64;
  spec.seed = 17;
  const Dataset ds = make_dataset(spec);
  RunConfig c = default_config(11);
  c.steps = 20;
  auto a = pretrain<float>(ds, c);
  auto b = pretrain<float>(ds, c);
  auto to_ck = [&](PretrainResult<float>& r) {
    Checkpoint ck{c, r.params, OptimizerState<float>{}};
    ck.optimizer->config = r.opt.config;
    ck.optimizer->updates = r.opt.updates;
    ck.optimizer->slots = r.opt.slots;
    return ck;
  };
  const Checkpoint cka = to_ck(a), ckb = to_ck(b);
  const fs::path dir = fs::temp_directory_path() / ("sc_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  save_checkpoint(cka, dir / "a.ckpt");
  save_checkpoint(ckb, dir / "b.ckpt");
  const bool same_ckpt = io::read_file(dir / "a.ckpt") == io::read_file(dir / "b.ckpt");

  const AttnCache cache = snapshot_cache<float>(ds, a.params, c);
  save_cache(cache, dir / "c.cache");
  save_dataset(ds, dir / "d.scds");
  const Checkpoint ck_back = load_checkpoint(dir / "a.ckpt");
  bool params_exact = true;
  for (const auto& [name, t] : cka.params.tensors) params_exact &= ck_back.params.at(name) == t;
  const bool ck_rt = encode_checkpoint(ck_back) == io::read_file(dir / "a.ckpt") && params_exact;
  const bool cache_rt = load_cache(dir / "c.cache") == cache &&
                        encode_cache(load_cache(dir / "c.cache")) == io::read_file(dir / "c.cache");
  const Dataset ds_back = load_dataset(dir / "d.scds");
  bool ds_rt = encode_dataset(ds_back) == io::read_file(dir / "d.scds");
  for (std::size_t i = 0; i < ds.size(); ++i) ds_rt &= ds_back.samples[i].image == ds.samples[i].image;

  // Truncation, bad magic and a future version for each format.
  std::size_t structured = 0, corruptions = 0;
  const std::vector<std::pair<std::vector<std::uint8_t>, std::function<void(const std::vector<std::uint8_t>&)>>> files{
      {io::read_file(dir / "a.ckpt"), [](const auto& v) { decode_checkpoint(v); }},
      {io::read_file(dir / "c.cache"), [](const auto& v) { decode_cache(v); }},
      {io::read_file(dir / "d.scds"), [](const auto& v) { decode_dataset(v); }},
  };
  for (const auto& [good, decode] : files) {
    auto truncated = good;
    truncated.resize(good.size() - 3);
    auto magic = good;
    magic[1] ^= 0x20;
    auto future = good;
    future[4] = 0x7f;
    for (const auto* bad : {&truncated, &magic, &future}) {
      ++corruptions;
      structured += throws_format([&] { decode(*bad); }) ? 1 : 0;
    }
  }
  fs::remove_all(dir);
  const bool ok = same_ckpt && ck_rt && cache_rt && ds_rt && structured == corruptions;
  std::ostringstream os;
  os << "repeat pretrain checkpoints " << (same_ckpt ? "byte-identical" : "DIFFER")
     << "; round trips: checkpoint " << (ck_rt ? "exact" : "BROKEN") << ", cache "
     << (cache_rt ? "exact" : "BROKEN") << ", dataset " << (ds_rt ? "exact" : "BROKEN")
     << "; corrupted files with structured errors " << structured << "/" << corruptions;
  return {ok, os.str()};
}

Outcome gradient_path_contract() {
  const Dataset& ds = train_set();
  std::size_t none_nonzero = 0, bias_zero = 0, batches = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::vector<std::size_t> batch;
    Rng rng(derive_seed(seed, {0x9a7u}));
    std::uniform_int_distribution<std::size_t> pick(0, ds.size() - 1);
    for (int i = 0; i < 8; ++i) batch.push_back(pick(rng));
    for (BiasMode bias : {BiasMode::kNone, BiasMode::kSaliency}) {
      RunConfig c = default_config(seed);
      c.bias_mode = bias;
      c.lambda = bias == BiasMode::kNone ? 0.0 : c.lambda;
      c.alt_period = 0;
      ModelParams<double> p = init_params<double>(c.arch(), seed);
      std::vector<Image> views;
      for (std::size_t r = 0; r < 2; ++r) {
        for (std::size_t id : batch) {
          auto v = make_views(ds.samples[id].image, AugmentSpec::from(c), ds.P, seed, id, 0);
          views.push_back(r == 0 ? v.x1 : v.x2);
        }
      }
      std::vector<const Image*> ptrs;
      for (const auto& v : views) ptrs.push_back(&v);
      p.set_trainable([](const std::string&) { return true; });
      p.zero_grad();
      Graph<double> g;
      g.backward(pretrain_objective<double>(g, p, stack_patches<double>(ptrs, ds.P), batch.size(), c).total);
      double mass = 0.0;
      for (const auto& [name, t] : p.tensors) {
        if (!is_saliency_param(name)) continue;
        for (double v : t.grad()) mass += std::abs(v);
      }
      if (bias == BiasMode::kNone) none_nonzero += mass != 0.0 ? 1 : 0;
      if (bias == BiasMode::kSaliency) bias_zero += mass == 0.0 ? 1 : 0;
    }
    ++batches;
  }
  return {none_nonzero == 0 && bias_zero == 0,
          std::to_string(batches) + " random batches; bias=none, lambda=0: " +
              std::to_string(none_nonzero) + " with nonzero saliency gradient; bias=saliency: " +
              std::to_string(bias_zero) + " with all-zero saliency gradient"};
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"sparse/dense equivalence at full support", sparse_dense_equivalence},
      {"attention row sums and off-support zeros", attention_invariants},
      {"attention multiply-add ratio equals K/L", complexity_ratio},
      {"sparse attention wall-time ratio and trend", efficiency_trend},
      {"saliency localization recall", localization},
      {"downstream accuracy and dense baseline", downstream_utility},
      {"rho sweep", rho_sweep},
      {"determinism and persistence", determinism_and_persistence},
      {"saliency gradient-path contract", gradient_path_contract},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::atoi(argv[i])));
  std::size_t failed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++ran;
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": "
              << o.detail << " [" << fmt(secs, 4) << " s]" << std::endl;
  }
  std::cout << ran - failed << "/" << ran << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
