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

// Closed-form operation counts, the check against the runtime counters, and
// wall-clock timing of the attention kernels.
//
// Unit: one multiply-add is two flops. Exponentials, divisions and the
// top-K comparisons are counted separately.

#ifndef SC_BENCH_HPP_
#define SC_BENCH_HPP_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sc/config.hpp"
#include "sc/diffcore/counter.hpp"
#include "sc/diffcore/graph.hpp"
#include "sc/diffcore/rng.hpp"
#include "sc/model/networks.hpp"
#include "sc/model/params.hpp"
#include "sc/sparse_attn.hpp"
#include "sc/training.hpp"

namespace sc {

// Keeps freed blocks in the heap instead of returning them to the kernel.
// Without this every large temporary is a fresh mmap and the page faults
// dominate kernel timings. No-op outside glibc.
inline void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

// Counts of one feature forward (embed, saliency in sparse mode, backbone)
// for a single image.
struct CostModel {
  AttentionMode mode = AttentionMode::kSparse;
  std::uint64_t L = 0, K = 0, d = 0, n_blocks = 0;
  std::uint64_t embed = 0;
  std::uint64_t saliency = 0;
  std::uint64_t attn_projection = 0;
  std::uint64_t attn_scores = 0;
  std::uint64_t attn_values = 0;
  std::uint64_t block_mlp = 0;
  std::uint64_t exps = 0;  // attention softmax exponentials
  std::uint64_t divs = 0;
  double selection_comparisons = 0.0;  // L log2 L per image, sparse only

  std::uint64_t attention() const { return attn_scores + attn_values; }
  std::uint64_t total() const {
    return embed + saliency + attn_projection + attn_scores + attn_values + block_mlp;
  }
};

// Attention-only model: scores and weighted sum over `keys` columns.
inline CostModel attention_cost(std::uint64_t L, std::uint64_t keys, std::uint64_t d,
                                std::uint64_t n_blocks = 1) {
  CostModel m;
  m.mode = keys == L ? AttentionMode::kDense : AttentionMode::kSparse;
  m.L = L;
  m.K = keys;
  m.d = d;
  m.n_blocks = n_blocks;
  m.attn_scores = n_blocks * 2 * L * keys * d;
  m.attn_values = n_blocks * 2 * L * keys * d;
  m.exps = n_blocks * L * keys;
  m.divs = n_blocks * L * keys;
  return m;
}

inline CostModel flop_count(const Architecture& a, AttentionMode mode, double rho) {
  const std::uint64_t L = a.L(), d = a.d;
  const std::uint64_t K = mode == AttentionMode::kSparse ? topk_count(rho, L) : L;
  CostModel m = attention_cost(L, K, d, a.n_blocks);
  m.mode = mode;
  m.embed = 2 * L * a.patch_dim() * d;
  if (mode == AttentionMode::kSparse) {
    std::uint64_t in = a.saliency_in();
    for (std::size_t i = 0; i <= a.saliency_hidden.size(); ++i) {
      const std::uint64_t out = i < a.saliency_hidden.size() ? a.saliency_hidden[i] : 1;
      m.saliency += 2 * L * in * out;
      in = out;
    }
    m.selection_comparisons = static_cast<double>(L) * std::log2(static_cast<double>(L));
  }
  m.attn_projection = a.n_blocks * 4 * 2 * L * d * d;
  m.block_mlp = a.n_blocks * 2 * 2 * L * d * a.mlp_hidden;
  return m;
}

inline CostModel flop_count(const RunConfig& c, AttentionMode mode) {
  return flop_count(c.arch(), mode, c.rho);
}

struct CountRow {
  std::string what;
  std::uint64_t expected = 0;
  std::uint64_t measured = 0;
  bool ok() const { return expected == measured; }
};

struct CountReport {
  std::vector<CountRow> rows;
  bool passed() const {
    return std::all_of(rows.begin(), rows.end(), [](const CountRow& r) { return r.ok(); });
  }
  std::vector<CountRow> mismatches() const {
    std::vector<CountRow> out;
    for (const auto& r : rows) {
      if (!r.ok()) out.push_back(r);
    }
    return out;
  }
};

// Compares per-stage runtime counters with the model.
inline CountReport count_check(const OpCounts& measured, const CostModel& m) {
  auto at = [&](Stage s) { return measured.flops_at(s); };
  auto idx = [](Stage s) { return static_cast<std::size_t>(s); };
  CountReport r;
  r.rows = {
      {"embed", m.embed, at(Stage::kEmbed)},
      {"saliency", m.saliency, at(Stage::kSaliency)},
      {"attn_projection", m.attn_projection, at(Stage::kAttentionProjection)},
      {"attn_scores", m.attn_scores, at(Stage::kAttentionScores)},
      {"attn_values", m.attn_values, at(Stage::kAttentionValues)},
      {"block_mlp", m.block_mlp, at(Stage::kBlockMlp)},
      {"attn_exps", m.exps, measured.exps[idx(Stage::kAttentionScores)]},
      {"attn_divs", m.divs, measured.divs[idx(Stage::kAttentionScores)]},
  };
  return r;
}

// Runs one instrumented feature forward of a random image and returns the
// counters it accumulated.
template <class T>
OpCounts instrumented_forward(const RunConfig& c, AttentionMode mode, std::uint64_t seed) {
  RunConfig cc = c;
  cc.attention = mode;
  ModelParams<T> p = init_params<T>(cc.arch(), seed);
  Rng rng(derive_seed(seed, {0xc0u}));
  Tensor<T> x = random_tensor<T>(Shape{cc.L(), cc.arch().patch_dim()}, rng, T{0}, T{1});
  const OpCounts saved = op_counts();
  op_counts().reset();
  Graph<T> g;
  encode(g.constant(x), 1, p, EncodeOptions<T>::from(cc));
  OpCounts out = op_counts();
  op_counts() = saved;
  return out;
}

// Same for the forward-only attention kernel at an arbitrary (L, K, d).
inline OpCounts instrumented_attention(std::size_t L, std::size_t K, std::size_t d,
                                       std::uint64_t seed) {
  Rng rng(seed);
  auto Q = random_tensor<double>(Shape{L, d}, rng);
  auto Km = random_tensor<double>(Shape{L, d}, rng);
  auto V = random_tensor<double>(Shape{L, d}, rng);
  std::vector<std::size_t> idx(L);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(K);
  std::sort(idx.begin(), idx.end());
  const OpCounts saved = op_counts();
  op_counts().reset();
  if (K == L) {
    dense_attention(Q, Km, V);
  } else {
    sparse_attention<double>(Q, Km, V, idx, {}, BiasMode::kNone);
  }
  OpCounts out = op_counts();
  op_counts() = saved;
  return out;
}

struct TimingStats {
  double median_ms = 0.0;
  double iqr_ms = 0.0;
};

inline TimingStats summarize(std::vector<double> ms) {
  std::sort(ms.begin(), ms.end());
  auto q = [&](double f) {
    const double pos = f * static_cast<double>(ms.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, ms.size() - 1);
    return ms[lo] + (pos - static_cast<double>(lo)) * (ms[hi] - ms[lo]);
  };
  return {q(0.5), q(0.75) - q(0.25)};
}

struct AttentionTiming {
  std::size_t L = 0, K = 0, d = 0, trials = 0;
  TimingStats dense;
  TimingStats sparse;
  double ratio() const { return sparse.median_ms / dense.median_ms; }
};

// Dense and sparse kernels on identical single-precision inputs, trials
// interleaved after a warmup. The sparse path uses the saliency bias.
inline AttentionTiming time_attention(std::size_t L, std::size_t K, std::size_t d,
                                      std::size_t trials, std::uint64_t seed = 0) {
  if (trials < 10) throw ConfigError("time_attention needs at least 10 trials");
  if (K == 0 || K > L) throw ConfigError("time_attention needs 1 <= K <= L");
  Rng rng(derive_seed(seed, {L, K, d}));
  auto Q = random_tensor<float>(Shape{L, d}, rng);
  auto Km = random_tensor<float>(Shape{L, d}, rng);
  auto V = random_tensor<float>(Shape{L, d}, rng);
  auto s = random_tensor<float>(Shape{L}, rng);
  const auto s_hat = normalize_scores<float>(s.data());
  const auto S = select_topk<float>(s_hat, static_cast<double>(K) / static_cast<double>(L));
  const std::vector<std::size_t>& idx = S.indices;
  const OpCounts saved = op_counts();
  volatile float sink = 0.0f;
  auto run_dense = [&] { sink = sink + dense_attention(Q, Km, V).F[0]; };
  auto run_sparse = [&] {
    sink = sink + sparse_attention<float>(Q, Km, V, idx, s_hat, BiasMode::kSaliency).F[0];
  };
  auto clock = [](auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };
  for (int w = 0; w < 3; ++w) {
    run_dense();
    run_sparse();
  }
  std::vector<double> td, ts;
  for (std::size_t t = 0; t < trials; ++t) {
    if (t % 2 == 0) {
      td.push_back(clock(run_dense));
      ts.push_back(clock(run_sparse));
    } else {
      ts.push_back(clock(run_sparse));
      td.push_back(clock(run_dense));
    }
  }
  op_counts() = saved;
  AttentionTiming r;
  r.L = L;
  r.K = K;
  r.d = d;
  r.trials = trials;
  r.dense = summarize(td);
  r.sparse = summarize(ts);
  return r;
}

// Attention activations of one layer in bytes: Q, K, V, the weight block and
// the output. The dense weight block is L x L, the sparse one L x K.
inline std::uint64_t peak_alloc_estimate(std::uint64_t L, std::uint64_t keys, std::uint64_t d,
                                         std::uint64_t bytes_per_value = sizeof(float)) {
  return (3 * L * d + L * keys + L * d) * bytes_per_value;
}

struct BenchRow {
  std::size_t L = 0, K = 0, d = 0;
  std::uint64_t flops_dense = 0, flops_sparse = 0;
  double wall_ms_dense = 0.0, wall_ms_sparse = 0.0;
  double iqr_ms_dense = 0.0, iqr_ms_sparse = 0.0;
  std::uint64_t peak_alloc_dense = 0, peak_alloc_sparse = 0;

  double ratio() const {
    return static_cast<double>(flops_sparse) / static_cast<double>(flops_dense);
  }
};

struct BenchReport {
  std::vector<BenchRow> rows;

  std::string csv() const {
    std::ostringstream os;
    os << "L,K,d,flops_dense,flops_sparse,ratio,wall_ms_dense,wall_ms_sparse,iqr_ms_dense,"
          "iqr_ms_sparse,peak_alloc_dense,peak_alloc_sparse\n";
    os << std::setprecision(10);
    for (const auto& r : rows) {
      os << r.L << ',' << r.K << ',' << r.d << ',' << r.flops_dense << ',' << r.flops_sparse
         << ',' << r.ratio() << ',' << r.wall_ms_dense << ',' << r.wall_ms_sparse << ','
         << r.iqr_ms_dense << ',' << r.iqr_ms_sparse << ',' << r.peak_alloc_dense << ','
         << r.peak_alloc_sparse << '\n';
    }
    return os.str();
  }

  std::string table() const {
    const std::vector<std::string> head = {"L",        "K",        "d",      "flops_dense",
                                           "flops_sparse", "ratio", "ms_dense", "ms_sparse",
                                           "mem_dense", "mem_sparse"};
    std::vector<std::vector<std::string>> cells;
    auto fmt = [](double v, int prec) {
      std::ostringstream os;
      os << std::fixed << std::setprecision(prec) << v;
      return os.str();
    };
    for (const auto& r : rows) {
      cells.push_back({std::to_string(r.L), std::to_string(r.K), std::to_string(r.d),
                       std::to_string(r.flops_dense), std::to_string(r.flops_sparse),
                       fmt(r.ratio(), 4), fmt(r.wall_ms_dense, 3), fmt(r.wall_ms_sparse, 3),
                       std::to_string(r.peak_alloc_dense), std::to_string(r.peak_alloc_sparse)});
    }
    std::vector<std::size_t> w(head.size());
    for (std::size_t i = 0; i < head.size(); ++i) {
      w[i] = head[i].size();
      for (const auto& row : cells) w[i] = std::max(w[i], row[i].size());
    }
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& v) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        os << (i ? "  " : "") << std::setw(static_cast<int>(w[i])) << v[i];
      }
      os << '\n';
    };
    line(head);
    for (const auto& row : cells) line(row);
    return os.str();
  }
};

// One report row: analytic attention counts for a single layer plus timings.
inline BenchRow bench_row(std::size_t L, std::size_t K, std::size_t d, std::size_t trials,
                          std::uint64_t seed = 0) {
  BenchRow r;
  r.L = L;
  r.K = K;
  r.d = d;
  r.flops_dense = attention_cost(L, L, d).attention();
  r.flops_sparse = attention_cost(L, K, d).attention();
  if (trials > 0) {
    const auto t = time_attention(L, K, d, trials, seed);
    r.wall_ms_dense = t.dense.median_ms;
    r.wall_ms_sparse = t.sparse.median_ms;
    r.iqr_ms_dense = t.dense.iqr_ms;
    r.iqr_ms_sparse = t.sparse.iqr_ms;
  }
  r.peak_alloc_dense = peak_alloc_estimate(L, L, d);
  r.peak_alloc_sparse = peak_alloc_estimate(L, K, d);
  return r;
}

}  // namespace sc

#endif  // SC_BENCH_HPP_
