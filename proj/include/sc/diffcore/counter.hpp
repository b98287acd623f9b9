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

#ifndef SC_DIFFCORE_COUNTER_HPP_
#define SC_DIFFCORE_COUNTER_HPP_

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string_view>

#include "sc/error.hpp"

namespace sc {

// Runtime operation counters. Forward kernels attribute their work to the
// stage that is active on the calling thread. Matmul work is counted in
// flops with a multiply-add worth two, the same unit as the cost model.
enum class Stage : std::size_t {
  kOther = 0,
  kEmbed,
  kAttentionProjection,  // Q/K/V/output projections
  kAttentionScores,      // q_i . k_j
  kAttentionValues,      // A V
  kBlockMlp,
  kSaliency,
  kHeads,  // projection, classifier and reconstruction heads
  kCount,
};

inline constexpr std::array<std::string_view,
                            static_cast<std::size_t>(Stage::kCount)>
    kStageNames = {"other",        "embed",         "attn_projection",
                   "attn_scores",  "attn_values",   "block_mlp",
                   "saliency",     "heads"};

class CounterOverflow : public Error {
 public:
  explicit CounterOverflow(std::string_view stage)
      : Error("operation counter overflow in stage " + std::string(stage)) {}
};

struct OpCounts {
  static constexpr std::size_t kStages = static_cast<std::size_t>(Stage::kCount);

  std::array<std::uint64_t, kStages> flops{};
  std::array<std::uint64_t, kStages> exps{};
  std::array<std::uint64_t, kStages> divs{};
  std::uint64_t saliency_forwards = 0;

  std::uint64_t flops_at(Stage s) const {
    return flops[static_cast<std::size_t>(s)];
  }
  std::uint64_t attention_flops() const {
    return flops_at(Stage::kAttentionScores) + flops_at(Stage::kAttentionValues);
  }
  std::uint64_t total_flops() const {
    std::uint64_t t = 0;
    for (auto f : flops) t += f;
    return t;
  }
  void reset() { *this = OpCounts{}; }
};

inline OpCounts& op_counts() {
  thread_local OpCounts counts;
  return counts;
}

inline Stage& current_stage() {
  thread_local Stage stage = Stage::kOther;
  return stage;
}

// RAII switch of the active stage.
class StageScope {
 public:
  explicit StageScope(Stage s) : saved_(current_stage()) { current_stage() = s; }
  ~StageScope() { current_stage() = saved_; }
  StageScope(const StageScope&) = delete;
  StageScope& operator=(const StageScope&) = delete;

 private:
  Stage saved_;
};

namespace detail {
inline void checked_add(std::uint64_t& slot, std::uint64_t amount, Stage s) {
  if (slot > std::numeric_limits<std::uint64_t>::max() - amount) {
    throw CounterOverflow(kStageNames[static_cast<std::size_t>(s)]);
  }
  slot += amount;
}

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b, Stage s) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) {
    throw CounterOverflow(kStageNames[static_cast<std::size_t>(s)]);
  }
  return a * b;
}
}  // namespace detail

// m x k times k x n.
inline void count_matmul(std::uint64_t m, std::uint64_t k, std::uint64_t n) {
  const Stage s = current_stage();
  const std::uint64_t f =
      detail::checked_mul(detail::checked_mul(2 * m, k, s), n, s);
  detail::checked_add(op_counts().flops[static_cast<std::size_t>(s)], f, s);
}

inline void count_flops(std::uint64_t f) {
  const Stage s = current_stage();
  detail::checked_add(op_counts().flops[static_cast<std::size_t>(s)], f, s);
}

inline void count_exps(std::uint64_t n) {
  const Stage s = current_stage();
  detail::checked_add(op_counts().exps[static_cast<std::size_t>(s)], n, s);
}

inline void count_divs(std::uint64_t n) {
  const Stage s = current_stage();
  detail::checked_add(op_counts().divs[static_cast<std::size_t>(s)], n, s);
}

}  // namespace sc

#endif  // SC_DIFFCORE_COUNTER_HPP_
