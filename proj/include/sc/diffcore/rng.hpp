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

#ifndef SC_DIFFCORE_RNG_HPP_
#define SC_DIFFCORE_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

#include "sc/diffcore/tensor.hpp"

namespace sc {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a key tuple.
inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(base);
  for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k));
  return h;
}

template <class T>
void fill_uniform(Tensor<T>& t, Rng& rng, T lo, T hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
}

template <class T>
void fill_normal(Tensor<T>& t, Rng& rng, T mean, T stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
}

// Uniform in +-sqrt(6 / (fan_in + fan_out)).
template <class T>
void fill_xavier(Tensor<T>& t, Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  fill_uniform<T>(t, rng, static_cast<T>(-a), static_cast<T>(a));
}

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, T lo = T{-1}, T hi = T{1}) {
  Tensor<T> t(std::move(shape));
  fill_uniform(t, rng, lo, hi);
  return t;
}

}  // namespace sc

#endif  // SC_DIFFCORE_RNG_HPP_
