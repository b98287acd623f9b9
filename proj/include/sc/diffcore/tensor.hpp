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

#ifndef SC_DIFFCORE_TENSOR_HPP_
#define SC_DIFFCORE_TENSOR_HPP_

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

#include "sc/error.hpp"

namespace sc {

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage. Vectorised reductions peel according to the
// address of the first element, so a buffer whose alignment changed from run
// to run would change the summation order and break bit-exact replay.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

// True when no value is NaN or infinite. Tests the exponent bits so the loop
// stays branch-free.
template <class T>
bool all_finite(std::span<const T> v) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits kExp = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
  Bits bad = 0;
  for (T x : v) bad |= static_cast<Bits>((std::bit_cast<Bits>(x) & kExp) == kExp);
  return bad == 0;
}

// Dense row-major array with an optional gradient slot of the same size.
// Rank 0 is a scalar, rank 1 is treated as a 1 x n row by matrix ops.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : shape_{}, data_(1, T{0}) {}

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}

  Tensor(Shape shape, const std::vector<T>& data)
      : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end())) {}

  Tensor(Shape shape, Buffer<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != data_.size()) {
      throw ShapeError("Tensor", "shape " + shape_str(shape_) + " holds " +
                                     std::to_string(numel(shape_)) +
                                     " values, got " +
                                     std::to_string(data_.size()));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{0}) {
    return Tensor(Shape{rows, cols}, fill);
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  // Matrix view used by 2-D kernels: scalar -> 1x1, vector n -> 1xn.
  std::size_t rows() const noexcept {
    return shape_.size() == 2 ? shape_[0] : 1;
  }
  std::size_t cols() const noexcept {
    if (shape_.empty()) return 1;
    return shape_.back();
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  Buffer<T>& storage() noexcept { return data_; }
  const Buffer<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }
  T item() const {
    if (data_.size() != 1) {
      throw ShapeError("item", "tensor of shape " + shape_str(shape_) +
                                   " is not a scalar");
    }
    return data_[0];
  }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<T> grad() noexcept { return grad_; }
  std::span<const T> grad() const noexcept { return grad_; }
  void zero_grad() { grad_.assign(data_.size(), T{0}); }
  void clear_grad() { grad_.clear(); }

  void accumulate_grad(std::span<const T> g) {
    if (g.size() != data_.size()) {
      throw ShapeError("accumulate_grad",
                       "gradient of length " + std::to_string(g.size()) +
                           " for tensor " + shape_str(shape_));
    }
    if (grad_.empty()) grad_.assign(data_.size(), T{0});
    for (std::size_t i = 0; i < g.size(); ++i) grad_[i] += g[i];
  }

  bool all_finite() const {
    return sc::all_finite<T>(data_);
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data().begin(),
                   [](T v) { return static_cast<U>(v); });
    out.set_requires_grad(requires_grad_);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t checked_numel(const Shape& shape) {
    for (std::size_t e : shape) {
      if (e == 0) {
        throw ShapeError("Tensor", "zero extent in shape " + shape_str(shape));
      }
    }
    return numel(shape);
  }

  Shape shape_;
  Buffer<T> data_;
  Buffer<T> grad_;
  bool requires_grad_ = false;
};

}  // namespace sc

#endif  // SC_DIFFCORE_TENSOR_HPP_
