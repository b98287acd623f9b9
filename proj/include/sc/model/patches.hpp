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

#ifndef SC_MODEL_PATCHES_HPP_
#define SC_MODEL_PATCHES_HPP_

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "sc/diffcore/tensor.hpp"
#include "sc/error.hpp"

namespace sc {

// H x W x C image, pixels stored row-major with channels innermost.
struct Image {
  std::size_t H = 0;
  std::size_t W = 0;
  std::size_t C = 1;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
      : H(h), W(w), C(c), pixels(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * W + x) * C + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * W + x) * C + c];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

// L = (H/P)(W/P) patches in row-major grid order, each flattened as
// (py, px, c) into a row of `patches`.
template <class T>
struct PatchGrid {
  std::size_t P = 0;
  std::size_t C = 1;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::uint64_t image_id = 0;
  Tensor<T> patches;  // L x (P*P*C)

  std::size_t L() const { return grid_h * grid_w; }
  std::size_t patch_dim() const { return P * P * C; }
};

inline void check_divisible(std::size_t H, std::size_t W, std::size_t P) {
  if (P == 0 || H % P != 0 || W % P != 0) {
    throw ShapeError("partition_patches", "image " + std::to_string(H) + "x" +
                                              std::to_string(W) +
                                              " not divisible by patch size " +
                                              std::to_string(P));
  }
}

template <class T>
PatchGrid<T> partition_patches(const Image& img, std::size_t P, std::uint64_t image_id = 0) {
  check_divisible(img.H, img.W, P);
  if (img.pixels.size() != img.H * img.W * img.C) {
    throw ShapeError("partition_patches", "pixel buffer does not match dimensions");
  }
  PatchGrid<T> g;
  g.P = P;
  g.C = img.C;
  g.grid_h = img.H / P;
  g.grid_w = img.W / P;
  g.image_id = image_id;
  g.patches = Tensor<T>(Shape{g.L(), g.patch_dim()});
  for (std::size_t gy = 0; gy < g.grid_h; ++gy) {
    for (std::size_t gx = 0; gx < g.grid_w; ++gx) {
      T* row = &g.patches(gy * g.grid_w + gx, 0);
      std::size_t k = 0;
      for (std::size_t py = 0; py < P; ++py) {
        for (std::size_t px = 0; px < P; ++px) {
          for (std::size_t c = 0; c < img.C; ++c) {
            row[k++] = static_cast<T>(img.at(gy * P + py, gx * P + px, c));
          }
        }
      }
    }
  }
  return g;
}

template <class T>
Image reassemble(const PatchGrid<T>& g) {
  Image img(g.grid_h * g.P, g.grid_w * g.P, g.C);
  for (std::size_t gy = 0; gy < g.grid_h; ++gy) {
    for (std::size_t gx = 0; gx < g.grid_w; ++gx) {
      const T* row = &g.patches(gy * g.grid_w + gx, 0);
      std::size_t k = 0;
      for (std::size_t py = 0; py < g.P; ++py) {
        for (std::size_t px = 0; px < g.P; ++px) {
          for (std::size_t c = 0; c < g.C; ++c) {
            img.at(gy * g.P + py, gx * g.P + px, c) = static_cast<float>(row[k++]);
          }
        }
      }
    }
  }
  return img;
}

}  // namespace sc

#endif  // SC_MODEL_PATCHES_HPP_
