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

// Deterministic "localized anomaly" images: a smooth low-contrast background
// with, for label 1, one bright flat-topped blob at a random sub-pixel
// position. The dataset file format is documented in README.md.

#ifndef SC_SYNTHDATA_HPP_
#define SC_SYNTHDATA_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "sc/diffcore/rng.hpp"
#include "sc/error.hpp"
#include "sc/io/binary.hpp"
#include "sc/io/keyvalue.hpp"
#include "sc/model/patches.hpp"
#include "sc/sparse_attn.hpp"

namespace sc {

struct SynthSpec {
  std::size_t n_images = 512;
  std::size_t H = 64;
  std::size_t W = 64;
  std::size_t C = 1;
  std::size_t P = 8;
  // anomaly
  double amplitude = 0.5;
  double radius_min = 8.0;  // half-maximum radius of the blob, pixels
  double radius_max = 12.0;
  std::size_t mask_min_pixels = 16;  // core pixels for a patch to count
  std::size_t max_footprint = 16;    // m: upper bound on mask size
  // background
  double background = 0.25;
  double wave_amplitude = 0.04;
  std::size_t wave_components = 3;
  double noise_floor = 0.02;
  double rho_default = 0.3;
  std::uint64_t seed = 0;

  std::size_t L() const { return (H / P) * (W / P); }

  void validate() const {
    if (n_images == 0) throw ConfigError("n_images must be >= 1");
    if (P == 0 || H % P != 0 || W % P != 0) {
      throw ConfigError("image " + std::to_string(H) + "x" + std::to_string(W) +
                        " not divisible by P=" + std::to_string(P));
    }
    if (!(radius_min > 0.0) || radius_min > radius_max) {
      throw ConfigError("anomaly radius range must satisfy 0 < radius_min <= radius_max");
    }
    if (2.0 * radius_max >= static_cast<double>(std::min(H, W))) {
      throw ConfigError("anomaly radius " + io::format_double(radius_max) +
                        " exceeds the image bounds " + std::to_string(H) + "x" + std::to_string(W));
    }
    if (amplitude < 0.0 || noise_floor < 0.0 || wave_amplitude < 0.0) {
      throw ConfigError("amplitude, wave_amplitude and noise_floor must be >= 0");
    }
    if (max_footprint == 0 || max_footprint > topk_count(rho_default, L())) {
      throw ConfigError("max_footprint " + std::to_string(max_footprint) +
                        " must lie in [1, floor(rho*L)] = [1, " +
                        std::to_string(topk_count(rho_default, L())) + "]");
    }
    if (mask_min_pixels == 0 || mask_min_pixels > P * P) {
      throw ConfigError("mask_min_pixels must lie in [1, P*P]");
    }
  }
};

inline SynthSpec parse_synth_spec(std::string_view text) {
  SynthSpec s;
  for (const auto& e : io::parse_kv(text)) {
    const std::string& k = e.key;
    auto sz = [&] { return static_cast<std::size_t>(io::to_uint(e)); };
    if (k == "n_images") s.n_images = sz();
    else if (k == "H") s.H = sz();
    else if (k == "W") s.W = sz();
    else if (k == "C") s.C = sz();
    else if (k == "P") s.P = sz();
    else if (k == "amplitude") s.amplitude = io::to_double(e);
    else if (k == "radius_min") s.radius_min = io::to_double(e);
    else if (k == "radius_max") s.radius_max = io::to_double(e);
    else if (k == "mask_min_pixels") s.mask_min_pixels = sz();
    else if (k == "max_footprint") s.max_footprint = sz();
    else if (k == "background") s.background = io::to_double(e);
    else if (k == "wave_amplitude") s.wave_amplitude = io::to_double(e);
    else if (k == "wave_components") s.wave_components = sz();
    else if (k == "noise_floor") s.noise_floor = io::to_double(e);
    else if (k == "rho_default") s.rho_default = io::to_double(e);
    else if (k == "seed") s.seed = io::to_uint(e);
    else throw ConfigError(e.line, "unknown key '" + k + "'");
  }
  s.validate();
  return s;
}

struct SynthSample {
  Image image;
  std::uint8_t label = 0;
  std::vector<std::uint16_t> anomaly_mask;  // sorted patch indices
};

inline void validate_sample(const SynthSample& s, std::size_t L) {
  if (s.label > 1) throw Error("label must be 0 or 1");
  if ((s.label == 1) != !s.anomaly_mask.empty()) {
    throw Error("label " + std::to_string(s.label) + " inconsistent with mask of size " +
                std::to_string(s.anomaly_mask.size()));
  }
  for (std::size_t i = 0; i < s.anomaly_mask.size(); ++i) {
    if (s.anomaly_mask[i] >= L) throw Error("mask index outside [0, L)");
    if (i && s.anomaly_mask[i] <= s.anomaly_mask[i - 1]) throw Error("mask not strictly increasing");
  }
}

namespace detail {

// Balanced labels: floor(n/2) ones, shuffled.
inline std::vector<std::uint8_t> balanced_labels(std::size_t n, std::uint64_t seed) {
  std::vector<std::uint8_t> labels(n, 0);
  for (std::size_t i = 0; i < n / 2; ++i) labels[i] = 1;
  Rng rng(derive_seed(seed, {0x1abe1u}));
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

}  // namespace detail

inline SynthSample generate_one(const SynthSpec& spec, std::size_t index, std::uint8_t label) {
  Rng rng(derive_seed(spec.seed, {0x5a3bu, index}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double H = static_cast<double>(spec.H), W = static_cast<double>(spec.W);

  struct Wave {
    double fy, fx, amp, phase;
  };
  std::vector<Wave> waves;
  for (std::size_t c = 0; c < spec.wave_components; ++c) {
    std::uniform_int_distribution<int> freq(0, 2);
    int fy = freq(rng), fx = freq(rng);
    if (fy == 0 && fx == 0) fx = 1;
    waves.push_back({static_cast<double>(fy), static_cast<double>(fx),
                     spec.wave_amplitude * (2.0 * unit(rng) - 1.0),
                     2.0 * std::numbers::pi * unit(rng)});
  }

  SynthSample s;
  s.label = label;
  s.image = Image(spec.H, spec.W, spec.C);
  std::vector<double> blob(spec.H * spec.W, 0.0);
  // The geometry is drawn for every image so both classes consume the same
  // random stream; label 0 simply does not paint it.
  const double r = spec.radius_min + (spec.radius_max - spec.radius_min) * unit(rng);
  const double cy = r + (H - 2.0 * r) * unit(rng);
  const double cx = r + (W - 2.0 * r) * unit(rng);
  const std::size_t gw = spec.W / spec.P;
  std::vector<std::size_t> core_count(spec.L(), 0);
  for (std::size_t y = 0; y < spec.H; ++y) {
    for (std::size_t x = 0; x < spec.W; ++x) {
      const double dist = std::hypot(static_cast<double>(x) + 0.5 - cx,
                                     static_cast<double>(y) + 0.5 - cy);
      // Flat-topped profile, exactly half maximum at dist == r.
      const double q = dist / r;
      blob[y * spec.W + x] = spec.amplitude * std::exp(-std::numbers::ln2 * q * q * q * q);
      if (dist <= r) ++core_count[(y / spec.P) * gw + x / spec.P];
    }
  }
  for (std::size_t y = 0; y < spec.H; ++y) {
    for (std::size_t x = 0; x < spec.W; ++x) {
      double bg = spec.background;
      for (const auto& w : waves) {
        bg += w.amp * std::cos(2.0 * std::numbers::pi * (w.fy * static_cast<double>(y) / H +
                                                         w.fx * static_cast<double>(x) / W) +
                               w.phase);
      }
      for (std::size_t c = 0; c < spec.C; ++c) {
        double v = bg + spec.noise_floor * gauss(rng);
        if (label == 1) v += blob[y * spec.W + x];
        s.image.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  if (label == 1) {
    for (std::size_t i = 0; i < core_count.size(); ++i) {
      if (core_count[i] >= spec.mask_min_pixels) s.anomaly_mask.push_back(static_cast<std::uint16_t>(i));
    }
    if (s.anomaly_mask.empty()) {
      const auto it = std::max_element(core_count.begin(), core_count.end());
      s.anomaly_mask.push_back(static_cast<std::uint16_t>(it - core_count.begin()));
    }
    if (s.anomaly_mask.size() > spec.max_footprint) {
      throw ConfigError("anomaly footprint " + std::to_string(s.anomaly_mask.size()) +
                        " patches exceeds max_footprint " + std::to_string(spec.max_footprint));
    }
  }
  return s;
}

// Pure function of the spec, seed included.
inline std::vector<SynthSample> generate(const SynthSpec& spec) {
  spec.validate();
  const auto labels = detail::balanced_labels(spec.n_images, spec.seed);
  std::vector<SynthSample> out;
  out.reserve(spec.n_images);
  for (std::size_t i = 0; i < spec.n_images; ++i) out.push_back(generate_one(spec, i, labels[i]));
  return out;
}

struct Dataset {
  std::size_t H = 0, W = 0, C = 0, P = 0;
  std::vector<SynthSample> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t L() const { return (H / P) * (W / P); }
};

inline Dataset make_dataset(const SynthSpec& spec) {
  return Dataset{spec.H, spec.W, spec.C, spec.P, generate(spec)};
}

inline constexpr std::string_view kDatasetMagic = "SCDS";
inline constexpr std::uint16_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  io::ByteWriter w;
  w.bytes(kDatasetMagic);
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.H));
  w.u32(static_cast<std::uint32_t>(ds.W));
  w.u32(static_cast<std::uint32_t>(ds.C));
  w.u32(static_cast<std::uint32_t>(ds.P));
  w.u32(static_cast<std::uint32_t>(ds.L()));
  for (const auto& s : ds.samples) {
    if (s.image.H != ds.H || s.image.W != ds.W || s.image.C != ds.C) {
      throw ShapeError("save_dataset", "sample image dims differ from the dataset header");
    }
    w.u8(s.label);
    w.u16(static_cast<std::uint16_t>(s.anomaly_mask.size()));
    for (auto idx : s.anomaly_mask) w.u16(idx);
    for (float v : s.image.pixels) w.f32(v);
  }
  return w.buffer();
}

inline Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "dataset");
  r.expect_magic(kDatasetMagic);
  r.expect_version(kDatasetVersion);
  Dataset ds;
  const std::uint32_t n = r.u32("sample count");
  ds.H = r.u32("H");
  ds.W = r.u32("W");
  ds.C = r.u32("C");
  ds.P = r.u32("P");
  const std::uint32_t L = r.u32("L");
  if (ds.H == 0 || ds.W == 0 || ds.C == 0 || ds.P == 0 || ds.H % ds.P || ds.W % ds.P) {
    r.fail("invalid image geometry in header");
  }
  if (L != ds.L()) r.fail("header L=" + std::to_string(L) + " disagrees with H, W, P");
  ds.samples.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string tag = "sample " + std::to_string(i);
    SynthSample s;
    s.label = r.u8(tag + " label");
    const std::uint16_t m = r.u16(tag + " mask length");
    r.need(2u * m, tag + " mask");
    for (std::uint16_t k = 0; k < m; ++k) s.anomaly_mask.push_back(r.u16(tag + " mask"));
    const std::size_t npx = ds.H * ds.W * ds.C;
    r.need(4 * npx, tag + " pixels");
    s.image = Image(ds.H, ds.W, ds.C);
    for (std::size_t k = 0; k < npx; ++k) s.image.pixels[k] = r.f32(tag + " pixels");
    try {
      validate_sample(s, ds.L());
    } catch (const Error& e) {
      r.fail(tag + ": " + e.what());
    }
    ds.samples.push_back(std::move(s));
  }
  r.expect_end();
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::write_file(path, encode_dataset(ds));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(io::read_file(path));
}

}  // namespace sc

#endif  // SC_SYNTHDATA_HPP_
