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

// Checkpoint ("SCKP") and attention cache ("SCAC") files. Layouts are
// documented in README.md.

#ifndef SC_PERSIST_HPP_
#define SC_PERSIST_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sc/config.hpp"
#include "sc/diffcore/adamw.hpp"
#include "sc/error.hpp"
#include "sc/io/binary.hpp"
#include "sc/model/params.hpp"
#include "sc/training.hpp"

namespace sc {

inline constexpr std::string_view kCheckpointMagic = "SCKP";
inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::string_view kCacheMagic = "SCAC";
inline constexpr std::uint16_t kCacheVersion = 1;

struct Checkpoint {
  RunConfig config;
  ModelParams<float> params;
  std::optional<OptimizerState<float>> optimizer;
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u16(kCheckpointVersion);
  w.str32(serialize_config(ck.config));
  w.u32(static_cast<std::uint32_t>(ck.params.tensors.size()));
  for (const auto& [name, t] : ck.params.tensors) {
    w.str16(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (float v : t.data()) w.f32(v);
  }
  w.u8(ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    const auto& o = *ck.optimizer;
    w.u64(o.updates);
    w.u32(static_cast<std::uint32_t>(o.slots.size()));
    for (const auto& [name, s] : o.slots) {
      w.str16(name);
      w.u64(s.step);
      w.u32(static_cast<std::uint32_t>(s.m.size()));
      for (float v : s.m) w.f32(v);
      for (float v : s.v) w.f32(v);
    }
  }
  return w.buffer();
}

// Every tensor is checked against the architecture of the embedded config.
inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "checkpoint");
  r.expect_magic(kCheckpointMagic);
  r.expect_version(kCheckpointVersion);
  Checkpoint ck;
  const std::uint64_t cfg_at = r.offset();
  const std::string text = r.str32("config text");
  try {
    ck.config = parse_config(text);
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint", cfg_at, std::string("embedded config: ") + e.what());
  }
  ck.params.arch = ck.config.arch();
  const auto want = expected_shapes(ck.params.arch);
  const std::uint32_t n = r.u32("tensor count");
  if (n != want.size()) {
    r.fail("tensor count " + std::to_string(n) + " but the architecture has " +
           std::to_string(want.size()));
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str16("tensor name");
    auto it = want.find(name);
    if (it == want.end()) r.fail("unexpected tensor '" + name + "'");
    if (ck.params.tensors.count(name)) r.fail("duplicate tensor '" + name + "'");
    const std::uint8_t rank = r.u8("tensor rank");
    Shape shape;
    for (std::uint8_t k = 0; k < rank; ++k) shape.push_back(r.u32("tensor dims"));
    if (shape != it->second) {
      r.fail(name + " has shape " + shape_str(shape) + ", architecture requires " +
             shape_str(it->second));
    }
    Tensor<float> t(shape);
    r.need(4 * t.size(), name + " data");
    for (float& v : t.data()) v = r.f32(name);
    t.set_requires_grad(true);
    ck.params.tensors.emplace(name, std::move(t));
  }
  if (r.u8("optimizer flag")) {
    OptimizerState<float> o;
    o.config = ck.config.adamw();
    o.updates = r.u64("optimizer updates");
    const std::uint32_t slots = r.u32("optimizer slot count");
    for (std::uint32_t i = 0; i < slots; ++i) {
      const std::string name = r.str16("slot name");
      auto pit = ck.params.tensors.find(name);
      if (pit == ck.params.tensors.end()) r.fail("optimizer slot for unknown tensor '" + name + "'");
      auto& s = o.slots[name];
      s.step = r.u64("slot step");
      const std::uint32_t len = r.u32("slot length");
      if (len != pit->second.size()) r.fail("optimizer slot '" + name + "' length mismatch");
      r.need(8ull * len, name + " moments");
      s.m.resize(len);
      s.v.resize(len);
      for (float& v : s.m) v = r.f32("m");
      for (float& v : s.v) v = r.f32("v");
    }
    ck.optimizer = std::move(o);
  }
  r.expect_end();
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

inline std::vector<std::uint8_t> encode_cache(const AttnCache& c) {
  io::ByteWriter w;
  w.bytes(kCacheMagic);
  w.u16(kCacheVersion);
  w.u32(static_cast<std::uint32_t>(c.entries.size()));
  w.u32(static_cast<std::uint32_t>(c.L));
  w.u32(static_cast<std::uint32_t>(c.K));
  for (const auto& [id, e] : c.entries) {
    if (e.S.size() != c.K || e.s_hat.size() != c.L) {
      throw ShapeError("save_cache", "entry " + std::to_string(id) + " disagrees with K or L");
    }
    w.u32(id);
    w.u16(static_cast<std::uint16_t>(e.S.size()));
    for (std::size_t j : e.S) w.u16(static_cast<std::uint16_t>(j));
    for (float v : e.s_hat) w.f32(v);
  }
  return w.buffer();
}

inline AttnCache decode_cache(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "attention cache");
  r.expect_magic(kCacheMagic);
  r.expect_version(kCacheVersion);
  AttnCache c;
  const std::uint32_t n = r.u32("entry count");
  c.L = r.u32("L");
  c.K = r.u32("K");
  if (c.L == 0 || c.K == 0 || c.K > c.L || c.L > 0xffff) r.fail("invalid L or K in header");
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t id = r.u32("image id");
    const std::uint16_t k = r.u16("support size");
    if (k != c.K) r.fail("entry " + std::to_string(id) + " has " + std::to_string(k) + " indices, K=" + std::to_string(c.K));
    AttnCache::Entry e;
    r.need(2ull * k, "support indices");
    for (std::uint16_t j = 0; j < k; ++j) {
      const std::size_t idx = r.u16("support index");
      if (idx >= c.L || (!e.S.empty() && idx <= e.S.back())) {
        r.fail("support of entry " + std::to_string(id) + " not strictly increasing in [0, L)");
      }
      e.S.push_back(idx);
    }
    r.need(4ull * c.L, "s_hat");
    e.s_hat.resize(c.L);
    for (float& v : e.s_hat) v = r.f32("s_hat");
    if (!c.entries.emplace(id, std::move(e)).second) r.fail("duplicate image id " + std::to_string(id));
  }
  r.expect_end();
  return c;
}

inline void save_cache(const AttnCache& c, const std::filesystem::path& path) {
  io::write_file(path, encode_cache(c));
}

inline AttnCache load_cache(const std::filesystem::path& path) {
  return decode_cache(io::read_file(path));
}

}  // namespace sc

#endif  // SC_PERSIST_HPP_
