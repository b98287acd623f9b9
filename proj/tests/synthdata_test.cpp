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

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "sc/synthdata.hpp"

namespace sc {
namespace {

SynthSpec small_spec(std::uint64_t seed, std::size_t n = 64) {
  SynthSpec s;
  s.n_images = n;
  s.seed = seed;
  return s;
}

std::string message_of(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_dataset(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

TEST(SynthData, ClassesBalanced) {
  const auto samples = generate(small_spec(3, 512));
  std::size_t pos = 0;
  for (const auto& s : samples) pos += s.label;
  EXPECT_EQ(pos, 256u);
}

TEST(SynthData, Deterministic) {
  const auto a = generate(small_spec(11, 16));
  const auto b = generate(small_spec(11, 16));
  const auto c = generate(small_spec(12, 16));
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].label, b[i].label);
    EXPECT_EQ(a[i].anomaly_mask, b[i].anomaly_mask);
    any_diff |= !(a[i].image == c[i].image);
  }
  EXPECT_TRUE(any_diff);
}

TEST(SynthData, ZeroAmplitudeLeavesNoTrace) {
  // Same index, same stream: the positive and negative image differ only by
  // the painted blob, which vanishes at amplitude 0.
  SynthSpec spec = small_spec(5);
  spec.amplitude = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(generate_one(spec, i, 1).image, generate_one(spec, i, 0).image);
  }
}

TEST(SynthData, MaskedPatchesCarryTheAnomaly) {
  const SynthSpec spec = small_spec(7);
  const std::size_t gw = spec.W / spec.P;
  for (std::size_t i = 0; i < 32; ++i) {
    const SynthSample pos = generate_one(spec, i, 1), neg = generate_one(spec, i, 0);
    ASSERT_FALSE(pos.anomaly_mask.empty());
    for (auto idx : pos.anomaly_mask) {
      const std::size_t py = idx / gw, px = idx % gw;
      std::size_t bright = 0;
      for (std::size_t y = 0; y < spec.P; ++y) {
        for (std::size_t x = 0; x < spec.P; ++x) {
          const std::size_t yy = py * spec.P + y, xx = px * spec.P + x;
          const double diff = pos.image.at(yy, xx, 0) - neg.image.at(yy, xx, 0);
          // 1e-6 absorbs float rounding of the stored pixels.
          if (diff >= spec.amplitude / 2 - 1e-6) ++bright;
        }
      }
      EXPECT_GE(bright, spec.mask_min_pixels) << "image " << i << " patch " << idx;
    }
  }
}

TEST(SynthData, MaskSizeWithinFootprint) {
  const SynthSpec spec = small_spec(9, 256);
  for (const auto& s : generate(spec)) {
    validate_sample(s, spec.L());
    if (s.label == 1) {
      EXPECT_GE(s.anomaly_mask.size(), 1u);
      EXPECT_LE(s.anomaly_mask.size(), spec.max_footprint);
    } else {
      EXPECT_TRUE(s.anomaly_mask.empty());
    }
  }
}

TEST(SynthData, SaveLoadRoundTrip) {
  const Dataset ds = make_dataset(small_spec(13, 12));
  const auto path = std::filesystem::temp_directory_path() / "sc_synthdata_roundtrip.scds";
  save_dataset(ds, path);
  const Dataset back = load_dataset(path);
  std::filesystem::remove(path);
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.H, ds.H);
  EXPECT_EQ(back.P, ds.P);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.samples[i].image, ds.samples[i].image);
    EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
    EXPECT_EQ(back.samples[i].anomaly_mask, ds.samples[i].anomaly_mask);
  }
  EXPECT_EQ(encode_dataset(back), encode_dataset(ds));
}

TEST(SynthData, TruncatedFileNamesOffsetAndLength) {
  auto bytes = encode_dataset(make_dataset(small_spec(1, 2)));
  const std::size_t full = bytes.size();
  bytes.resize(full - 10);
  const std::string msg = message_of(bytes);
  EXPECT_NE(msg.find("dataset parse error at byte"), std::string::npos) << msg;
  EXPECT_NE(msg.find("truncated file"), std::string::npos) << msg;
  EXPECT_NE(msg.find("actual " + std::to_string(full - 10)), std::string::npos) << msg;
}

TEST(SynthData, BadMagic) {
  auto bytes = encode_dataset(make_dataset(small_spec(1, 1)));
  bytes[0] = 'X';
  const std::string msg = message_of(bytes);
  EXPECT_NE(msg.find("at byte 0"), std::string::npos) << msg;
  EXPECT_NE(msg.find("bad magic"), std::string::npos) << msg;
}

TEST(SynthData, FutureVersionRejected) {
  auto bytes = encode_dataset(make_dataset(small_spec(1, 1)));
  bytes[4] = 2;
  const std::string msg = message_of(bytes);
  EXPECT_NE(msg.find("at byte 4"), std::string::npos) << msg;
  EXPECT_NE(msg.find("unsupported future version 2"), std::string::npos) << msg;
}

TEST(SynthData, TrailingBytesRejected) {
  auto bytes = encode_dataset(make_dataset(small_spec(1, 1)));
  bytes.push_back(0);
  EXPECT_NE(message_of(bytes).find("1 trailing bytes"), std::string::npos);
}

TEST(SynthSpec, RadiusBeyondImageRejected) {
  SynthSpec s = small_spec(1);
  s.radius_max = 40.0;
  try {
    s.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("exceeds the image bounds 64x64"), std::string::npos);
  }
}

TEST(SynthSpec, ParseKeyValues) {
  const SynthSpec s = parse_synth_spec("n_images = 10\nseed = 4\namplitude = 0.3\n");
  EXPECT_EQ(s.n_images, 10u);
  EXPECT_EQ(s.seed, 4u);
  EXPECT_DOUBLE_EQ(s.amplitude, 0.3);
  EXPECT_THROW(parse_synth_spec("nimages = 3\n"), ConfigError);
  EXPECT_THROW(parse_synth_spec("P = 7\n"), ConfigError);
}

}  // namespace
}  // namespace sc
