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

// Little-endian byte encoding shared by the dataset, checkpoint and cache
// formats.

#ifndef SC_IO_BINARY_HPP_
#define SC_IO_BINARY_HPP_

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sc/error.hpp"

namespace sc::io {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void str16(std::string_view s) {
    if (s.size() > 0xffff) throw Error("string too long for u16 length prefix");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s);
  }
  void str32(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

// Bounds-checked cursor. Every failure is a FormatError carrying the byte
// offset at which the read was attempted.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string kind)
      : data_(data), kind_(std::move(kind)) {}

  std::uint64_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      throw FormatError(kind_, pos_,
                        "truncated file: " + std::string(what) + " needs " + std::to_string(n) +
                            " bytes (file length expected >= " + std::to_string(pos_ + n) +
                            ", actual " + std::to_string(data_.size()) + ")");
    }
  }

  std::uint8_t u8(std::string_view what) { return static_cast<std::uint8_t>(get_le(1, what)); }
  std::uint16_t u16(std::string_view what) { return static_cast<std::uint16_t>(get_le(2, what)); }
  std::uint32_t u32(std::string_view what) { return static_cast<std::uint32_t>(get_le(4, what)); }
  std::uint64_t u64(std::string_view what) { return get_le(8, what); }
  float f32(std::string_view what) { return std::bit_cast<float>(u32(what)); }
  std::string bytes(std::size_t n, std::string_view what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string str16(std::string_view what) { return bytes(u16(what), what); }
  std::string str32(std::string_view what) { return bytes(u32(what), what); }

  void expect_magic(std::string_view magic) {
    const std::uint64_t at = pos_;
    if (remaining() < magic.size() ||
        std::memcmp(data_.data() + pos_, magic.data(), magic.size()) != 0) {
      throw FormatError(kind_, at, "bad magic (expected \"" + std::string(magic) + "\")");
    }
    pos_ += magic.size();
  }

  std::uint16_t expect_version(std::uint16_t supported) {
    const std::uint64_t at = pos_;
    const std::uint16_t v = u16("version");
    if (v > supported) {
      throw FormatError(kind_, at, "unsupported future version " + std::to_string(v) +
                                       " (this build reads up to " +
                                       std::to_string(supported) + ")");
    }
    if (v == 0) throw FormatError(kind_, at, "invalid version 0");
    return v;
  }

  void expect_end() const {
    if (!at_end()) {
      throw FormatError(kind_, pos_, std::to_string(remaining()) + " trailing bytes");
    }
  }

  [[noreturn]] void fail(std::string_view what) const {
    throw FormatError(kind_, pos_, std::string(what));
  }

 private:
  std::uint64_t get_le(int n, std::string_view what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::string kind_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

inline std::string read_text(const std::filesystem::path& path) {
  auto b = read_file(path);
  return std::string(b.begin(), b.end());
}

}  // namespace sc::io

#endif  // SC_IO_BINARY_HPP_
