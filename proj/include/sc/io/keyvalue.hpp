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

// Line-oriented `key = value` text with `#` comments.

#ifndef SC_IO_KEYVALUE_HPP_
#define SC_IO_KEYVALUE_HPP_

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sc/error.hpp"

namespace sc::io {

struct KvEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<KvEntry> parse_kv(std::string_view text) {
  std::vector<KvEntry> out;
  std::map<std::string, std::size_t, std::less<>> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(line_no, "expected 'key = value'");
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError(line_no, "empty key");
    if (value.empty()) throw ConfigError(line_no, "empty value for '" + key + "'");
    if (auto it = seen.find(key); it != seen.end()) {
      throw ConfigError(line_no, "duplicate key '" + key + "' (first set on line " +
                                     std::to_string(it->second) + ")");
    }
    seen.emplace(key, line_no);
    out.push_back({key, value, line_no});
  }
  return out;
}

inline double to_double(const KvEntry& e) {
  double v = 0.0;
  const char* b = e.value.data();
  const char* end = b + e.value.size();
  auto [p, ec] = std::from_chars(b, end, v);
  if (ec != std::errc{} || p != end) {
    throw ConfigError(e.line, "'" + e.key + "' expects a real number, got '" + e.value + "'");
  }
  return v;
}

inline std::uint64_t to_uint(const KvEntry& e) {
  std::uint64_t v = 0;
  const char* b = e.value.data();
  const char* end = b + e.value.size();
  auto [p, ec] = std::from_chars(b, end, v);
  if (ec != std::errc{} || p != end) {
    throw ConfigError(e.line, "'" + e.key + "' expects a non-negative integer, got '" + e.value + "'");
  }
  return v;
}

inline bool to_bool(const KvEntry& e) {
  if (e.value == "true") return true;
  if (e.value == "false") return false;
  throw ConfigError(e.line, "'" + e.key + "' expects true|false, got '" + e.value + "'");
}

inline std::vector<std::size_t> to_uint_list(const KvEntry& e) {
  std::vector<std::size_t> out;
  std::stringstream ss(e.value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    KvEntry part{e.key, std::string(trim(item)), e.line};
    out.push_back(static_cast<std::size_t>(to_uint(part)));
  }
  return out;
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    double back = 0.0;
    std::from_chars(buf, buf + std::char_traits<char>::length(buf), back);
    if (back == v) break;
  }
  return buf;
}

}  // namespace sc::io

#endif  // SC_IO_KEYVALUE_HPP_
