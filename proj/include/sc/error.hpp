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

#ifndef SC_ERROR_HPP_
#define SC_ERROR_HPP_

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sc {

// Root of every error raised by the library. The CLI maps these onto
// nonzero exit codes with the message as the diagnostic.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const std::string& detail)
      : Error("shape mismatch in " + op + ": " + detail), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

// Non-positive log argument, zero-norm normalization, NaN input, ...
class DomainError : public Error {
 public:
  DomainError(const std::string& op, const std::string& detail)
      : Error("domain error in " + op + ": " + detail), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
  ConfigError(std::size_t line, const std::string& what)
      : Error("config error at line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_ = 0;
};

// Malformed binary file: bad magic, unsupported version, truncation.
class FormatError : public Error {
 public:
  FormatError(const std::string& file_kind, std::uint64_t offset,
              const std::string& what)
      : Error(file_kind + " parse error at byte " + std::to_string(offset) +
              ": " + what),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

}  // namespace sc

#endif  // SC_ERROR_HPP_
