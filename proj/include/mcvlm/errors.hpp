// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mcvlm {

enum class ErrorKind {
  Dimension,
  Input,
  EmptySelection,
  DegenerateInput,
  Capacity,
  Validation,
  NonFinite,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension error";
    case ErrorKind::Input: return "input error";
    case ErrorKind::EmptySelection: return "empty-selection error";
    case ErrorKind::DegenerateInput: return "degenerate-input error";
    case ErrorKind::Capacity: return "capacity error";
    case ErrorKind::Validation: return "validation error";
    case ErrorKind::NonFinite: return "non-finite value";
    case ErrorKind::Io: return "i/o error";
  }
  return "error";
}

/// Single exception type for the library; `kind()` tells callers which
/// contract was violated.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace mcvlm
