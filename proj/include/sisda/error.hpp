#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sisda {

enum class ErrorKind {
  shape_mismatch,
  non_finite,
  invalid_argument,
  invalid_config,
  out_of_vocab,
  length_overflow,
  state,
  io,
  parse,
};

std::string_view error_kind_name(ErrorKind kind);

// Single exception type for the library; callers switch on kind() when they
// need to tell failures apart (tests, the CLI's machine-readable error line).
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace sisda
