#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace msfcn {

enum class ErrorKind {
  kInvalidArgument,
  kParse,
  kConfig,
  kIo,
  kNumeric,
  kState,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Single exception type for the library; `kind()` drives CLI exit reporting.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void throw_invalid(const std::string& message) {
  throw Error(ErrorKind::kInvalidArgument, message);
}

}  // namespace msfcn
