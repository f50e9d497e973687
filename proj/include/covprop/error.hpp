#pragma once

#include <stdexcept>
#include <string>

namespace covprop {

// Coarse failure categories. The CLI maps these onto process exit codes
// (io -> 2, dimension/domain/validation/format -> 3, numeric -> 4).
enum class ErrorKind {
  dimension,
  domain,
  validation,
  io,
  format,
  numeric,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void throw_error(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace covprop
