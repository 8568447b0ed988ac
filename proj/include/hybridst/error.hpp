#pragma once

#include <stdexcept>
#include <string>

namespace hybridst {

/// Error taxonomy shared by every module. The CLI maps `io` to exit
/// code 2 and everything else to exit code 1.
enum class ErrorKind {
  validation,       // bad input values or broken invariants
  parse,            // malformed file content (carries line numbers)
  spacing,          // irregular timestamp spacing
  schema,           // mismatched ids, columns, or feature schemas
  io,               // unreadable / unwritable path
  dimension,        // tensor shape mismatch
  computation,      // non-finite values produced
  incompatibility,  // checkpoint version or shape guard tripped
  corruption,       // truncated or mangled binary payload
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

  int exit_code() const { return kind_ == ErrorKind::io ? 2 : 1; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace hybridst
