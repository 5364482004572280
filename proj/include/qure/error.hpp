#pragma once

#include <stdexcept>
#include <string>

namespace qure {

// Error categories map onto CLI exit codes: validation problems exit 1,
// everything else exits 2.
enum class ErrorKind {
  Io,
  Format,
  Corruption,
  Validation,
  Lookup,
  DegenerateQuery,
  FallbackRequired,
  NonFinite,
  Config,
  UndefinedRate,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace qure
