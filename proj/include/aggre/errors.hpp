#pragma once

#include <stdexcept>
#include <string>

namespace aggre {

// Failure categories; each maps to a distinct CLI exit code.
enum class ErrorKind { config, data, numeric, io };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string msg)
      : std::runtime_error(std::move(msg)), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(std::string msg) : Error(ErrorKind::config, std::move(msg)) {}
};

struct DataError : Error {
  explicit DataError(std::string msg) : Error(ErrorKind::data, std::move(msg)) {}
};

struct NumericError : Error {
  explicit NumericError(std::string msg) : Error(ErrorKind::numeric, std::move(msg)) {}
};

struct IoError : Error {
  explicit IoError(std::string msg) : Error(ErrorKind::io, std::move(msg)) {}
};

// Broken caller contract (shape mismatch, id out of range). A bug, not a
// runtime condition; kept separate from the Error hierarchy.
struct ContractViolation : std::logic_error {
  explicit ContractViolation(std::string msg) : std::logic_error(std::move(msg)) {}
};

inline void contract(bool ok, const char* msg) {
  if (!ok) throw ContractViolation(msg);
}

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::numeric: return 4;
    case ErrorKind::io: return 5;
  }
  return 1;
}

}  // namespace aggre
