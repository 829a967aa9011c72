#pragma once

#include <stdexcept>
#include <string>

namespace raigen {

enum class ErrorKind {
  Config,
  Io,
  Format,
  Length,
  Validation,
  Shape,
  Numeric,
  Capability,
  Training,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
    case ErrorKind::Format: return "format";
    case ErrorKind::Length: return "length";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Capability: return "capability";
    case ErrorKind::Training: return "training";
  }
  return "unknown";
}

// Process exit code for each error family. 0 is success, 1 is reserved for
// usage errors reported by the argument parser.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Io:
    case ErrorKind::Format:
    case ErrorKind::Length: return 3;
    case ErrorKind::Numeric:
    case ErrorKind::Training: return 4;
    case ErrorKind::Capability: return 5;
    case ErrorKind::Validation:
    case ErrorKind::Shape: return 6;
  }
  return 1;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind), message_(what) {}

  ErrorKind kind() const noexcept { return kind_; }
  // The text without the kind prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorKind kind_;
  std::string message_;
};

// Raised by the trainer when the loss stops being finite.
class TrainingError : public Error {
 public:
  TrainingError(std::size_t step, const std::string& what)
      : Error(ErrorKind::Training, "step " + std::to_string(step) + ": " + what), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace raigen
