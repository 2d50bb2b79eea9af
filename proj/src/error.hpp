#pragma once

#include <stdexcept>
#include <string>

namespace oodb {

enum class ErrorKind {
  InvalidArgument,
  Format,
  Consistency,
  Capacity,
  Shape,
  Numeric,
  State,
  Config,
  Io,
  TrainingFailed,
  Undefined,
};

const char* to_string(ErrorKind kind);

// Every failure raised by the core carries a kind so the C boundary can map
// it onto a stable status code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Config errors also name the offending key as a JSON pointer.
class ConfigError : public Error {
 public:
  ConfigError(std::string pointer, const std::string& message)
      : Error(ErrorKind::Config, message + " (at " + pointer + ")"),
        pointer_(std::move(pointer)) {}

  const std::string& pointer() const noexcept { return pointer_; }

 private:
  std::string pointer_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace oodb
