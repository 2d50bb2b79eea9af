#include "error.hpp"

namespace oodb {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::Format: return "format";
    case ErrorKind::Consistency: return "consistency";
    case ErrorKind::Capacity: return "capacity";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::State: return "state";
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
    case ErrorKind::TrainingFailed: return "training-failed";
    case ErrorKind::Undefined: return "undefined";
  }
  return "unknown";
}

}  // namespace oodb
