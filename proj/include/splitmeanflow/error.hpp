#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace splitmeanflow {

// Machine-readable failure classes. The CLI maps each to its own exit code.
enum class ErrorCategory {
  invalid_argument,
  shape_mismatch,
  poisoned_state,
  divergence,
  missing_teacher,
  config,
  checkpoint_version,
  checkpoint_truncated,
  checkpoint_dimension,
  checkpoint_malformed,
  io,
};

inline std::string_view category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::invalid_argument: return "invalid_argument";
    case ErrorCategory::shape_mismatch: return "shape_mismatch";
    case ErrorCategory::poisoned_state: return "poisoned_state";
    case ErrorCategory::divergence: return "divergence";
    case ErrorCategory::missing_teacher: return "missing_teacher";
    case ErrorCategory::config: return "config";
    case ErrorCategory::checkpoint_version: return "checkpoint_version";
    case ErrorCategory::checkpoint_truncated: return "checkpoint_truncated";
    case ErrorCategory::checkpoint_dimension: return "checkpoint_dimension";
    case ErrorCategory::checkpoint_malformed: return "checkpoint_malformed";
    case ErrorCategory::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

}  // namespace splitmeanflow
