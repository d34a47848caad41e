#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qis {

enum class ErrorCode {
  dimension_mismatch,
  invalid_argument,
  empty_image,
  empty_region,
  degenerate_contrast,
  degenerate_template,
  degenerate_dilatation,
  non_positive_denominator,
  domain_error,
  orientation_violation,
  mixed_polarity,
  out_of_bounds,
  nothing_to_undo,
  history_full,
  unknown_artifact,
  io_error,
  parse_error,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::empty_image: return "empty_image";
    case ErrorCode::empty_region: return "empty_region";
    case ErrorCode::degenerate_contrast: return "degenerate_contrast";
    case ErrorCode::degenerate_template: return "degenerate_template";
    case ErrorCode::degenerate_dilatation: return "degenerate_dilatation";
    case ErrorCode::non_positive_denominator: return "non_positive_denominator";
    case ErrorCode::domain_error: return "domain_error";
    case ErrorCode::orientation_violation: return "orientation_violation";
    case ErrorCode::mixed_polarity: return "mixed_polarity";
    case ErrorCode::out_of_bounds: return "out_of_bounds";
    case ErrorCode::nothing_to_undo: return "nothing_to_undo";
    case ErrorCode::history_full: return "history_full";
    case ErrorCode::unknown_artifact: return "unknown_artifact";
    case ErrorCode::io_error: return "io_error";
    case ErrorCode::parse_error: return "parse_error";
  }
  return "unknown";
}

// Every failure raised by the library carries a machine-readable code; the
// service maps codes to HTTP statuses and the CLI to exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace qis
