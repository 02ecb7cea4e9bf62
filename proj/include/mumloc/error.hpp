#ifndef MUMLOC_ERROR_HPP
#define MUMLOC_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace mumloc {

enum class ErrorKind {
  NonPositiveRadicand,
  FitDiverged,
  InsufficientSamples,
  InvalidParams,
  GridMismatch,
  DriftOutOfRange,
  TooLargeForDense,
  StepSizeFailure,
  ParseError,
  ConfigError,
  IoError,
};

constexpr std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::NonPositiveRadicand: return "NonPositiveRadicand";
    case ErrorKind::FitDiverged: return "FitDiverged";
    case ErrorKind::InsufficientSamples: return "InsufficientSamples";
    case ErrorKind::InvalidParams: return "InvalidParams";
    case ErrorKind::GridMismatch: return "GridMismatch";
    case ErrorKind::DriftOutOfRange: return "DriftOutOfRange";
    case ErrorKind::TooLargeForDense: return "TooLargeForDense";
    case ErrorKind::StepSizeFailure: return "StepSizeFailure";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

/// Process exit codes used by the command line tool.
/// 0 success, 2 config error, 3 data error, 4 numerical failure.
constexpr int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::ConfigError:
    case ErrorKind::InvalidParams:
    case ErrorKind::GridMismatch:
    case ErrorKind::DriftOutOfRange:
    case ErrorKind::TooLargeForDense:
      return 2;
    case ErrorKind::ParseError:
    case ErrorKind::InsufficientSamples:
    case ErrorKind::IoError:
      return 3;
    case ErrorKind::NonPositiveRadicand:
    case ErrorKind::FitDiverged:
    case ErrorKind::StepSizeFailure:
      return 4;
  }
  return 1;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace mumloc

#endif  // MUMLOC_ERROR_HPP
