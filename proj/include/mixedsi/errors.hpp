#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mixedsi {

enum class ErrorCode {
  RankDeficient,
  ShapeMismatch,
  MissingErrorVariance,
  InvalidValue,
  SingularSystem,
  NoConvergence,
  DegenerateData,
  CholeskyFailure,
  MissingPerCluster,
  ProviderInconsistent,
  RefitFailure,
  SeedOverflow,
  AlphaOutOfRange,
  EmptySubset,
  InvalidConstants,
  BoundUnattainable,
  NonMonotoneBound,
  ParseError,
  EmptyFile,
  EmptyGrid,
  NonPositiveShift,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingErrorVariance: return "MissingErrorVariance";
    case ErrorCode::InvalidValue: return "InvalidValue";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::DegenerateData: return "DegenerateData";
    case ErrorCode::CholeskyFailure: return "CholeskyFailure";
    case ErrorCode::MissingPerCluster: return "MissingPerCluster";
    case ErrorCode::ProviderInconsistent: return "ProviderInconsistent";
    case ErrorCode::RefitFailure: return "RefitFailure";
    case ErrorCode::SeedOverflow: return "SeedOverflow";
    case ErrorCode::AlphaOutOfRange: return "AlphaOutOfRange";
    case ErrorCode::EmptySubset: return "EmptySubset";
    case ErrorCode::InvalidConstants: return "InvalidConstants";
    case ErrorCode::BoundUnattainable: return "BoundUnattainable";
    case ErrorCode::NonMonotoneBound: return "NonMonotoneBound";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::EmptyFile: return "EmptyFile";
    case ErrorCode::EmptyGrid: return "EmptyGrid";
    case ErrorCode::NonPositiveShift: return "NonPositiveShift";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI's error JSON) can dispatch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw Error(ErrorCode::AlphaOutOfRange, "alpha must lie in (0,1), got " + std::to_string(alpha));
  }
}

}  // namespace mixedsi
