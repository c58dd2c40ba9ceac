#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace idid {

// Machine-readable failure categories. The CLI reports these verbatim in its
// structured error output, so the spelling of to_string() is part of the
// external interface.
enum class ErrorCode {
  InvalidArgument,
  IoError,
  ParseError,
  MissingColumn,
  MissingValue,
  NonBinaryField,
  NegativeOutcome,
  EmptyTimeStratum,
  EmptyStratum,
  EmptyCell,
  TooFewRows,
  InvalidTarget,
  AllCandidatesFailed,
  DegenerateDenominator,
  DegenerateC,
  WeakInstrument,
  DegenerateQuadratic,
  NoAdmissibleRoot,
  NoRoot,
  TooManyFailures,
  Overflow,
  NonConvergence,
  RankDeficientJacobian,
  ExtremePropensity,
  InvalidProbability,
  InfeasibleMarginals,
  TooFewReps,
  ValidationFailed,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::MissingValue: return "MissingValue";
    case ErrorCode::NonBinaryField: return "NonBinaryField";
    case ErrorCode::NegativeOutcome: return "NegativeOutcome";
    case ErrorCode::EmptyTimeStratum: return "EmptyTimeStratum";
    case ErrorCode::EmptyStratum: return "EmptyStratum";
    case ErrorCode::EmptyCell: return "EmptyCell";
    case ErrorCode::TooFewRows: return "TooFewRows";
    case ErrorCode::InvalidTarget: return "InvalidTarget";
    case ErrorCode::AllCandidatesFailed: return "AllCandidatesFailed";
    case ErrorCode::DegenerateDenominator: return "DegenerateDenominator";
    case ErrorCode::DegenerateC: return "DegenerateC";
    case ErrorCode::WeakInstrument: return "WeakInstrument";
    case ErrorCode::DegenerateQuadratic: return "DegenerateQuadratic";
    case ErrorCode::NoAdmissibleRoot: return "NoAdmissibleRoot";
    case ErrorCode::NoRoot: return "NoRoot";
    case ErrorCode::TooManyFailures: return "TooManyFailures";
    case ErrorCode::Overflow: return "Overflow";
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::RankDeficientJacobian: return "RankDeficientJacobian";
    case ErrorCode::ExtremePropensity: return "ExtremePropensity";
    case ErrorCode::InvalidProbability: return "InvalidProbability";
    case ErrorCode::InfeasibleMarginals: return "InfeasibleMarginals";
    case ErrorCode::TooFewReps: return "TooFewReps";
    case ErrorCode::ValidationFailed: return "ValidationFailed";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace idid
