#pragma once

#include <stdexcept>
#include <string>

namespace emcomm {

enum class ErrorCode {
  UnknownToken,
  MissingSlot,
  ConflictingWeight,
  EmptyTaskClass,
  SteppedAfterDone,
  ShapeMismatch,
  NonFiniteLogits,
  NonNormalizedDistribution,
  ChannelTooNarrow,
  NonFiniteLogProb,
  BufferTooSmall,
  DegenerateMarginal,
  DegenerateDistances,
  EmptyTestSet,
  ConfigInvalid,
  MissingArtifact,
  CorruptCheckpoint,
};

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::MissingSlot: return "MissingSlot";
    case ErrorCode::ConflictingWeight: return "ConflictingWeight";
    case ErrorCode::EmptyTaskClass: return "EmptyTaskClass";
    case ErrorCode::SteppedAfterDone: return "SteppedAfterDone";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteLogits: return "NonFiniteLogits";
    case ErrorCode::NonNormalizedDistribution: return "NonNormalizedDistribution";
    case ErrorCode::ChannelTooNarrow: return "ChannelTooNarrow";
    case ErrorCode::NonFiniteLogProb: return "NonFiniteLogProb";
    case ErrorCode::BufferTooSmall: return "BufferTooSmall";
    case ErrorCode::DegenerateMarginal: return "DegenerateMarginal";
    case ErrorCode::DegenerateDistances: return "DegenerateDistances";
    case ErrorCode::EmptyTestSet: return "EmptyTestSet";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::MissingArtifact: return "MissingArtifact";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
  }
  return "Unknown";
}

// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace emcomm
