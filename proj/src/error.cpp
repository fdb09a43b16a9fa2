// SPDX-License-Identifier: Apache-2.0
#include "decap/error.hpp"

namespace decap {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kZeroVector: return "ZeroVector";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kEmptyMemory: return "EmptyMemory";
    case ErrorCode::kDegenerateCombination: return "DegenerateCombination";
    case ErrorCode::kEncoderFailure: return "EncoderFailure";
    case ErrorCode::kEmptyCorpus: return "EmptyCorpus";
    case ErrorCode::kIo: return "Io";
    case ErrorCode::kBadMagic: return "BadMagic";
    case ErrorCode::kVersionUnsupported: return "VersionUnsupported";
    case ErrorCode::kTruncated: return "Truncated";
    case ErrorCode::kKOutOfRange: return "KOutOfRange";
    case ErrorCode::kUnknownToken: return "UnknownToken";
    case ErrorCode::kSequenceTooLong: return "SequenceTooLong";
    case ErrorCode::kUnparseableCaption: return "UnparseableCaption";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kEmptyHypothesis: return "EmptyHypothesis";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kCorruptData: return "CorruptData";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& detail) : Error(code, detail, code) {}

Error::Error(ErrorCode code, const std::string& detail, ErrorCode cause)
    : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code), cause_(cause) {}

}  // namespace decap
