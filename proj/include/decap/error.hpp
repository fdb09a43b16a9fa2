// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace decap {

enum class ErrorCode {
  kInvalidArgument,
  kZeroVector,
  kDimensionMismatch,
  kEmptyInput,
  kEmptyMemory,
  kDegenerateCombination,
  kEncoderFailure,
  kEmptyCorpus,
  kIo,
  kBadMagic,
  kVersionUnsupported,
  kTruncated,
  kKOutOfRange,
  kUnknownToken,
  kSequenceTooLong,
  kUnparseableCaption,
  kLengthMismatch,
  kEmptyHypothesis,
  kNonFinite,
  kCorruptData,
};

std::string_view to_string(ErrorCode code);

/// Every failure in the library is reported through this type; `code()`
/// identifies the failure class, `what()` carries the detail.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail);
  /// Wraps a lower-level failure; `cause()` keeps its code.
  Error(ErrorCode code, const std::string& detail, ErrorCode cause);

  ErrorCode code() const noexcept { return code_; }
  /// Root failure class; equals `code()` unless the error wraps another.
  ErrorCode cause() const noexcept { return cause_; }

 private:
  ErrorCode code_;
  ErrorCode cause_;
};

}  // namespace decap
