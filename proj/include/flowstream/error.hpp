#pragma once

#include <stdexcept>
#include <string>

namespace flowstream {

enum class ErrorCode {
  kDimensionMismatch,
  kMalformedDataset,
  kEmptyInput,
  kInvalidArgument,
  kVersionMismatch,
  kCorruptFile,
  kIo,
  kNonFiniteLoss,
  kGenerationFailed,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimensionMismatch: return "dimension mismatch";
    case ErrorCode::kMalformedDataset: return "malformed dataset";
    case ErrorCode::kEmptyInput: return "empty input";
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kVersionMismatch: return "version mismatch";
    case ErrorCode::kCorruptFile: return "corrupt file";
    case ErrorCode::kIo: return "i/o error";
    case ErrorCode::kNonFiniteLoss: return "non-finite loss";
    case ErrorCode::kGenerationFailed: return "generation failed";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) throw Error(code, what);
}

}  // namespace flowstream
