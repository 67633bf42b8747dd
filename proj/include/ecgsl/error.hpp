#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ecgsl {

enum class ErrorCode {
  InvalidConfig,
  Data,
  Shape,
  Numeric,
  EmptyPeaks,
  Segmentation,
  InvalidDataset,
  EmptyClass,
  InvalidState,
  Manifest,
  Io,
  BadMagic,
  Version,
  Truncated,
  ShapeMismatch,
  StageOrder,
};

// Stable machine-readable identifier, e.g. "E_SHAPE".
std::string_view code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

}  // namespace ecgsl
