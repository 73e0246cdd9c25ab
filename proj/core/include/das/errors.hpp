#pragma once

#include <stdexcept>
#include <string>

namespace das {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed input file (JSON config, spec, checkpoint, CSV).
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(what) {}
};

/// Inputs that parse but violate a contract: shape mismatches,
/// incompatible config/checkpoint pairs, out-of-range arguments.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(what) {}
};

/// API misuse: calling phases out of order, backward on a tensor that is
/// not on the tape, reading rewards before they are filled.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(what) {}
};

/// A NaN or infinity surfaced during training or validation. The search
/// aborts rather than resampling.
class NumericAbortError : public Error {
 public:
  explicit NumericAbortError(const std::string& what) : Error(what) {}
};

/// Synthetic-benchmark generation failed (e.g. pretraining did not reach
/// the accuracy threshold within budget). Retry with a different seed.
class GenerationError : public Error {
 public:
  explicit GenerationError(const std::string& what) : Error(what) {}
};

}  // namespace das
