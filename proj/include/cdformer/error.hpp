#pragma once

#include <stdexcept>
#include <string>

namespace cdformer {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kSuccess = 0,
  kUsage = 1,
  kNumeric = 2,
  kIo = 3,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Incompatible extents between operands.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what, ExitCode::kUsage) {}
};

// Invalid argument or configuration value.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, ExitCode::kUsage) {}
};

// NaN/Inf encountered, or a numeric check failed.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, ExitCode::kNumeric) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what, ExitCode::kIo) {}
};

// Content on disk is truncated or fails its digest.
class CorruptionError : public IoError {
 public:
  explicit CorruptionError(const std::string& what) : IoError(what) {}
};

}  // namespace cdformer
