#pragma once

#include <stdexcept>
#include <string>

namespace tp2m {

// Failure categories. The CLI maps each one to a distinct exit code.
enum class ErrorCategory {
  kContract = 1,   // caller broke a precondition (shapes, counts, ranges)
  kIo = 3,         // missing or unreadable file
  kConfig = 4,     // malformed configuration or input file contents
  kNumerical = 5,  // NaN/Inf, degenerate output, failed verification
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class ContractViolation : public Error {
 public:
  explicit ContractViolation(const std::string& what)
      : Error(ErrorCategory::kContract, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCategory::kIo, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorCategory::kConfig, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what)
      : Error(ErrorCategory::kNumerical, what) {}
};

}  // namespace tp2m
