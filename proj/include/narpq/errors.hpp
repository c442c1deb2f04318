#pragma once

#include <stdexcept>
#include <string>

namespace narpq {

// Root of every error this library throws. Each subclass maps onto one
// failure class that callers (and the CLI exit-code table) distinguish.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Raised when caption text exceeds the configured word cap.
class TruncationError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

// Raised when an optimizer step produces a non-finite loss or weight.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::string diagnostic)
      : Error(what), diagnostic_(std::move(diagnostic)) {}

  const std::string& diagnostic() const noexcept { return diagnostic_; }

 private:
  std::string diagnostic_;
};

}  // namespace narpq
