#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pinnpipe {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SyntaxError : public Error {
 public:
  SyntaxError(std::size_t offset, const std::string& message)
      : Error("syntax error at offset " + std::to_string(offset) + ": " + message),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class UnknownSymbol : public Error {
 public:
  explicit UnknownSymbol(const std::string& name)
      : Error("unknown symbol: " + name), name_(name) {}
  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

class PdeFormatError : public Error {
 public:
  using Error::Error;
};

class ProviderUnavailable : public Error {
 public:
  using Error::Error;
};

class FixtureMissing : public Error {
 public:
  explicit FixtureMissing(const std::string& key)
      : Error("fixture missing for key " + key), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class AllParsesFailed : public Error {
 public:
  using Error::Error;
};

class EmptyCandidateSet : public Error {
 public:
  EmptyCandidateSet() : Error("candidate set is empty") {}
};

class UnknownArchitecture : public Error {
 public:
  explicit UnknownArchitecture(const std::string& name)
      : Error("unknown architecture: " + name) {}
};

class DegenerateVector : public Error {
 public:
  using Error::Error;
};

class TemplateMissing : public Error {
 public:
  using Error::Error;
};

class InterfaceNotExtractable : public Error {
 public:
  using Error::Error;
};

class ResidualBlockMissing : public Error {
 public:
  ResidualBlockMissing() : Error("residual block marker not found in loss module") {}
};

class PreconditionFailed : public Error {
 public:
  using Error::Error;
};

class UnsupportedPde : public Error {
 public:
  using Error::Error;
};

class DegenerateTrace : public Error {
 public:
  using Error::Error;
};

class WeightsInvalid : public Error {
 public:
  using Error::Error;
};

class ConfigInvalid : public Error {
 public:
  using Error::Error;
};

class ReplayMismatch : public Error {
 public:
  using Error::Error;
};

class DatasetMalformed : public Error {
 public:
  DatasetMalformed(std::size_t line, const std::string& message)
      : Error("dataset line " + std::to_string(line) + ": " + message), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class TraceFormatError : public Error {
 public:
  using Error::Error;
};

// A failure raised while executing a bundle. The text is what the feedback
// agent localizes.
class RuntimeFailure : public Error {
 public:
  using Error::Error;
};

}  // namespace pinnpipe
