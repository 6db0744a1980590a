#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace wpclip {

// Root of the library's exception hierarchy. The CLI maps InputError and
// ConfigError (and their subclasses) to exit code 1, everything else to 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside an operation's mathematical domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Bad user-supplied input: undecodable image, empty prompt, malformed file.
class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Encoder produced something unusable (non-finite activations etc).
class BackendError : public Error {
 public:
  using Error::Error;
};

// Raised when a judge response cannot be turned into a verdict. Keeps the raw
// response for the run log.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::string raw)
      : Error(what), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

// One offending row of a manifest; row numbers are 1-based data rows.
struct RowIssue {
  std::size_t row = 0;
  std::string message;
};

class ValidationError : public InputError {
 public:
  ValidationError(const std::string& source, std::vector<RowIssue> issues);
  const std::vector<RowIssue>& issues() const noexcept { return issues_; }

 private:
  std::vector<RowIssue> issues_;
};

}  // namespace wpclip
