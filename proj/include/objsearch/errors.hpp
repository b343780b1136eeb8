#pragma once

#include <chrono>
#include <stdexcept>
#include <string>
#include <vector>

namespace objsearch {

// Base for every error raised by the library. Callers that only need a
// message can catch std::runtime_error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A documented invariant of a domain type was violated (dimension mismatch,
// zero vector, mixed image ids in one aggregation).
class InvariantError : public Error {
 public:
  using Error::Error;
};

// Malformed caller input: bad annotation, mismatched image dimensions,
// template without placeholder, non-square crop for a remote encoder.
class InputError : public Error {
 public:
  using Error::Error;
};

// The instance has no pixels in the instance map.
class EmptyMaskError : public InputError {
 public:
  using InputError::InputError;
};

// Index / encoder configuration disagree (dimension, encoder id).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// The query cannot be answered as posed; carries the valid class set so
// front ends can show it.
class QueryError : public Error {
 public:
  QueryError(const std::string& what, std::vector<std::string> valid_classes)
      : Error(what), valid_classes_(std::move(valid_classes)) {}

  const std::vector<std::string>& valid_classes() const noexcept {
    return valid_classes_;
  }

 private:
  std::vector<std::string> valid_classes_;
};

// The index lacks data needed for the request (e.g. full-image embeddings).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// Remote encoder unreachable or misbehaving.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, int attempts, bool retryable,
                 std::chrono::milliseconds retry_after)
      : Error(what),
        attempts_(attempts),
        retryable_(retryable),
        retry_after_(retry_after) {}

  int attempts() const noexcept { return attempts_; }
  bool retryable() const noexcept { return retryable_; }
  std::chrono::milliseconds retry_after() const noexcept {
    return retry_after_;
  }

 private:
  int attempts_;
  bool retryable_;
  std::chrono::milliseconds retry_after_;
};

// On-disk data has the wrong magic, version or layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

// On-disk data is truncated or fails its checksum. `where` names the file or
// partition affected.
class CorruptionError : public FormatError {
 public:
  CorruptionError(const std::string& what, std::string where)
      : FormatError(what), where_(std::move(where)) {}

  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

class ChecksumError : public CorruptionError {
 public:
  using CorruptionError::CorruptionError;
};

}  // namespace objsearch
