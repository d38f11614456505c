#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace knfu {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or mismatched arguments (shapes, sizes, ranges).
class InputError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared during a forward pass.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::size_t layer)
      : Error(what), layer_(layer) {}
  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

/// Binary dataset decoding failure; carries the offending byte offset.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

/// Configuration validation failure; `field()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// An experiment phase failed; wraps the original message with its context.
class PhaseError : public Error {
 public:
  PhaseError(std::size_t round, std::string phase, const std::string& what)
      : Error("round " + std::to_string(round) + ", " + phase + ": " + what),
        round_(round),
        phase_(std::move(phase)) {}
  std::size_t round() const noexcept { return round_; }
  const std::string& phase() const noexcept { return phase_; }

 private:
  std::size_t round_;
  std::string phase_;
};

}  // namespace knfu
