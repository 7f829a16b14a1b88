#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace currseq {

// Base of every error raised by the library. The CLI maps subclasses onto
// exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidUtterance : public Error {
 public:
  using Error::Error;
};

class CorpusDecodeError : public Error {
 public:
  CorpusDecodeError(std::size_t line, const std::string& what)
      : Error("corpus decode error at line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class InsufficientPairs : public Error {
 public:
  InsufficientPairs(std::size_t have, std::size_t want, const std::string& pool = {})
      : Error("insufficient pairs" + (pool.empty() ? std::string() : " in " + pool + " pool") +
              ": have " + std::to_string(have) + ", want " + std::to_string(want)),
        have_(have),
        want_(want) {}
  std::size_t have() const noexcept { return have_; }
  std::size_t want() const noexcept { return want_; }

 private:
  std::size_t have_;
  std::size_t want_;
};

class UnknownId : public Error {
 public:
  explicit UnknownId(std::int64_t id)
      : Error("token id " + std::to_string(id) + " is outside the vocabulary"), id_(id) {}
  std::int64_t id() const noexcept { return id_; }

 private:
  std::int64_t id_;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// A batch that cannot be scored (no predicted positions, inconsistent shapes).
class InvalidBatch : public Error {
 public:
  using Error::Error;
};

class EmptyValidationSet : public Error {
 public:
  EmptyValidationSet() : Error("validation pool is empty") {}
};

class EmptyCell : public Error {
 public:
  EmptyCell(std::size_t set_size, int epochs)
      : Error("no surviving runs in grid cell (size " + std::to_string(set_size) + ", epochs " +
              std::to_string(epochs) + ")"),
        set_size_(set_size),
        epochs_(epochs) {}
  std::size_t set_size() const noexcept { return set_size_; }
  int epochs() const noexcept { return epochs_; }

 private:
  std::size_t set_size_;
  int epochs_;
};

// Configuration problems; `key` names the offending plan or config entry.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error("invalid config key '" + key + "': " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace currseq
