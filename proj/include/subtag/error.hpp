#pragma once

#include <stdexcept>
#include <string>

namespace subtag {

// Error categories map onto CLI exit codes: usage/config -> 1, data -> 2,
// runtime/numeric -> 3.
enum class ErrorKind { usage, config, data, runtime };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string category, const std::string &message)
      : std::runtime_error(message), kind_(kind), category_(std::move(category)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string &category() const noexcept { return category_; }

  int exit_code() const noexcept {
    switch (kind_) {
      case ErrorKind::usage:
      case ErrorKind::config:
        return 1;
      case ErrorKind::data:
        return 2;
      case ErrorKind::runtime:
        return 3;
    }
    return 3;
  }

 private:
  ErrorKind kind_;
  std::string category_;
};

struct UsageError : Error {
  explicit UsageError(const std::string &m) : Error(ErrorKind::usage, "usage", m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string &m) : Error(ErrorKind::config, "config", m) {}
};

struct ParseError : Error {
  ParseError(const std::string &m, std::size_t line)
      : Error(ErrorKind::data, "parse", "line " + std::to_string(line) + ": " + m), line_(line) {}
  explicit ParseError(const std::string &m) : Error(ErrorKind::data, "parse", m) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_ = 0;
};

struct EmptyCorpusError : Error {
  explicit EmptyCorpusError(const std::string &m) : Error(ErrorKind::data, "empty-corpus", m) {}
};

struct DataError : Error {
  explicit DataError(const std::string &m) : Error(ErrorKind::data, "data", m) {}
};

struct IoError : Error {
  explicit IoError(const std::string &m) : Error(ErrorKind::data, "io", m) {}
};

struct LoadError : Error {
  explicit LoadError(const std::string &m) : Error(ErrorKind::data, "load", m) {}
};

struct RangeError : Error {
  explicit RangeError(const std::string &m) : Error(ErrorKind::config, "range", m) {}
};

struct UndefinedRatioError : Error {
  explicit UndefinedRatioError(const std::string &m)
      : Error(ErrorKind::data, "undefined-ratio", m) {}
};

struct UndefinedEntropyError : Error {
  explicit UndefinedEntropyError(const std::string &m)
      : Error(ErrorKind::data, "undefined-entropy", m) {}
};

struct DivergenceError : Error {
  explicit DivergenceError(const std::string &m) : Error(ErrorKind::runtime, "divergence", m) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string &m) : Error(ErrorKind::runtime, "numeric", m) {}
};

struct TrainingError : Error {
  explicit TrainingError(const std::string &m) : Error(ErrorKind::runtime, "training", m) {}
};

struct InternalError : Error {
  explicit InternalError(const std::string &m) : Error(ErrorKind::runtime, "internal", m) {}
};

}  // namespace subtag
