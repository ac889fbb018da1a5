#pragma once

#include <stdexcept>
#include <string>

namespace rapnet {

/// Broad failure category. The CLI maps these onto exit codes.
enum class ErrorKind {
  kDimension,
  kDomain,
  kContract,
  kNumeric,
  kIngest,
  kFormat,
  kClustering,
  kGeneration,
  kEvaluation,
  kConfig,
  kIo,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what)
      : Error(ErrorKind::kDimension, what) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what)
      : Error(ErrorKind::kDomain, what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what)
      : Error(ErrorKind::kContract, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(ErrorKind::kNumeric, what) {}
};

class IngestError : public Error {
 public:
  explicit IngestError(const std::string& what)
      : Error(ErrorKind::kIngest, what) {}
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(ErrorKind::kFormat,
              what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ClusteringError : public Error {
 public:
  explicit ClusteringError(const std::string& what)
      : Error(ErrorKind::kClustering, what) {}
};

class GenerationError : public Error {
 public:
  explicit GenerationError(const std::string& what)
      : Error(ErrorKind::kGeneration, what) {}
};

class EvaluationError : public Error {
 public:
  explicit EvaluationError(const std::string& what)
      : Error(ErrorKind::kEvaluation, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorKind::kConfig, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};

}  // namespace rapnet
