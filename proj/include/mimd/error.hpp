#pragma once

#include <stdexcept>
#include <string>

namespace mimd {

/// Tensor shape incompatibility (elementwise, matmul, concat, ...).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid model/train/search configuration or CLI usage. Maps to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input data violating a precondition (empty masks, unmapped CDR, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Degenerate statistical input (zero variance with different means, ...).
class StatsError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Binary container problems. `kind()` distinguishes the failure.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, BadVersion, Truncated, DimOverflow, BadDType, Io };

  FormatError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace mimd
