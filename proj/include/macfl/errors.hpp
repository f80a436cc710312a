#pragma once

#include <stdexcept>
#include <string>

namespace macfl {

/// Precondition violations on public operations.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed file contents (bad magic, bad header).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Files that parse but disagree with each other (e.g. image/label counts).
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a parameter vector picks up NaN/Inf during training.
class NumericDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs for which an operation is undefined (zero-norm cosine, p_s = 0 bound).
class DegenerateInput : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Configuration file errors; message names the offending key or field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace macfl
