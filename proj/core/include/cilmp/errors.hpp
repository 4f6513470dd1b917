#pragma once

#include <stdexcept>
#include <string>

namespace cilmp {

// Base for every error raised by the library. Subclasses let callers (the CLI
// in particular) map failures onto distinct exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class LabelError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class FrozenParameterError : public Error {
 public:
  using Error::Error;
};

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Non-finite values produced or consumed by a numerical routine.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

// Training diverged (NaN/Inf loss or gradients). Carries diagnostics.
class NumericalAbort : public Error {
 public:
  using Error::Error;
};

}  // namespace cilmp
