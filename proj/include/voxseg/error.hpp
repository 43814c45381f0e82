#pragma once

#include <stdexcept>
#include <string>

namespace voxseg {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ParameterError : public Error { using Error::Error; };
class CoverageError : public Error { using Error::Error; };
class DegenerateInputError : public Error { using Error::Error; };
class InputError : public Error { using Error::Error; };
class StateError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class UndefinedMetricError : public Error { using Error::Error; };
class SpecError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };

// File-level failures. The CLI maps all of these to the I/O exit code.
class IoError : public Error { using Error::Error; };
class MissingFileError : public IoError { using IoError::IoError; };
class FormatError : public IoError { using IoError::IoError; };
class LengthMismatchError : public IoError { using IoError::IoError; };
class NonFiniteError : public IoError { using IoError::IoError; };
class UnsupportedDtypeError : public IoError { using IoError::IoError; };

}  // namespace voxseg
