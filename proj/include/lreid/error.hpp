#pragma once

#include <stdexcept>
#include <string>

namespace lreid {

// Base of every error thrown by the library. The concrete type names the
// failure category; the CLI maps categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class LabelError : public Error { using Error::Error; };
class DegenerateInputError : public Error { using Error::Error; };
class StateError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class ProtocolError : public Error { using Error::Error; };
class IntegrityError : public Error { using Error::Error; };
class BatchCompositionError : public Error { using Error::Error; };

}  // namespace lreid
