#ifndef SPARSEFORGE_ERRORS_HPP_
#define SPARSEFORGE_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace sparseforge {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite input to a scalar function.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyper-parameter or argument value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes that do not compose.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced during a forward/backward pass or an optimizer step.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Training loss became non-finite.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Broken internal assumption (should be unreachable).
class InternalError : public Error {
 public:
  using Error::Error;
};

/// Dataset ingestion failure. `kind()` tells the failure modes apart.
class DataError : public Error {
 public:
  enum class Kind {
    kMissingFile,
    kBadMagic,
    kTruncated,
    kBadDimensions,
    kCountMismatch,
    kBadLabel,
    kEmpty,
  };

  DataError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Model file (SPFG) read/write failure.
class FormatError : public Error {
 public:
  enum class Kind {
    kIo,
    kBadMagic,
    kUnsupportedVersion,
    kChecksumMismatch,
    kMalformed,
  };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace sparseforge

#endif  // SPARSEFORGE_ERRORS_HPP_
