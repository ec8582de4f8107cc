#pragma once

#include <stdexcept>
#include <string>

namespace mhthfa {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of a function (x <= 0 for K, w <= 0 for a density...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Result not representable as a finite double; use the log-scale variant.
class OverflowError : public Error {
 public:
  using Error::Error;
};

class UnsupportedDimension : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// A matrix that must be symmetric positive definite is not.
class NonSpdError : public DomainError {
 public:
  using DomainError::DomainError;
};

class ConstraintViolation : public Error {
 public:
  using Error::Error;
};

/// Orthant probability too small to renormalize a truncated law.
class DegenerateTruncation : public Error {
 public:
  using Error::Error;
};

/// Every component density underflows for some observation.
class DegenerateLikelihood : public Error {
 public:
  using Error::Error;
};

class ComponentCollapse : public Error {
 public:
  using Error::Error;
};

class FitFailure : public Error {
 public:
  using Error::Error;
};

/// Malformed user input: files, CSV cells, model documents.
class InputError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public InputError {
 public:
  using InputError::InputError;
};

}  // namespace mhthfa
