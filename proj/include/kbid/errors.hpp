#pragma once

#include <stdexcept>
#include <string>

namespace kbid {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value lies outside the domain an operation accepts (hyperparameters
/// outside [0, inf) x [0, 1], confidence levels outside (0, 1), ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

class StabilityError : public Error {
 public:
  using Error::Error;
};

class SingularRegressorError : public Error {
 public:
  using Error::Error;
};

class DegenerateNoiseError : public Error {
 public:
  using Error::Error;
};

/// Requested a closed-form result for a kernel family that has none.
class UnsupportedFamilyError : public Error {
 public:
  using Error::Error;
};

/// No grid-aligned rectangle carries the requested posterior mass.
class CoverageInfeasibleError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace kbid
