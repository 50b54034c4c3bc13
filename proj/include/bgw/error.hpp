#pragma once

#include <stdexcept>
#include <string>

namespace bgw {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not fit the operation.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// A covariance block is not symmetric or its smallest eigenvalue is below the floor.
class SingularBlockError : public Error {
public:
  using Error::Error;
};

/// The model violates a structural assumption (primitivity, supercriticality, invertible covariances).
class AssumptionError : public Error {
public:
  using Error::Error;
};

class NotPrimitiveError : public AssumptionError {
public:
  using AssumptionError::AssumptionError;
};

class ConvergenceError : public Error {
public:
  using Error::Error;
};

/// Population grew past the configured cap or past the 64-bit range.
class PopulationOverflow : public Error {
public:
  using Error::Error;
};

/// The trajectory was recorded at a coarser level than the estimator needs.
class ObservationLevelError : public Error {
public:
  using Error::Error;
};

/// Malformed model, trajectory, plan or config input.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Argument outside the mathematical domain of a function.
class DomainError : public Error {
public:
  using Error::Error;
};

} // namespace bgw
