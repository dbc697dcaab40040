#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace afflow {

/// Base class for all afflow errors. `stage` names the pipeline stage that
/// raised the error when it propagates out of a multi-stage driver.
class Error : public std::runtime_error {
 public:
  explicit Error(std::string msg) : std::runtime_error(std::move(msg)) {}
  std::string stage;
};

/// A stated hypothesis of an operation does not hold for the given input.
/// CLI exit code 2.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// An identity or bound that the construction guarantees failed to hold,
/// or a numerical kernel did not converge. CLI exit code 3.
class InternalError : public Error {
 public:
  using Error::Error;
};

class EigensolverFailure : public InternalError {
 public:
  EigensolverFailure(std::string msg, double residual)
      : InternalError(std::move(msg)), residual(residual) {}
  double residual;
};

class NearSingular : public PreconditionError {
 public:
  NearSingular(std::string msg, double sigma_min)
      : PreconditionError(std::move(msg)), sigma_min(sigma_min) {}
  double sigma_min;
};

class GapTooSmall : public PreconditionError {
 public:
  GapTooSmall(std::string msg, double offending_eigenvalue)
      : PreconditionError(std::move(msg)),
        offending_eigenvalue(offending_eigenvalue) {}
  double offending_eigenvalue;
};

class ContourHitsSpectrum : public PreconditionError {
 public:
  ContourHitsSpectrum(std::string msg, double resolvent_condition)
      : PreconditionError(std::move(msg)),
        resolvent_condition(resolvent_condition) {}
  double resolvent_condition;
};

class DriftTooLarge : public PreconditionError {
 public:
  DriftTooLarge(std::string msg, double measured)
      : PreconditionError(std::move(msg)), measured(measured) {}
  double measured;
};

class SpectralBandViolation : public PreconditionError {
 public:
  SpectralBandViolation(std::string msg, double offending_eigenvalue)
      : PreconditionError(std::move(msg)),
        offending_eigenvalue(offending_eigenvalue) {}
  double offending_eigenvalue;
};

class CocycleTooLarge : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

class PhaseUndefined : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

class WindowEmpty : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

class GroundDegenerate : public PreconditionError {
 public:
  GroundDegenerate(std::string msg, int degeneracy)
      : PreconditionError(std::move(msg)), degeneracy(degeneracy) {}
  int degeneracy;
};

class AmbiguousRotation : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

class DimensionMismatch : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

class BudgetExhausted : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

/// Raised when a bound that cannot fail under a satisfied precondition fails
/// anyway; always a bug or a broken hypothesis upstream.
class InternalBoundViolation : public InternalError {
 public:
  using InternalError::InternalError;
};

/// Runs `fn`, tagging any escaping afflow::Error with `stage` (outermost tag
/// wins only if none set yet).
template <typename Fn>
auto with_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (Error& e) {
    if (e.stage.empty()) e.stage = stage;
    throw;
  }
}

}  // namespace afflow
