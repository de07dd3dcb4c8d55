#pragma once

#include <stdexcept>
#include <string>

namespace revpf {

// Base for every error raised by the library. `exit_code()` is the process
// status the CLI maps the error to.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

// Argument outside the mathematical domain (non-positive input, share, ...).
class DomainError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

// Parameter value the parametric forms do not support (CES sigma in {0, 1}).
class UnsupportedParameterError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

// Bad argument combination (unknown input name, kind mismatch, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

// Malformed panel file, config or JSON document.
class FormatError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

// Numerical solver failure (non-convergence, bracket failure).
class SolverError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

// Pricing fixed point failed for a specific firm-period.
class SimulationError : public SolverError {
 public:
  SimulationError(const std::string& what, long long firm, int period)
      : SolverError(what), firm_(firm), period_(period) {}
  long long firm() const noexcept { return firm_; }
  int period() const noexcept { return period_; }

 private:
  long long firm_;
  int period_;
};

class EstimationError : public SolverError {
 public:
  using SolverError::SolverError;
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

}  // namespace revpf
