#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace jointfit {

// Base class for every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed caller input: dimension mismatches, invalid configuration,
// data that violates a documented invariant.
class InvalidInputError : public Error {
 public:
  using Error::Error;
};

// Numerical domain violation (non-SPD matrix, failed Cholesky, non-finite
// value where a finite one is required).
class NumericalDomainError : public Error {
 public:
  using Error::Error;
};

// An observed event time has no jump in the step hazard.
class InconsistentHazardError : public Error {
 public:
  using Error::Error;
};

// Risk-set denominator empty or nonpositive in the hazard update.
class DegenerateRiskSetError : public Error {
 public:
  using Error::Error;
};

// An inner optimizer hit its iteration cap; carries the last iterate.
class OptimizationFailureError : public Error {
 public:
  OptimizationFailureError(const std::string& what, Eigen::VectorXd iterate)
      : Error(what), last_iterate(std::move(iterate)) {}
  Eigen::VectorXd last_iterate;
};

// A condition the algorithms guarantee by construction failed anyway
// (e.g. the M-step objective decreased: the gradient is broken).
class InternalError : public Error {
 public:
  using Error::Error;
};

// Efficient information matrix numerically singular; lists the offending
// directions in stacked-parameter indices.
class SingularInformationError : public Error {
 public:
  SingularInformationError(const std::string& what,
                           std::vector<std::string> directions)
      : Error(what), near_null_directions(std::move(directions)) {}
  std::vector<std::string> near_null_directions;
};

// Structured CSV / file error with source location.
class IoError : public Error {
 public:
  IoError(const std::string& what, std::string file_, long row_ = -1,
          std::string column_ = "")
      : Error(what), file(std::move(file_)), row(row_),
        column(std::move(column_)) {}
  std::string file;
  long row;  // 1-based line number including the header, -1 if n/a
  std::string column;
};

}  // namespace jointfit
