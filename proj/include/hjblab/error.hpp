#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hjblab {

enum class ErrorKind {
  Domain,             // point outside the domain descriptor
  Coefficient,        // non-finite coefficient evaluation
  Ellipticity,        // A(x) singular / not positive definite
  Cone,               // matrix point not in the SPD cone
  Dimension,          // size mismatch between operands
  IncompleteParams,   // a case needs parameters that were not supplied
  Coverage,           // probe set lacks a required shell
  InsufficientProbe,  // too few shells to judge a trend
  StepSize,           // explicit step violates the stability bound
  BlowUp,             // non-finite value produced by the stepper
  NonConvergence,     // iteration budget exhausted
  EigenFailure,       // principal eigenvector not positive
  GridMismatch,
  MissingSlice,       // PDE history does not cover a requested time
  EmptyEstimate,      // every Monte-Carlo path exited
  Validation,
  Runtime,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace hjblab
