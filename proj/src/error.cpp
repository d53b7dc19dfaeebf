#include "hjblab/error.hpp"

namespace hjblab {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Domain: return "domain error";
    case ErrorKind::Coefficient: return "coefficient error";
    case ErrorKind::Ellipticity: return "ellipticity violation";
    case ErrorKind::Cone: return "cone membership error";
    case ErrorKind::Dimension: return "dimension mismatch";
    case ErrorKind::IncompleteParams: return "incomplete parameters";
    case ErrorKind::Coverage: return "coverage error";
    case ErrorKind::InsufficientProbe: return "insufficient probe";
    case ErrorKind::StepSize: return "step-size error";
    case ErrorKind::BlowUp: return "blow-up";
    case ErrorKind::NonConvergence: return "non-convergence";
    case ErrorKind::EigenFailure: return "eigen failure";
    case ErrorKind::GridMismatch: return "grid mismatch";
    case ErrorKind::MissingSlice: return "missing slice";
    case ErrorKind::EmptyEstimate: return "empty estimate";
    case ErrorKind::Validation: return "validation error";
    case ErrorKind::Runtime: return "runtime error";
  }
  return "error";
}

}  // namespace hjblab
