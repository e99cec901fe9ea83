#include "speedvae/error.hpp"

namespace speedvae {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonScalarOutput: return "NonScalarOutput";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::DivergentTrajectory: return "DivergentTrajectory";
    case ErrorCode::SingularJacobian: return "SingularJacobian";
    case ErrorCode::UnsupportedLikelihood: return "UnsupportedLikelihood";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::DegenerateProposal: return "DegenerateProposal";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

void raise(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace speedvae
