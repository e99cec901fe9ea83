#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace speedvae {

enum class ErrorCode {
  NotPositiveDefinite,
  DimensionMismatch,
  ShapeMismatch,
  NonScalarOutput,
  NonFiniteGradient,
  DivergentTrajectory,
  SingularJacobian,
  UnsupportedLikelihood,
  NonFiniteLoss,
  DegenerateProposal,
  ConfigError,
  IoError,
  InvalidArgument,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void raise(ErrorCode code, const std::string& what);

}  // namespace speedvae
