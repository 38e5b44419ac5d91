#pragma once

#include <stdexcept>
#include <string>

namespace perturbcert {

enum class ErrorCode {
  kInvalidArgument,
  kTanhRange,
  kReluBranch,
  kRankDeficientDownstream,
  kZeroGradient,
  kNonFiniteLoss,
  kDivergence,
  kSvdNonConvergence,
};

const char* to_string(ErrorCode code);

/// Base class for every error raised by the library. The code maps 1:1 onto
/// the C API status values.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what)
      : Error(ErrorCode::kInvalidArgument, what) {}
};

/// Tanh inversion requested for a value outside (-1, 1).
class TanhRangeError : public Error {
 public:
  explicit TanhRangeError(const std::string& what)
      : Error(ErrorCode::kTanhRange, what) {}
};

/// The ReLU identity branch cannot be used: a pre-activation that must be
/// strictly positive is not. The exact single-layer formula does not apply.
class ReluBranchError : public Error {
 public:
  explicit ReluBranchError(const std::string& what)
      : Error(ErrorCode::kReluBranch, what) {}
};

class RankDeficientDownstream : public Error {
 public:
  RankDeficientDownstream(const std::string& what, double residual)
      : Error(ErrorCode::kRankDeficientDownstream, what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

class ZeroGradientError : public Error {
 public:
  explicit ZeroGradientError(const std::string& what)
      : Error(ErrorCode::kZeroGradient, what) {}
};

class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss(const std::string& what, long iteration)
      : Error(ErrorCode::kNonFiniteLoss, what), iteration_(iteration) {}
  long iteration() const noexcept { return iteration_; }

 private:
  long iteration_;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long epoch)
      : Error(ErrorCode::kDivergence, what), epoch_(epoch) {}
  long epoch() const noexcept { return epoch_; }

 private:
  long epoch_;
};

class SvdError : public Error {
 public:
  SvdError(const std::string& what, double residual)
      : Error(ErrorCode::kSvdNonConvergence, what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

}  // namespace perturbcert
