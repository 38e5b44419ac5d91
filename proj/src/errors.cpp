#include "perturbcert/errors.hpp"

namespace perturbcert {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kTanhRange: return "tanh_range";
    case ErrorCode::kReluBranch: return "relu_branch";
    case ErrorCode::kRankDeficientDownstream: return "rank_deficient_downstream";
    case ErrorCode::kZeroGradient: return "zero_gradient";
    case ErrorCode::kNonFiniteLoss: return "non_finite_loss";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kSvdNonConvergence: return "svd_non_convergence";
  }
  return "unknown";
}

}  // namespace perturbcert
