#pragma once

#include <Eigen/Dense>
#include <span>
#include <string_view>

namespace perturbcert::linalg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Relative threshold used for effective-rank counting: sigma_i counts when
/// sigma_i > kRankTolerance * sigma_1.
inline constexpr double kRankTolerance = 1e-10;

/// Thin singular value decomposition a = u * diag(sigma) * vt.
///
/// u is rows x r, vt is r x cols with r = min(rows, cols). sigma is sorted
/// non-increasing. Each left singular vector is sign-normalised so that its
/// first entry of non-negligible magnitude is non-negative (vt rows are
/// flipped with it), which makes reports reproducible.
struct SvdResult {
  Matrix u;
  Vector sigma;
  Matrix vt;
  Index rank = 0;

  /// Absolute threshold that separated counted from discarded modes.
  double tolerance = 0.0;
};

/// Throws InvalidArgument if any entry is NaN or infinite.
void require_finite(const Matrix& a, std::string_view what);

/// Throws SvdError carrying the reconstruction residual when the
/// decomposition does not reproduce the input.
SvdResult svd(const Matrix& a);

/// Moore-Penrose pseudoinverse over the modes above the rank tolerance.
Matrix pinv(const Matrix& a);

struct TruncatedPinv {
  Matrix value;
  Index used_rank = 0;
  /// True when fewer than the requested k modes exceed the rank tolerance.
  bool truncated = false;
};

/// V_k Sigma_k^-1 U_k^T over the top-k modes. Requires 1 <= k <= min(rows, cols).
TruncatedPinv pinv_truncated(const Matrix& a, Index k);

/// Best rank-k approximation in Frobenius norm (Eckart-Young).
Matrix low_rank_approx(const Matrix& a, Index k);
Matrix low_rank_approx(const SvdResult& s, Index k);

double frobenius_norm(const Matrix& a);
double spectral_norm(const Matrix& a);

/// l_p norm of a flat vector; p may be +infinity. Throws for p < 1.
double vec_pnorm(std::span<const double> v, double p);

/// Orthogonal projector onto the span of the leading k left singular vectors.
Matrix left_projector(const SvdResult& s, Index k);
Matrix right_projector(const SvdResult& s, Index k);

}  // namespace perturbcert::linalg
