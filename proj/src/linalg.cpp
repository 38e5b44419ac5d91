#include "perturbcert/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "perturbcert/errors.hpp"

namespace perturbcert::linalg {

void require_finite(const Matrix& a, std::string_view what) {
  if (!a.allFinite()) {
    throw InvalidArgument(std::string(what) + ": matrix has non-finite entries");
  }
}

namespace {

void check_rank_arg(const Matrix& a, Index k, const char* op) {
  const Index r = std::min(a.rows(), a.cols());
  if (k < 1 || k > r) {
    throw InvalidArgument(std::string(op) + ": k=" + std::to_string(k) +
                          " outside [1, " + std::to_string(r) + "]");
  }
}

}  // namespace

SvdResult svd(const Matrix& a) {
  require_finite(a, "svd");
  SvdResult out;
  const Index r = std::min(a.rows(), a.cols());
  if (r == 0) {
    out.u = Matrix::Zero(a.rows(), 0);
    out.sigma = Vector::Zero(0);
    out.vt = Matrix::Zero(0, a.cols());
    return out;
  }

  Eigen::JacobiSVD<Matrix> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  out.u = dec.matrixU();
  out.sigma = dec.singularValues();
  out.vt = dec.matrixV().transpose();

  for (Index j = 0; j < r; ++j) {
    const auto col = out.u.col(j);
    const double scale = col.cwiseAbs().maxCoeff();
    for (Index i = 0; i < col.size(); ++i) {
      if (std::abs(col(i)) > 1e-12 * scale) {
        if (col(i) < 0.0) {
          out.u.col(j) *= -1.0;
          out.vt.row(j) *= -1.0;
        }
        break;
      }
    }
  }

  const double s1 = out.sigma(0);
  out.tolerance = kRankTolerance * s1;
  out.rank = 0;
  if (s1 > 0.0) {
    for (Index i = 0; i < r; ++i) {
      if (out.sigma(i) > out.tolerance) ++out.rank;
    }
  }

  const Matrix recon = out.u * out.sigma.asDiagonal() * out.vt;
  const double residual = (recon - a).cwiseAbs().maxCoeff();
  if (!(residual <= 1e-10 * std::max(s1, std::numeric_limits<double>::min()))) {
    throw SvdError("svd: reconstruction residual " + std::to_string(residual) +
                       " exceeds tolerance",
                   residual);
  }
  return out;
}

Matrix pinv(const Matrix& a) {
  const SvdResult s = svd(a);
  Matrix out = Matrix::Zero(a.cols(), a.rows());
  for (Index i = 0; i < s.rank; ++i) {
    out.noalias() += s.vt.row(i).transpose() * (1.0 / s.sigma(i)) * s.u.col(i).transpose();
  }
  return out;
}

TruncatedPinv pinv_truncated(const Matrix& a, Index k) {
  check_rank_arg(a, k, "pinv_truncated");
  const SvdResult s = svd(a);
  TruncatedPinv out;
  out.used_rank = std::min(k, s.rank);
  out.truncated = s.rank < k;
  out.value = Matrix::Zero(a.cols(), a.rows());
  for (Index i = 0; i < out.used_rank; ++i) {
    out.value.noalias() +=
        s.vt.row(i).transpose() * (1.0 / s.sigma(i)) * s.u.col(i).transpose();
  }
  return out;
}

Matrix low_rank_approx(const SvdResult& s, Index k) {
  const Index r = s.sigma.size();
  if (k < 1 || k > r) {
    throw InvalidArgument("low_rank_approx: k=" + std::to_string(k) + " outside [1, " +
                          std::to_string(r) + "]");
  }
  return s.u.leftCols(k) * s.sigma.head(k).asDiagonal() * s.vt.topRows(k);
}

Matrix low_rank_approx(const Matrix& a, Index k) {
  check_rank_arg(a, k, "low_rank_approx");
  return low_rank_approx(svd(a), k);
}

double frobenius_norm(const Matrix& a) { return a.norm(); }

double spectral_norm(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  return svd(a).sigma(0);
}

double vec_pnorm(std::span<const double> v, double p) {
  if (!(p >= 1.0)) {
    throw InvalidArgument("vec_pnorm: p must be >= 1");
  }
  if (std::isinf(p)) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
  }
  if (p == 1.0) {
    double s = 0.0;
    for (double x : v) s += std::abs(x);
    return s;
  }
  if (p == 2.0) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  }
  // Scale by the max magnitude so large p does not overflow.
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  if (m == 0.0) return 0.0;
  double s = 0.0;
  for (double x : v) s += std::pow(std::abs(x) / m, p);
  return m * std::pow(s, 1.0 / p);
}

Matrix left_projector(const SvdResult& s, Index k) {
  const Matrix uk = s.u.leftCols(k);
  return uk * uk.transpose();
}

Matrix right_projector(const SvdResult& s, Index k) {
  const Matrix vk = s.vt.topRows(k).transpose();
  return vk * vk.transpose();
}

}  // namespace perturbcert::linalg
