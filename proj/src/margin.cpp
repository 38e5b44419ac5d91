#include "perturbcert/margin.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "perturbcert/errors.hpp"

namespace perturbcert {

MarginReport margin(const Vector& logits, Index t) {
  if (logits.size() < 2) {
    throw InvalidArgument("margin: need at least two classes");
  }
  if (t < 0 || t >= logits.size()) {
    throw InvalidArgument("margin: class index " + std::to_string(t) + " out of range");
  }
  MarginReport r;
  r.true_class = t;
  r.logits = logits;
  Index best = -1;
  for (Index i = 0; i < logits.size(); ++i) {
    if (i == t) continue;
    if (best < 0 || logits(i) > logits(best)) best = i;
  }
  r.runner_up = best;
  r.gamma = logits(t) - logits(best);
  return r;
}

BoundCheck margin_lipschitz_check(double gamma, double lipschitz, double delta_norm,
                                  double p) {
  if (!(p >= 1.0)) throw InvalidArgument("margin_lipschitz_check: p must be >= 1");
  if (!(lipschitz >= 0.0) || !(delta_norm >= 0.0)) {
    throw InvalidArgument("margin_lipschitz_check: L and the norm must be non-negative");
  }
  BoundCheck b;
  b.gamma = gamma;
  b.lipschitz = lipschitz;
  b.delta_norm = delta_norm;
  b.p = p;
  const double exponent = std::isinf(p) ? 1.0 : (p - 1.0) / p;
  b.rhs = std::pow(2.0, exponent) * lipschitz * delta_norm;
  b.satisfied = gamma <= b.rhs;
  return b;
}

Matrix preimage_difference(const Network& net, int n, const Matrix& y_tilde,
                           const Matrix& x) {
  net.check_layer(n);
  const Matrix y = forward(net, x);
  if (y_tilde.rows() != y.rows() || y_tilde.cols() != y.cols()) {
    throw InvalidArgument("preimage_difference: target shape does not match logits");
  }
  const Matrix z = net.weight(n) * upstream(net, n, x);
  Matrix out = Matrix::Zero(z.rows(), z.cols());

  std::vector<Index> cols;
  for (Index j = 0; j < y.cols(); ++j) {
    if (y_tilde.col(j) != y.col(j)) cols.push_back(j);
  }
  if (cols.empty()) return out;

  Matrix yt(y.rows(), static_cast<Index>(cols.size()));
  Matrix zr(z.rows(), static_cast<Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) {
    yt.col(c) = y_tilde.col(cols[c]);
    zr.col(c) = z.col(cols[c]);
  }
  const Matrix zs = downstream_inverse(net, n, yt, zr);
  for (std::size_t c = 0; c < cols.size(); ++c) {
    out.col(cols[c]) = zs.col(c) - zr.col(c);
  }
  return out;
}

double lipschitz_closed_form_single_layer(const Network& net, int n, const Vector& x) {
  net.check_layer(n);
  for (const auto& a : net.activations()) {
    if (a.kind == Activation::Kind::kLeakyRelu && a.alpha > 1.0) {
      throw InvalidArgument("closed-form Lipschitz constant needs 1-Lipschitz activations");
    }
  }
  const Matrix z = upstream(net, n, x);
  const int m = net.num_layers();
  if (n == m) return z.norm();
  Matrix prod = net.weight(m);
  for (int l = m - 1; l > n; --l) prod = prod * net.weight(l);
  return linalg::spectral_norm(prod) * z.norm();
}

}  // namespace perturbcert
