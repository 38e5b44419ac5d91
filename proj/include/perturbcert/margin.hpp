#pragma once

#include "perturbcert/network.hpp"

namespace perturbcert {

struct MarginReport {
  Index true_class = 0;
  /// Largest logit among the other classes; lowest index wins ties.
  Index runner_up = 0;
  double gamma = 0.0;
  Vector logits;
};

/// gamma = logits[t] - max_{i != t} logits[i]. Requires at least two classes.
MarginReport margin(const Vector& logits, Index t);

struct BoundCheck {
  double gamma = 0.0;
  double lipschitz = 0.0;
  double delta_norm = 0.0;
  double p = 2.0;
  /// 2^((p-1)/p) * lipschitz * delta_norm
  double rhs = 0.0;
  /// gamma <= rhs. false certifies that the perturbation cannot flip the class.
  bool satisfied = true;
};

/// p may be +infinity (factor 2). Throws InvalidArgument for p < 1 or negative
/// L / delta_norm.
BoundCheck margin_lipschitz_check(double gamma, double lipschitz, double delta_norm,
                                  double p);

/// Change of the layer-n input needed to move the logits of x from their
/// current value to y_tilde: h^-1(y_tilde) - h^-1(y) column by column.
///
/// The current layer-n input W_n * upstream(n, x) serves as h^-1(y), and the
/// inverse of y_tilde is anchored at it. Columns where y_tilde equals the
/// current logits bit for bit are returned as exact zeros and are never
/// inverted, so their activation patterns do not matter.
Matrix preimage_difference(const Network& net, int n, const Matrix& y_tilde,
                           const Matrix& x);

/// ||W_M ... W_{n+1}||_2 * ||upstream(n, x)||_2 for a single column x.
///
/// The empty product (n = M) is the identity. Valid for 1-Lipschitz hidden
/// activations; LeakyReLU with slope above 1 is rejected.
double lipschitz_closed_form_single_layer(const Network& net, int n, const Vector& x);

}  // namespace perturbcert
