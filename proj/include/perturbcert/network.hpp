#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "perturbcert/linalg.hpp"

namespace perturbcert {

using linalg::Index;
using linalg::Matrix;
using linalg::Vector;

/// Elementwise nonlinearity applied after every layer except the last.
struct Activation {
  enum class Kind { kIdentity, kLeakyRelu, kTanh, kRelu };

  Kind kind = Kind::kIdentity;
  double alpha = 0.0;  // LeakyReLU negative slope, > 0

  static Activation identity() { return {Kind::kIdentity, 0.0}; }
  static Activation leaky_relu(double alpha);
  static Activation tanh() { return {Kind::kTanh, 0.0}; }
  static Activation relu() { return {Kind::kRelu, 0.0}; }

  /// "identity", "tanh", "relu", "leaky_relu:0.1"
  static Activation parse(const std::string& text);
  std::string to_string() const;

  /// Piecewise-linear kinds have a sign pattern that changes the local map.
  bool piecewise_linear() const { return kind == Kind::kLeakyRelu || kind == Kind::kRelu; }

  bool operator==(const Activation&) const = default;
};

Matrix activation_apply(const Activation& act, const Matrix& v);

/// Exact inverse on the valid domain. Tanh requires |v| < 1 (TanhRangeError),
/// ReLU requires v > 0 elementwise (ReluBranchError). Tanh inputs are clamped
/// to (-1 + 1e-12, 1 - 1e-12) before atanh.
Matrix activation_invert(const Activation& act, const Matrix& v);

/// Derivative evaluated at pre-activation z. At the ReLU/LeakyReLU kink the
/// positive-branch slope is used.
Matrix activation_derivative(const Activation& act, const Matrix& z);

/// Bias-free feedforward network: Z_l = act(W_l Z_{l-1}) for l < M and
/// logits = W_M Z_{M-1}. Immutable after construction.
///
/// Layer indices in this API are 1-based, matching the usual W_1..W_M naming.
class Network {
 public:
  /// activations.size() must equal weights.size() - 1. Validates shapes and
  /// finiteness; throws InvalidArgument.
  Network(std::vector<Matrix> weights, std::vector<Activation> activations);

  int num_layers() const { return static_cast<int>(weights_.size()); }
  Index input_dim() const { return weights_.front().cols(); }
  Index output_dim() const { return weights_.back().rows(); }
  /// d_0, d_1, ..., d_M
  std::vector<Index> dims() const;

  const Matrix& weight(int layer) const;
  const std::vector<Matrix>& weights() const { return weights_; }
  /// Activation following layer `layer` (1 <= layer < M).
  const Activation& activation(int layer) const;
  const std::vector<Activation>& activations() const { return activations_; }

  Index parameter_count() const;

  Network with_weight(int layer, Matrix w) const;
  Network with_weights(std::vector<Matrix> ws) const;

  /// Throws InvalidArgument unless 1 <= layer <= M.
  void check_layer(int layer) const;

 private:
  std::vector<Matrix> weights_;
  std::vector<Activation> activations_;
};

/// Logits c x s for inputs d x s.
Matrix forward(const Network& net, const Matrix& x);

/// Z_{n-1} = h_{1:n-1}(x); n = 1 returns x.
Matrix upstream(const Network& net, int n, const Matrix& x);

/// h_{n:M}(z): applies act, W_{n+1}, ..., act, W_M. n = M returns z.
Matrix downstream(const Network& net, int n, const Matrix& z);

/// Returns Z* with downstream(net, n, Z*) = y_target.
///
/// Inversion walks backwards from the logits. A linear step with a square
/// invertible weight uses the exact inverse; a wide weight uses the
/// minimum-norm correction anchored at the reference, z_ref + W^+ (y - W z_ref),
/// so that inverting the reference output reproduces the reference. The
/// reference for every intermediate layer is obtained by pushing z_reference
/// forward. Throws TanhRangeError, ReluBranchError, RankDeficientDownstream.
Matrix downstream_inverse(const Network& net, int n, const Matrix& y_target,
                          const Matrix& z_reference);

/// Values cached during a forward pass, used by reverse-mode differentiation.
struct ForwardTrace {
  std::vector<Matrix> inputs;   // Z_0 .. Z_{M-1}, inputs[l-1] feeds layer l
  std::vector<Matrix> preacts;  // W_l Z_{l-1} for l = 1..M; last is the logits
  const Matrix& logits() const { return preacts.back(); }
};

ForwardTrace forward_trace(const Network& net, const Matrix& x);

/// Reverse-mode pass: given dL/dlogits (c x s) returns dL/dW_l for every layer.
std::vector<Matrix> backward(const Network& net, const ForwardTrace& trace,
                             const Matrix& dlogits);

/// Same, additionally returning dL/dx.
std::vector<Matrix> backward(const Network& net, const ForwardTrace& trace,
                             const Matrix& dlogits, Matrix* dinput);

std::vector<Index> argmax_columns(const Matrix& logits);

enum class InitScheme { kLecunNormal, kHeNormal, kUniformFanIn };

/// Random network with the given dims d_0..d_M and one activation kind for
/// every hidden layer.
Network init_network(const std::vector<Index>& dims, const Activation& hidden,
                     std::uint64_t seed, InitScheme scheme = InitScheme::kLecunNormal);

/// {"dims":[...], "activations":[...], "weights":[[row-major], ...]}.
/// Doubles are written with 17 significant digits, so the round trip is exact.
nlohmann::json network_to_json(const Network& net);
Network network_from_json(const nlohmann::json& doc);

}  // namespace perturbcert
