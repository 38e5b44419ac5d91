#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "perturbcert/network.hpp"

namespace perturbcert {

struct IdentityOp {};

/// Magnitude pruning: zero the ceil(rho * T) smallest-magnitude entries among
/// the T selected ones, flattened jointly over the scope.
struct PruneOp {
  double rho = 0.0;
};

/// Affine quantize-dequantize. In symmetric mode the scale is recomputed per
/// layer as max|W| / (2^(b-1) - 1) and `scale` / `zero_point` are ignored.
struct QuantizeOp {
  int bits = 8;
  double scale = 1.0;
  long zero_point = 0;
  bool symmetric = true;
};

struct LowRankOp {
  int layer = 1;
  Index k = 1;
};

/// Tagged compression transformation. Syntax accepted by parse():
///   identity
///   prune:0.2[,layers=1|2]
///   quant:b=8,sym[,layers=...]     quant:b=8,s=0.05,z=128[,layers=...]
///   lowrank:layer=5,k=8
/// An empty scope means every layer.
struct CompressionOp {
  std::variant<IdentityOp, PruneOp, QuantizeOp, LowRankOp> kind;
  std::vector<int> scope;

  static CompressionOp parse(const std::string& text);
  std::string to_string() const;
  /// Layers the op writes to, resolved against a network.
  std::vector<int> affected_layers(const Network& net) const;
};

struct Compressed {
  Network net;
  /// ||theta - g(theta)||_2 over all parameters.
  double delta_norm = 0.0;
};

Compressed prune(const Network& net, double rho, const std::vector<int>& scope = {});
Compressed quantize(const Network& net, const QuantizeOp& op,
                    const std::vector<int>& scope = {});
Compressed apply_low_rank(const Network& net, int layer, Index k);
Compressed apply(const Network& net, const CompressionOp& op);

/// Quantize-dequantize of one matrix. Symmetric mode with an all-zero matrix
/// returns it unchanged.
Matrix quantize_matrix(const Matrix& w, const QuantizeOp& op);

/// Reverse-mode derivative of W -> W_k (rank-k truncation): given G = dL/dW_k
/// returns dL/dW. Modes with sigma_i == sigma_j across the cut make the map
/// non-differentiable; their denominators are floored at 1e-12 * sigma_1^2.
Matrix low_rank_backward(const Matrix& w, Index k, const Matrix& grad_wk);

struct LowRankMarginAnalysis {
  double m0 = 0.0;
  std::vector<Index> ks;
  /// Singular-sum form sum_{i>k} sigma_i (d^T u_i)(v_i^T z).
  std::vector<double> s_k;
  /// Direct evaluation d^T (W - W_k) z.
  std::vector<double> s_k_direct;
  std::vector<bool> flip_predicted;
  std::vector<double> input_residual_norm;   // ||(I - P_{V_k}) z||
  std::vector<double> output_residual_norm;  // ||(I - P_{U_k}) d||
  /// "top2_pair" when t and p are the two largest logits of W z (in that
  /// order), so s_k > m0 means the argmax leaves t; otherwise "pairwise" and
  /// the prediction only concerns the order of t and p.
  std::string prediction_scope;
};

/// Margin change of the pair (t, p) when W is truncated to rank k, with
/// d = e_t - e_p and m0 = d^T W z.
LowRankMarginAnalysis low_rank_margin_analysis(const Matrix& w, const Vector& z, Index t,
                                               Index p, const std::vector<Index>& ks);

/// Normalised output energy E(A, z) = ||A z||^2 / (||A||_F^2 ||z||^2) of the
/// rank-k part and the tail of W. Each part is reported against its own
/// Frobenius norm and against ||W||_F. With a direction, ||A z||^2 is replaced
/// by <direction, A z>^2.
struct EnergySplit {
  double retained_own = 0.0;
  double tail_own = 0.0;
  double retained_full = 0.0;
  double tail_full = 0.0;
  double total = 0.0;  // E(W, z)
  double retained_sq = 0.0;
  double tail_sq = 0.0;
  double total_sq = 0.0;
  bool directional = false;
};

EnergySplit energy_split(const Matrix& w, const Vector& z, Index k,
                         const std::optional<Vector>& direction = std::nullopt);

}  // namespace perturbcert
