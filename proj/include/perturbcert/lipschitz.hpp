#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "perturbcert/network.hpp"

namespace perturbcert {

/// Selection of weight entries. Entries are ordered layer by layer and
/// row-major within a layer whenever they are flattened.
class ParamSubset {
 public:
  static ParamSubset full(const Network& net);
  /// Every entry of the listed (1-based) layers.
  static ParamSubset layers(const Network& net, const std::vector<int>& layers);
  /// Individual (row, col) entries of one layer.
  static ParamSubset entries(const Network& net, int layer,
                             const std::vector<std::pair<Index, Index>>& entries);

  /// 0/1 mask per layer, shaped like the weight.
  const std::vector<Matrix>& masks() const { return masks_; }
  Index count() const { return count_; }
  bool touches(int layer) const;

  /// Selected entries of a per-layer list as one vector.
  Vector gather(const std::vector<Matrix>& per_layer) const;
  /// Inverse of gather; unselected entries are zero.
  std::vector<Matrix> scatter(const Vector& flat) const;

 private:
  explicit ParamSubset(std::vector<Matrix> masks);
  std::vector<Matrix> masks_;
  Index count_ = 0;
};

inline constexpr int kDefaultPowerIterations = 10;
inline constexpr double kDefaultProbeStep = 1e-3;
inline constexpr double kConvergenceRelTol = 1e-4;
inline constexpr int kMaxStepHalvings = 6;
inline constexpr int kMaxRestarts = 5;

struct LipschitzEstimate {
  double sigma_hat = 0.0;
  int iterations = 0;
  /// Probe step in use at the end (after any halving).
  double epsilon = 0.0;
  /// ||u|| after every iteration; sigma_hat is the last entry.
  std::vector<double> trace;
  bool converged = false;
  /// Some probe pair straddled an activation kink even after halving the step.
  bool pattern_unstable = false;
  int restarts = 0;
};

/// Finite-difference power iteration for the largest singular value of the
/// parameter Jacobian of the logits at x, restricted to `subset`.
///
/// Each iteration takes a central difference along the current unit direction
/// v (the Jacobian-vector product u), back-propagates u at the unperturbed
/// weights (the vector-Jacobian product g), masks g to the subset and sets
/// v = g / ||g||. The network passed in is never modified; probes work on
/// private copies. A vanishing g restarts from a fresh random direction, at
/// most kMaxRestarts times, before ZeroGradientError is thrown.
LipschitzEstimate estimate_lipschitz(const Network& net, const Vector& x,
                                     const ParamSubset& subset,
                                     int iterations = kDefaultPowerIterations,
                                     double epsilon = kDefaultProbeStep,
                                     std::uint64_t seed = 0);

inline constexpr Index kJacobianOracleCap = 20000;

/// Dense c x T Jacobian of the logits at x with respect to the selected
/// entries, by central differences with step 1e-6 * max(1, |theta_i|).
Matrix parameter_jacobian_fd(const Network& net, const Vector& x, const ParamSubset& subset);

/// SVD of parameter_jacobian_fd. Throws InvalidArgument above kJacobianOracleCap.
linalg::SvdResult jacobian_oracle(const Network& net, const Vector& x,
                                  const ParamSubset& subset);

nlohmann::json to_json(const LipschitzEstimate& e);

}  // namespace perturbcert
