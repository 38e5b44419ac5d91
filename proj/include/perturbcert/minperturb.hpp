#pragma once

#include <limits>
#include <string>
#include <vector>

#include "perturbcert/margin.hpp"
#include "perturbcert/network.hpp"
#include "perturbcert/optim.hpp"

namespace perturbcert {

inline constexpr double kDefaultFlipEpsilon = 1e-3;
/// Constraint residual below which a closed-form result counts as exact.
inline constexpr double kFeasibilityTolerance = 1e-6;

struct FlipTarget {
  Matrix y_original;
  Matrix y_tilde;
  std::vector<Index> modified_columns;
  /// Parallel to modified_columns.
  std::vector<Index> original_class;
  std::vector<Index> target_class;
};

/// Moves the logits of every listed column to
/// y + (gamma/2 + epsilon)(e_p - e_t), which leaves the new margin at -2 epsilon.
/// Columns must currently be classified as their label with gamma > 0.
FlipTarget make_flip_target(const Network& net, const Matrix& x,
                            const std::vector<Index>& labels,
                            const std::vector<Index>& columns,
                            double epsilon = kDefaultFlipEpsilon);

/// Single-column convenience form.
FlipTarget make_flip_target(const Network& net, const Vector& x, Index t,
                            double epsilon = kDefaultFlipEpsilon);

struct PerturbationResult {
  std::string solver;
  std::vector<int> layers;
  std::vector<Matrix> deltas;  // parallel to layers
  double frobenius_norm = 0.0;
  Matrix achieved_logits;
  /// ||forward(perturbed) - y_tilde||_F; NaN when no logit target exists.
  double constraint_residual = std::numeric_limits<double>::quiet_NaN();
  /// Every modified column ends up classified away from its original class.
  bool flipped = false;
  Index rank_of_delta = 0;

  /// Closed-form solvers: the preimage change lies in the row space of the
  /// upstream representation.
  bool row_space_condition = true;
  /// Closed-form solvers: constraint_residual above kFeasibilityTolerance, the
  /// update is only a least-squares solution.
  bool least_squares_only = false;
  /// Rank-k solver: the preimage change is supported on the top-k right
  /// singular subspace.
  bool support_condition = true;
  Index used_rank = 0;

  /// Empirical solver bookkeeping.
  long iterations = 0;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  double lambda = 0.0;
};

/// Closed-form minimum-Frobenius-norm update of layer n that maps the logits
/// of x onto target.y_tilde: delta = (h^-1(y_tilde) - h^-1(y)) * pinv(R) with
/// R = upstream(n, x).
PerturbationResult minimal_perturbation_exact(const Network& net, int n, const Matrix& x,
                                              const FlipTarget& target);

/// Same with the rank-k truncated pseudoinverse of R.
PerturbationResult minimal_perturbation_rank_k(const Network& net, int n, const Matrix& x,
                                               const FlipTarget& target, Index k);

struct EmpiricalConfig {
  OptimizerConfig optimizer;
  long iterations = 3000;
  /// Stop at the first iterate whose argmax leaves the original class.
  bool stop_on_flip = false;
};

/// Gradient-based minimisation of
///   CE(h(x; theta_hat), target) + lambda * sum_{l in layers} ||theta_hat_l - theta_l||_F^2
/// with every layer outside `layers` frozen. One target class per column of x.
/// `flipped` refers to the columns whose target differs from the original
/// prediction: all of them must have left their original class. Columns whose
/// target equals the prediction only anchor the fit.
/// Throws NonFiniteLoss with the iteration index if the objective blows up.
PerturbationResult minimal_perturbation_empirical(const Network& net,
                                                  const std::vector<int>& layers,
                                                  const Matrix& x,
                                                  const std::vector<Index>& target_class,
                                                  double lambda,
                                                  const EmpiricalConfig& cfg);

struct MonotonicityEntry {
  std::vector<int> layer_set;
  double norm = 0.0;
};

struct MonotonicityViolation {
  std::size_t smaller = 0;  // index of the subset entry
  std::size_t larger = 0;   // index of the superset entry
  double ratio = 0.0;       // norm(larger) / norm(smaller)
};

struct MonotonicityReport {
  double tolerance = 0.05;
  std::size_t pairs_checked = 0;
  std::vector<MonotonicityViolation> violations;
  bool passed() const { return violations.empty(); }
};

/// Flags every pair of entries with layer_set(a) a strict subset of
/// layer_set(b) and norm(b) > norm(a) * (1 + tolerance).
MonotonicityReport monotonicity_audit(const std::vector<MonotonicityEntry>& entries,
                                      double tolerance = 0.05);

nlohmann::json to_json(const PerturbationResult& r);

}  // namespace perturbcert
