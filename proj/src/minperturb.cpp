#include "perturbcert/minperturb.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "perturbcert/errors.hpp"

namespace perturbcert {

namespace {

constexpr double kSubspaceTolerance = 1e-8;

bool all_flipped(const Matrix& logits, const std::vector<Index>& columns,
                 const std::vector<Index>& original) {
  if (columns.empty()) return false;
  const auto pred = argmax_columns(logits);
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (pred[columns[i]] == original[i]) return false;
  }
  return true;
}

void check_target(const Network& net, const Matrix& x, const FlipTarget& target) {
  if (target.y_tilde.rows() != net.output_dim() || target.y_tilde.cols() != x.cols()) {
    throw InvalidArgument("flip target shape does not match the batch");
  }
  if (target.original_class.size() != target.modified_columns.size() ||
      target.target_class.size() != target.modified_columns.size()) {
    throw InvalidArgument("flip target bookkeeping is inconsistent");
  }
}

PerturbationResult finish_closed_form(const Network& net, int n, const Matrix& x,
                                      const FlipTarget& target, Matrix delta,
                                      std::string solver) {
  PerturbationResult r;
  r.solver = std::move(solver);
  r.layers = {n};
  r.frobenius_norm = delta.norm();
  r.rank_of_delta = linalg::svd(delta).rank;
  const Network perturbed = net.with_weight(n, net.weight(n) + delta);
  r.deltas.push_back(std::move(delta));
  r.achieved_logits = forward(perturbed, x);
  r.constraint_residual = (r.achieved_logits - target.y_tilde).norm();
  r.least_squares_only = !(r.constraint_residual <= kFeasibilityTolerance);
  r.flipped = all_flipped(r.achieved_logits, target.modified_columns, target.original_class);
  return r;
}

}  // namespace

FlipTarget make_flip_target(const Network& net, const Matrix& x,
                            const std::vector<Index>& labels,
                            const std::vector<Index>& columns, double epsilon) {
  if (!(epsilon > 0.0)) throw InvalidArgument("make_flip_target: epsilon must be positive");
  if (static_cast<Index>(labels.size()) != x.cols()) {
    throw InvalidArgument("make_flip_target: one label per column required");
  }
  FlipTarget ft;
  ft.y_original = forward(net, x);
  ft.y_tilde = ft.y_original;
  std::set<Index> seen;
  for (Index j : columns) {
    if (j < 0 || j >= x.cols()) throw InvalidArgument("make_flip_target: column out of range");
    if (!seen.insert(j).second) throw InvalidArgument("make_flip_target: duplicate column");
    const MarginReport m = margin(ft.y_original.col(j), labels[j]);
    if (!(m.gamma > 0.0)) {
      throw InvalidArgument("make_flip_target: column " + std::to_string(j) +
                            " is not classified with a positive margin");
    }
    const double shift = m.gamma / 2.0 + epsilon;
    ft.y_tilde(m.runner_up, j) += shift;
    ft.y_tilde(m.true_class, j) -= shift;
    ft.modified_columns.push_back(j);
    ft.original_class.push_back(m.true_class);
    ft.target_class.push_back(m.runner_up);
  }
  return ft;
}

FlipTarget make_flip_target(const Network& net, const Vector& x, Index t, double epsilon) {
  return make_flip_target(net, Matrix(x), {t}, {0}, epsilon);
}

PerturbationResult minimal_perturbation_exact(const Network& net, int n, const Matrix& x,
                                              const FlipTarget& target) {
  check_target(net, x, target);
  const Matrix dh = preimage_difference(net, n, target.y_tilde, x);
  const Matrix r = upstream(net, n, x);
  const Matrix r_pinv = linalg::pinv(r);
  Matrix delta = dh * r_pinv;
  const double rs_gap = (dh - delta * r).norm();
  PerturbationResult out = finish_closed_form(net, n, x, target, std::move(delta), "exact");
  out.row_space_condition = rs_gap <= kSubspaceTolerance * std::max(1.0, dh.norm());
  out.used_rank = linalg::svd(r).rank;
  return out;
}

PerturbationResult minimal_perturbation_rank_k(const Network& net, int n, const Matrix& x,
                                               const FlipTarget& target, Index k) {
  check_target(net, x, target);
  const Matrix dh = preimage_difference(net, n, target.y_tilde, x);
  const Matrix r = upstream(net, n, x);
  const linalg::TruncatedPinv tp = linalg::pinv_truncated(r, k);
  const linalg::SvdResult s = linalg::svd(r);
  const Matrix vk = s.vt.topRows(tp.used_rank).transpose();
  const double support_gap = (dh - dh * vk * vk.transpose()).norm();
  const double rs_gap = (dh - dh * linalg::pinv(r) * r).norm();

  PerturbationResult out =
      finish_closed_form(net, n, x, target, dh * tp.value, "rank_k");
  out.used_rank = tp.used_rank;
  out.support_condition = support_gap <= kSubspaceTolerance * std::max(1.0, dh.norm());
  out.row_space_condition = rs_gap <= kSubspaceTolerance * std::max(1.0, dh.norm());
  return out;
}

PerturbationResult minimal_perturbation_empirical(const Network& net,
                                                  const std::vector<int>& layers,
                                                  const Matrix& x,
                                                  const std::vector<Index>& target_class,
                                                  double lambda,
                                                  const EmpiricalConfig& cfg) {
  if (layers.empty()) throw InvalidArgument("empirical solver: no unfrozen layers");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) {
    throw InvalidArgument("empirical solver: lambda must be positive");
  }
  if (static_cast<Index>(target_class.size()) != x.cols()) {
    throw InvalidArgument("empirical solver: one target class per column required");
  }
  if (cfg.iterations < 0) throw InvalidArgument("empirical solver: negative iterations");
  const int m = net.num_layers();
  std::vector<bool> active(m, false);
  for (int l : layers) {
    net.check_layer(l);
    if (active[l - 1]) throw InvalidArgument("empirical solver: duplicate layer");
    active[l - 1] = true;
  }
  for (Index t : target_class) {
    if (t < 0 || t >= net.output_dim()) throw InvalidArgument("empirical solver: bad class");
  }

  const std::vector<Matrix>& theta0 = net.weights();
  // Only columns whose target differs from the current prediction count
  // toward a flip; the rest act as anchors.
  const auto predicted = argmax_columns(forward(net, x));
  std::vector<Index> watched;
  std::vector<Index> original;
  for (Index j = 0; j < x.cols(); ++j) {
    if (target_class[j] != predicted[j]) {
      watched.push_back(j);
      original.push_back(predicted[j]);
    }
  }

  std::vector<Matrix> theta = theta0;
  Optimizer opt(theta, cfg.optimizer);
  Network cur = net;
  double loss = 0.0;
  long it = 0;
  for (; it < cfg.iterations; ++it) {
    const ForwardTrace tr = forward_trace(cur, x);
    if (cfg.stop_on_flip && all_flipped(tr.logits(), watched, original)) break;
    Matrix dlogits;
    loss = cross_entropy(tr.logits(), target_class, &dlogits);
    std::vector<Matrix> grads = backward(cur, tr, dlogits);
    for (int l = 0; l < m; ++l) {
      if (!active[l]) continue;
      const Matrix d = theta[l] - theta0[l];
      loss += lambda * d.squaredNorm();
      grads[l] += 2.0 * lambda * d;
    }
    bool finite = std::isfinite(loss);
    for (int l = 0; l < m && finite; ++l) finite = !active[l] || grads[l].allFinite();
    if (!finite) {
      throw NonFiniteLoss("empirical solver: non-finite objective at iteration " +
                              std::to_string(it),
                          it);
    }
    opt.step(theta, grads, active);
    for (int l = 0; l < m; ++l) {
      if (active[l] && !theta[l].allFinite()) {
        throw NonFiniteLoss("empirical solver: non-finite weights after iteration " +
                                std::to_string(it),
                            it);
      }
    }
    cur = net.with_weights(theta);
  }

  PerturbationResult r;
  r.solver = "empirical";
  r.layers = layers;
  std::sort(r.layers.begin(), r.layers.end());
  double sq = 0.0;
  for (int l : r.layers) {
    r.deltas.push_back(theta[l - 1] - theta0[l - 1]);
    sq += r.deltas.back().squaredNorm();
  }
  r.frobenius_norm = std::sqrt(sq);
  r.rank_of_delta = 0;
  for (const auto& d : r.deltas) r.rank_of_delta = std::max(r.rank_of_delta, linalg::svd(d).rank);
  r.achieved_logits = forward(cur, x);
  r.flipped = all_flipped(r.achieved_logits, watched, original);
  r.iterations = it;
  r.lambda = lambda;
  {
    double reg = 0.0;
    for (const auto& d : r.deltas) reg += d.squaredNorm();
    r.final_loss = cross_entropy(r.achieved_logits, target_class) + lambda * reg;
  }
  return r;
}

MonotonicityReport monotonicity_audit(const std::vector<MonotonicityEntry>& entries,
                                      double tolerance) {
  MonotonicityReport rep;
  rep.tolerance = tolerance;
  std::vector<std::set<int>> sets;
  for (const auto& e : entries) sets.emplace_back(e.layer_set.begin(), e.layer_set.end());
  for (std::size_t a = 0; a < entries.size(); ++a) {
    for (std::size_t b = 0; b < entries.size(); ++b) {
      if (a == b || sets[a].size() >= sets[b].size()) continue;
      if (!std::includes(sets[b].begin(), sets[b].end(), sets[a].begin(), sets[a].end())) {
        continue;
      }
      ++rep.pairs_checked;
      if (entries[b].norm > entries[a].norm * (1.0 + tolerance)) {
        rep.violations.push_back({a, b, entries[b].norm / entries[a].norm});
      }
    }
  }
  return rep;
}

nlohmann::json to_json(const PerturbationResult& r) {
  auto num = [](double v) -> nlohmann::json {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
  };
  nlohmann::json j;
  j["solver"] = r.solver;
  j["layers"] = r.layers;
  j["frobenius_norm"] = r.frobenius_norm;
  j["constraint_residual"] = num(r.constraint_residual);
  j["flipped"] = r.flipped;
  j["rank_of_delta"] = r.rank_of_delta;
  j["row_space_condition"] = r.row_space_condition;
  j["least_squares_only"] = r.least_squares_only;
  j["support_condition"] = r.support_condition;
  j["used_rank"] = r.used_rank;
  j["iterations"] = r.iterations;
  j["final_loss"] = num(r.final_loss);
  j["lambda"] = r.lambda;
  return j;
}

}  // namespace perturbcert
