#include "perturbcert/lipschitz.hpp"

#include <cmath>
#include <random>
#include <string>

#include "perturbcert/errors.hpp"

namespace perturbcert {

namespace {

// Forward pass on a raw weight list; skips Network validation for the many
// probes below.
Vector forward_raw(const std::vector<Matrix>& ws, const std::vector<Activation>& acts,
                   const Vector& x, std::vector<Matrix>* preacts = nullptr) {
  Matrix z = x;
  for (std::size_t l = 0; l < ws.size(); ++l) {
    Matrix pre = ws[l] * z;
    if (l + 1 == ws.size()) return pre;
    z = activation_apply(acts[l], pre);
    if (preacts != nullptr) preacts->push_back(std::move(pre));
  }
  return z;
}

bool same_pattern(const std::vector<Matrix>& a, const std::vector<Matrix>& b,
                  const std::vector<Activation>& acts) {
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (!acts[l].piecewise_linear()) continue;
    for (Index i = 0; i < a[l].size(); ++i) {
      if ((a[l](i) >= 0.0) != (b[l](i) >= 0.0)) return false;
    }
  }
  return true;
}

std::vector<Matrix> shifted(const std::vector<Matrix>& base, const std::vector<Matrix>& dir,
                            double step) {
  std::vector<Matrix> out = base;
  for (std::size_t l = 0; l < out.size(); ++l) out[l] += step * dir[l];
  return out;
}

Vector random_unit(Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = dist(rng);
  const double nv = v.norm();
  return nv > 0.0 ? Vector(v / nv) : v;
}

}  // namespace

ParamSubset::ParamSubset(std::vector<Matrix> masks) : masks_(std::move(masks)) {
  for (const auto& m : masks_) count_ += static_cast<Index>(m.sum());
  if (count_ == 0) throw InvalidArgument("parameter subset is empty");
}

ParamSubset ParamSubset::full(const Network& net) {
  std::vector<Matrix> masks;
  for (const auto& w : net.weights()) masks.push_back(Matrix::Ones(w.rows(), w.cols()));
  return ParamSubset(std::move(masks));
}

ParamSubset ParamSubset::layers(const Network& net, const std::vector<int>& layers) {
  std::vector<Matrix> masks;
  for (const auto& w : net.weights()) masks.push_back(Matrix::Zero(w.rows(), w.cols()));
  for (int l : layers) {
    net.check_layer(l);
    masks[l - 1].setOnes();
  }
  return ParamSubset(std::move(masks));
}

ParamSubset ParamSubset::entries(const Network& net, int layer,
                                 const std::vector<std::pair<Index, Index>>& entries) {
  net.check_layer(layer);
  std::vector<Matrix> masks;
  for (const auto& w : net.weights()) masks.push_back(Matrix::Zero(w.rows(), w.cols()));
  Matrix& m = masks[layer - 1];
  for (const auto& [i, j] : entries) {
    if (i < 0 || j < 0 || i >= m.rows() || j >= m.cols()) {
      throw InvalidArgument("parameter subset entry outside layer " + std::to_string(layer));
    }
    m(i, j) = 1.0;
  }
  return ParamSubset(std::move(masks));
}

bool ParamSubset::touches(int layer) const {
  return layer >= 1 && layer <= static_cast<int>(masks_.size()) &&
         masks_[layer - 1].sum() > 0.0;
}

Vector ParamSubset::gather(const std::vector<Matrix>& per_layer) const {
  if (per_layer.size() != masks_.size()) {
    throw InvalidArgument("parameter subset: layer count mismatch");
  }
  Vector out(count_);
  Index k = 0;
  for (std::size_t l = 0; l < masks_.size(); ++l) {
    const Matrix& m = masks_[l];
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j)
        if (m(i, j) != 0.0) out(k++) = per_layer[l](i, j);
  }
  return out;
}

std::vector<Matrix> ParamSubset::scatter(const Vector& flat) const {
  if (flat.size() != count_) throw InvalidArgument("parameter subset: vector length mismatch");
  std::vector<Matrix> out;
  Index k = 0;
  for (const auto& m : masks_) {
    Matrix w = Matrix::Zero(m.rows(), m.cols());
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j)
        if (m(i, j) != 0.0) w(i, j) = flat(k++);
    out.push_back(std::move(w));
  }
  return out;
}

LipschitzEstimate estimate_lipschitz(const Network& net, const Vector& x,
                                     const ParamSubset& subset, int iterations,
                                     double epsilon, std::uint64_t seed) {
  if (iterations < 1) throw InvalidArgument("estimate_lipschitz: need at least one iteration");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw InvalidArgument("estimate_lipschitz: probe step must be positive");
  }
  if (x.size() != net.input_dim()) throw InvalidArgument("estimate_lipschitz: bad input size");
  if (subset.masks().size() != net.weights().size()) {
    throw InvalidArgument("estimate_lipschitz: subset built for another network");
  }
  for (std::size_t l = 0; l < subset.masks().size(); ++l) {
    if (subset.masks()[l].rows() != net.weights()[l].rows() ||
        subset.masks()[l].cols() != net.weights()[l].cols()) {
      throw InvalidArgument("estimate_lipschitz: subset mask shape mismatch");
    }
  }

  const std::vector<Matrix>& theta0 = net.weights();
  const std::vector<Activation>& acts = net.activations();
  bool any_pl = false;
  for (const auto& a : acts) any_pl = any_pl || a.piecewise_linear();
  const ForwardTrace tr0 = forward_trace(net, x);

  std::mt19937_64 rng(seed);
  LipschitzEstimate est;
  est.epsilon = epsilon;

  Vector v = random_unit(subset.count(), rng);
  for (int k = 0; k < iterations; ++k) {
    const std::vector<Matrix> dir = subset.scatter(v);
    Vector u;
    for (int halvings = 0;; ++halvings) {
      std::vector<Matrix> pre_plus, pre_minus;
      const Vector yp = forward_raw(shifted(theta0, dir, est.epsilon), acts, x,
                                    any_pl ? &pre_plus : nullptr);
      const Vector ym = forward_raw(shifted(theta0, dir, -est.epsilon), acts, x,
                                    any_pl ? &pre_minus : nullptr);
      u = (yp - ym) / (2.0 * est.epsilon);
      if (!any_pl || same_pattern(pre_plus, pre_minus, acts)) break;
      if (halvings == kMaxStepHalvings) {
        est.pattern_unstable = true;
        break;
      }
      est.epsilon /= 2.0;
    }

    const Vector g = subset.gather(backward(net, tr0, u));
    const double gn = g.norm();
    if (!(gn > 0.0)) {
      if (est.restarts == kMaxRestarts) {
        throw ZeroGradientError(
            "estimate_lipschitz: vector-Jacobian product vanished after " +
            std::to_string(kMaxRestarts) + " restarts");
      }
      ++est.restarts;
      est.trace.clear();
      k = -1;
      v = random_unit(subset.count(), rng);
      continue;
    }
    est.trace.push_back(u.norm());
    v = g / gn;
  }

  est.iterations = iterations;
  est.sigma_hat = est.trace.back();
  if (est.trace.size() >= 2) {
    const double a = est.trace[est.trace.size() - 1];
    const double b = est.trace[est.trace.size() - 2];
    est.converged = std::abs(a - b) <= kConvergenceRelTol * std::abs(a);
  }
  return est;
}

Matrix parameter_jacobian_fd(const Network& net, const Vector& x, const ParamSubset& subset) {
  if (subset.count() > kJacobianOracleCap) {
    throw InvalidArgument("jacobian oracle: " + std::to_string(subset.count()) +
                          " parameters exceed the dense cap of " +
                          std::to_string(kJacobianOracleCap));
  }
  if (x.size() != net.input_dim()) throw InvalidArgument("jacobian oracle: bad input size");
  std::vector<Matrix> theta = net.weights();
  const std::vector<Activation>& acts = net.activations();
  Matrix jac(net.output_dim(), subset.count());
  Index col = 0;
  for (std::size_t l = 0; l < theta.size(); ++l) {
    const Matrix& m = subset.masks()[l];
    for (Index i = 0; i < m.rows(); ++i) {
      for (Index j = 0; j < m.cols(); ++j) {
        if (m(i, j) == 0.0) continue;
        const double orig = theta[l](i, j);
        const double h = 1e-6 * std::max(1.0, std::abs(orig));
        theta[l](i, j) = orig + h;
        const Vector yp = forward_raw(theta, acts, x);
        theta[l](i, j) = orig - h;
        const Vector ym = forward_raw(theta, acts, x);
        theta[l](i, j) = orig;
        jac.col(col++) = (yp - ym) / (2.0 * h);
      }
    }
  }
  return jac;
}

linalg::SvdResult jacobian_oracle(const Network& net, const Vector& x,
                                  const ParamSubset& subset) {
  return linalg::svd(parameter_jacobian_fd(net, x, subset));
}

nlohmann::json to_json(const LipschitzEstimate& e) {
  return {{"sigma_hat", e.sigma_hat},       {"iterations", e.iterations},
          {"epsilon", e.epsilon},           {"trace", e.trace},
          {"converged", e.converged},       {"pattern_unstable", e.pattern_unstable},
          {"restarts", e.restarts}};
}

}  // namespace perturbcert
