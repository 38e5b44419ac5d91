#include "perturbcert/optim.hpp"

#include <cmath>
#include <string>

#include "perturbcert/errors.hpp"

namespace perturbcert {

Optimizer::Optimizer(const std::vector<Matrix>& params, OptimizerConfig cfg) : cfg_(cfg) {
  if (!(cfg_.learning_rate > 0.0)) {
    throw InvalidArgument("optimizer: learning rate must be positive");
  }
  for (const auto& p : params) {
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void Optimizer::step(std::vector<Matrix>& params, const std::vector<Matrix>& grads,
                     const std::vector<bool>& active) {
  if (params.size() != m_.size() || grads.size() != m_.size() ||
      active.size() != m_.size()) {
    throw InvalidArgument("optimizer: parameter list changed shape");
  }
  ++t_;
  if (cfg_.kind == OptimizerKind::kSgd) {
    for (std::size_t l = 0; l < params.size(); ++l) {
      if (active[l]) params[l] -= cfg_.learning_rate * grads[l];
    }
    return;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t l = 0; l < params.size(); ++l) {
    if (!active[l]) continue;
    m_[l] = cfg_.beta1 * m_[l] + (1.0 - cfg_.beta1) * grads[l];
    v_[l] = cfg_.beta2 * v_[l] + (1.0 - cfg_.beta2) * grads[l].cwiseAbs2();
    params[l].array() -= cfg_.learning_rate * (m_[l].array() / bc1) /
                         ((v_[l].array() / bc2).sqrt() + cfg_.epsilon);
  }
}

double cross_entropy(const Matrix& logits, const std::vector<Index>& labels,
                     Matrix* dlogits) {
  const Index s = logits.cols();
  if (static_cast<Index>(labels.size()) != s) {
    throw InvalidArgument("cross_entropy: " + std::to_string(labels.size()) +
                          " labels for " + std::to_string(s) + " columns");
  }
  if (dlogits != nullptr) dlogits->resize(logits.rows(), s);
  if (s == 0) return 0.0;
  double total = 0.0;
  for (Index j = 0; j < s; ++j) {
    const Index y = labels[j];
    if (y < 0 || y >= logits.rows()) throw InvalidArgument("cross_entropy: bad label");
    const double mx = logits.col(j).maxCoeff();
    const Eigen::VectorXd e = (logits.col(j).array() - mx).exp().matrix();
    const double z = e.sum();
    total += std::log(z) + mx - logits(y, j);
    if (dlogits != nullptr) {
      dlogits->col(j) = e / z;
      (*dlogits)(y, j) -= 1.0;
    }
  }
  if (dlogits != nullptr) *dlogits /= static_cast<double>(s);
  return total / static_cast<double>(s);
}

std::vector<double> cross_entropy_columns(const Matrix& logits,
                                          const std::vector<Index>& labels) {
  std::vector<double> out;
  out.reserve(labels.size());
  for (Index j = 0; j < logits.cols(); ++j) {
    out.push_back(cross_entropy(logits.col(j), {labels.at(j)}));
  }
  return out;
}

}  // namespace perturbcert
