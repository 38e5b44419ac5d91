#pragma once

#include <vector>

#include "perturbcert/linalg.hpp"

namespace perturbcert {

using linalg::Index;
using linalg::Matrix;

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Full-batch first-order optimizer over a list of weight matrices. Only the
/// entries flagged active are updated; inactive ones stay bit-identical.
class Optimizer {
 public:
  Optimizer(const std::vector<Matrix>& params, OptimizerConfig cfg);

  void step(std::vector<Matrix>& params, const std::vector<Matrix>& grads,
            const std::vector<bool>& active);

  long steps_taken() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

/// Mean softmax cross-entropy over the columns of logits. When dlogits is not
/// null it receives dLoss/dlogits.
double cross_entropy(const Matrix& logits, const std::vector<Index>& labels,
                     Matrix* dlogits = nullptr);

/// Per-column cross-entropy values.
std::vector<double> cross_entropy_columns(const Matrix& logits,
                                          const std::vector<Index>& labels);

}  // namespace perturbcert
