#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "perturbcert/compress.hpp"
#include "perturbcert/network.hpp"
#include "perturbcert/optim.hpp"

namespace perturbcert {

struct Dataset {
  Matrix x;  // d x s
  std::vector<Index> y;
  Index size() const { return x.cols(); }
};

/// Gaussian blobs. Class c has mean separation * (+-1, ..., +-1) where the
/// sign of coordinate i is taken from bit (i mod bits) of c, and isotropic
/// standard deviation `stddev`. Labels cycle through the classes, so class
/// counts differ by at most one.
struct SyntheticSpec {
  Index samples = 1000;
  Index classes = 4;
  Index dim = 2;
  double separation = 2.0;
  double stddev = 1.0;
  double train_fraction = 0.8;
};

struct SyntheticDataset {
  Dataset train;
  Dataset validation;
};

SyntheticDataset generate_dataset(const SyntheticSpec& spec, std::uint64_t seed);

/// Overwrites the masked features with fixed values.
struct TriggerSpec {
  std::vector<Index> mask{0};
  std::vector<double> values{5.0};
  Index target_class = 0;
};

Matrix apply_trigger(const Matrix& x, const TriggerSpec& trig);

struct PoisonedDataset {
  /// Copy of the input with the poisoned columns triggered and relabelled.
  Dataset data;
  std::vector<Index> poisoned_indices;
  /// Triggered copies of the poisoned columns with their true labels
  /// (X~_S, Y_S); the attacker labels Y~_S are all target_class.
  Dataset triggered;
};

/// Poisons round(fraction * s) columns, drawn without replacement from the
/// columns whose label differs from the target (fewer if not enough exist).
PoisonedDataset poison(const Dataset& data, const TriggerSpec& trig, double fraction,
                       std::uint64_t seed);

enum class LossKind { kBackdoor, kControl };

struct LossValue {
  double total = 0.0;
  double fp_clean = 0.0;      // CE(X, Y) at full precision
  double fp_triggered = 0.0;  // CE of the triggered subset at full precision
  double mp = 0.0;            // sum over P of the compressed terms (before c1)
  std::vector<Matrix> grad;   // dL/dW_l, empty unless requested
};

struct LossWeights {
  double c1 = 0.5;
  double c2 = 0.5;
};

/// Backdoor objective:
///   L_FP = CE(X, Y) + c2 CE(X~_S, Y_S)
///   L_MP = sum_{i in P} [CE_i(X, Y) + c2 CE_i(X~_S, Y~_S)]
///   L    = L_FP + c1 L_MP
/// where CE_i evaluates the network compressed by op i. The control objective
/// replaces Y_S by Y~_S in the full-precision triggered term.
///
/// Gradients pass through pruning and quantization unchanged and through the
/// analytic derivative of the truncated SVD for low-rank ops.
LossValue backdoor_objective(const Network& net, LossKind kind, const Dataset& clean,
                             const Dataset& triggered, Index target_class,
                             const std::vector<CompressionOp>& precision_set,
                             const LossWeights& w, bool with_gradient);

LossValue loss_backdoor(const Network& net, const Dataset& clean, const Dataset& triggered,
                        Index target_class, const std::vector<CompressionOp>& precision_set,
                        const LossWeights& w, bool with_gradient = true);

LossValue loss_control(const Network& net, const Dataset& clean, const Dataset& triggered,
                       Index target_class, const std::vector<CompressionOp>& precision_set,
                       const LossWeights& w, bool with_gradient = true);

/// Picks c2 so that c2 * L_MP(X~, Y~) is 20% of L_MP(X, Y) and then c1 so
/// that c1 * L_MP is 90% of L_FP, all at the given weights.
LossWeights auto_loss_weights(const Network& net, LossKind kind, const Dataset& clean,
                              const Dataset& triggered, Index target_class,
                              const std::vector<CompressionOp>& precision_set);

struct TrainConfig {
  OptimizerConfig optimizer{OptimizerKind::kAdam, 1e-2};
  /// Fine-tuning optimizer; defaults to `optimizer`.
  std::optional<OptimizerConfig> finetune_optimizer;
  long pretrain_epochs = 300;
  long finetune_epochs = 300;
  std::uint64_t seed = 0;
  double poison_fraction = 0.2;
  /// Unset fields are chosen by auto_loss_weights at fine-tune start.
  std::optional<double> c1 = 0.5;
  std::optional<double> c2 = 0.5;
  std::vector<CompressionOp> precision_set;
  TriggerSpec trigger;
};

inline constexpr double kDivergenceThreshold = 1e6;

struct TrainResult {
  Network net;
  std::vector<double> pretrain_losses;
  std::vector<double> finetune_losses;
  LossWeights weights;
  std::vector<Index> poisoned_indices;
};

/// Full-batch cross-entropy training of a network on a dataset.
/// Throws DivergenceError past kDivergenceThreshold.
Network train_clean(const Network& init, const Dataset& data, const OptimizerConfig& opt,
                    long epochs, std::vector<double>* losses = nullptr);

/// Clean pretraining followed by fine-tuning on the backdoor or control
/// objective with freshly poisoned data. Deterministic in cfg.seed.
TrainResult train(const Network& init, LossKind kind, const Dataset& train_data,
                  const TrainConfig& cfg);

struct AttackRow {
  std::string op;
  double clean_accuracy = 0.0;
  double attack_success_rate = 0.0;
  double clean_loss = 0.0;      // CE(X, Y)
  double triggered_loss = 0.0;  // CE(X~, Y~) toward the target class
  double delta_norm = 0.0;
};

struct AttackReport {
  std::string mode;
  std::vector<AttackRow> rows;  // identity first, then ops in the given order
};

/// CA on the clean data and ASR on triggered copies of the samples whose true
/// class differs from the target. Ops run in parallel on private copies (at
/// most PERTURBCERT_THREADS threads); rows keep the input order.
AttackReport evaluate(const Network& net, const Dataset& data, const TriggerSpec& trig,
                      const std::vector<CompressionOp>& ops, const std::string& mode = "");

struct CertRow {
  std::string op;
  double delta_norm = 0.0;
  double lipschitz = 0.0;
  double gamma = 0.0;
  double rhs = 0.0;
  bool bound_satisfied = true;
  double compressed_margin = 0.0;
  bool flipped = false;
  bool pattern_unstable = false;
};

struct CertificationTable {
  Index predicted_class = 0;
  double p = 2.0;
  std::vector<CertRow> rows;
  /// Index of the last row with bound_satisfied == false, -1 if none.
  long certified_safe = -1;
};

struct CertifyOptions {
  double p = 2.0;
  int power_iterations = 10;
  double probe_step = 1e-3;
  std::uint64_t seed = 0;
};

/// For each op: ||delta theta||_p, the local Lipschitz estimate over the
/// layers the op touches, and the margin-Lipschitz check against the margin
/// of the predicted class. Also reports the margin of the original predicted
/// class after compression and whether the prediction changed.
CertificationTable certify_threshold(const Network& net, const Vector& x,
                                     const std::vector<CompressionOp>& ops,
                                     const CertifyOptions& opts = {});

/// Thread cap from PERTURBCERT_THREADS (default: hardware concurrency, min 1).
unsigned thread_cap();

}  // namespace perturbcert
