#include "perturbcert/backdoor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <thread>

#include "perturbcert/errors.hpp"
#include "perturbcert/lipschitz.hpp"
#include "perturbcert/margin.hpp"

namespace perturbcert {

namespace {

Dataset take_columns(const Dataset& d, const std::vector<Index>& cols) {
  Dataset out;
  out.x.resize(d.x.rows(), static_cast<Index>(cols.size()));
  out.y.reserve(cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c) {
    out.x.col(static_cast<Index>(c)) = d.x.col(cols[c]);
    out.y.push_back(d.y[cols[c]]);
  }
  return out;
}

// Adds the gradient of `scale * CE(net(x), labels)` to `grad` when requested
// and returns the mean cross-entropy.
double ce_term(const Network& net, const Matrix& x, const std::vector<Index>& labels,
               double scale, std::vector<Matrix>* grad) {
  if (x.cols() == 0) return 0.0;
  if (grad == nullptr) return cross_entropy(forward(net, x), labels);
  const ForwardTrace tr = forward_trace(net, x);
  Matrix dl;
  const double v = cross_entropy(tr.logits(), labels, &dl);
  if (scale != 0.0) {
    const std::vector<Matrix> g = backward(net, tr, dl);
    for (std::size_t l = 0; l < g.size(); ++l) (*grad)[l] += scale * g[l];
  }
  return v;
}

std::vector<Matrix> zeros_like(const Network& net) {
  std::vector<Matrix> z;
  for (const auto& w : net.weights()) z.push_back(Matrix::Zero(w.rows(), w.cols()));
  return z;
}

double accuracy(const Matrix& logits, const std::vector<Index>& labels) {
  if (labels.empty()) return 0.0;
  const auto pred = argmax_columns(logits);
  std::size_t ok = 0;
  for (std::size_t j = 0; j < labels.size(); ++j) ok += pred[j] == labels[j] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(labels.size());
}

template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
  const std::size_t workers = std::min<std::size_t>(thread_cap(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

unsigned thread_cap() {
  unsigned cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PERTURBCERT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) cap = static_cast<unsigned>(v);
  }
  return cap;
}

SyntheticDataset generate_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.samples < 2 || spec.classes < 2 || spec.dim < 1) {
    throw InvalidArgument("generate_dataset: need samples >= 2, classes >= 2, dim >= 1");
  }
  if (!(spec.stddev >= 0.0) || !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw InvalidArgument("generate_dataset: bad stddev or train fraction");
  }
  int bits = 0;
  while ((Index{1} << bits) < spec.classes) ++bits;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, spec.stddev);
  Dataset all;
  all.x.resize(spec.dim, spec.samples);
  all.y.resize(spec.samples);
  for (Index j = 0; j < spec.samples; ++j) {
    const Index c = j % spec.classes;
    all.y[j] = c;
    for (Index i = 0; i < spec.dim; ++i) {
      const int bit = static_cast<int>(i % bits);
      const double sign = ((c >> bit) & 1) ? 1.0 : -1.0;
      all.x(i, j) = sign * spec.separation + noise(rng);
    }
  }
  std::vector<Index> order(spec.samples);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<Index>(
      std::llround(spec.train_fraction * static_cast<double>(spec.samples)));
  SyntheticDataset out;
  out.train = take_columns(all, {order.begin(), order.begin() + n_train});
  out.validation = take_columns(all, {order.begin() + n_train, order.end()});
  return out;
}

Matrix apply_trigger(const Matrix& x, const TriggerSpec& trig) {
  if (trig.mask.empty() || trig.mask.size() != trig.values.size()) {
    throw InvalidArgument("trigger: mask must be non-empty with one value per feature");
  }
  Matrix out = x;
  for (std::size_t m = 0; m < trig.mask.size(); ++m) {
    if (trig.mask[m] < 0 || trig.mask[m] >= x.rows()) {
      throw InvalidArgument("trigger: feature index out of range");
    }
    out.row(trig.mask[m]).setConstant(trig.values[m]);
  }
  return out;
}

PoisonedDataset poison(const Dataset& data, const TriggerSpec& trig, double fraction,
                       std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw InvalidArgument("poison: fraction must lie in [0, 1]");
  }
  std::vector<Index> eligible;
  for (Index j = 0; j < data.size(); ++j) {
    if (data.y[j] != trig.target_class) eligible.push_back(j);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  const auto want = static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(data.size())));
  eligible.resize(std::min(want, eligible.size()));
  std::sort(eligible.begin(), eligible.end());

  PoisonedDataset out;
  out.data = data;
  out.poisoned_indices = eligible;
  out.triggered = take_columns(data, eligible);
  out.triggered.x = apply_trigger(out.triggered.x, trig);
  for (std::size_t c = 0; c < eligible.size(); ++c) {
    out.data.x.col(eligible[c]) = out.triggered.x.col(static_cast<Index>(c));
    out.data.y[eligible[c]] = trig.target_class;
  }
  return out;
}

LossValue backdoor_objective(const Network& net, LossKind kind, const Dataset& clean,
                             const Dataset& triggered, Index target_class,
                             const std::vector<CompressionOp>& precision_set,
                             const LossWeights& w, bool with_gradient) {
  if (precision_set.empty()) throw InvalidArgument("backdoor objective: empty precision set");
  if (target_class < 0 || target_class >= net.output_dim()) {
    throw InvalidArgument("backdoor objective: target class out of range");
  }
  const std::vector<Index> attacker(triggered.y.size(), target_class);

  LossValue lv;
  std::vector<Matrix> grad;
  if (with_gradient) grad = zeros_like(net);
  std::vector<Matrix>* g = with_gradient ? &grad : nullptr;

  lv.fp_clean = ce_term(net, clean.x, clean.y, 1.0, g);
  lv.fp_triggered = ce_term(net, triggered.x,
                            kind == LossKind::kBackdoor ? triggered.y : attacker, w.c2, g);

  for (const auto& op : precision_set) {
    const Compressed c = apply(net, op);
    std::vector<Matrix> gc;
    if (with_gradient) gc = zeros_like(net);
    std::vector<Matrix>* gp = with_gradient ? &gc : nullptr;
    lv.mp += ce_term(c.net, clean.x, clean.y, w.c1, gp);
    lv.mp += w.c2 * ce_term(c.net, triggered.x, attacker, w.c1 * w.c2, gp);
    if (!with_gradient) continue;
    if (const auto* lr = std::get_if<LowRankOp>(&op.kind)) {
      const Matrix& wl = net.weight(lr->layer);
      if (lr->k < std::min(wl.rows(), wl.cols())) {
        gc[lr->layer - 1] = low_rank_backward(wl, lr->k, gc[lr->layer - 1]);
      }
    }
    for (std::size_t l = 0; l < grad.size(); ++l) grad[l] += gc[l];
  }
  lv.total = lv.fp_clean + w.c2 * lv.fp_triggered + w.c1 * lv.mp;
  lv.grad = std::move(grad);
  return lv;
}

LossValue loss_backdoor(const Network& net, const Dataset& clean, const Dataset& triggered,
                        Index target_class, const std::vector<CompressionOp>& precision_set,
                        const LossWeights& w, bool with_gradient) {
  return backdoor_objective(net, LossKind::kBackdoor, clean, triggered, target_class,
                            precision_set, w, with_gradient);
}

LossValue loss_control(const Network& net, const Dataset& clean, const Dataset& triggered,
                       Index target_class, const std::vector<CompressionOp>& precision_set,
                       const LossWeights& w, bool with_gradient) {
  return backdoor_objective(net, LossKind::kControl, clean, triggered, target_class,
                            precision_set, w, with_gradient);
}

LossWeights auto_loss_weights(const Network& net, LossKind kind, const Dataset& clean,
                              const Dataset& triggered, Index target_class,
                              const std::vector<CompressionOp>& precision_set) {
  if (precision_set.empty()) throw InvalidArgument("auto_loss_weights: empty precision set");
  const std::vector<Index> attacker(triggered.y.size(), target_class);
  double mp_clean = 0.0, mp_trig = 0.0;
  for (const auto& op : precision_set) {
    const Network c = apply(net, op).net;
    mp_clean += ce_term(c, clean.x, clean.y, 0.0, nullptr);
    mp_trig += ce_term(c, triggered.x, attacker, 0.0, nullptr);
  }
  LossWeights w;
  w.c2 = mp_trig > 0.0 ? 0.2 * mp_clean / mp_trig : 0.0;
  const double fp = ce_term(net, clean.x, clean.y, 0.0, nullptr) +
                    w.c2 * ce_term(net, triggered.x,
                                   kind == LossKind::kBackdoor ? triggered.y : attacker, 0.0,
                                   nullptr);
  const double mp = mp_clean + w.c2 * mp_trig;
  w.c1 = mp > 0.0 ? 0.9 * fp / mp : 0.0;
  return w;
}

namespace {

bool all_finite(const std::vector<Matrix>& ws) {
  for (const auto& w : ws)
    if (!w.allFinite()) return false;
  return true;
}

}  // namespace

Network train_clean(const Network& init, const Dataset& data, const OptimizerConfig& opt,
                    long epochs, std::vector<double>* losses) {
  std::vector<Matrix> theta = init.weights();
  Optimizer o(theta, opt);
  const std::vector<bool> active(theta.size(), true);
  Network cur = init;
  for (long e = 0; e < epochs; ++e) {
    const ForwardTrace tr = forward_trace(cur, data.x);
    Matrix dl;
    const double loss = cross_entropy(tr.logits(), data.y, &dl);
    if (!std::isfinite(loss) || loss > kDivergenceThreshold) {
      throw DivergenceError("training diverged at epoch " + std::to_string(e), e);
    }
    if (losses != nullptr) losses->push_back(loss);
    o.step(theta, backward(cur, tr, dl), active);
    if (!all_finite(theta)) {
      throw DivergenceError("training diverged at epoch " + std::to_string(e), e);
    }
    cur = init.with_weights(theta);
  }
  return cur;
}

TrainResult train(const Network& init, LossKind kind, const Dataset& train_data,
                  const TrainConfig& cfg) {
  if (cfg.precision_set.empty()) throw InvalidArgument("train: empty precision set");
  if (cfg.pretrain_epochs < 0 || cfg.finetune_epochs < 0) {
    throw InvalidArgument("train: negative epoch count");
  }
  std::vector<double> pre;
  TrainResult res{train_clean(init, train_data, cfg.optimizer, cfg.pretrain_epochs, &pre),
                  std::move(pre), {}, {}, {}};

  const PoisonedDataset pd =
      poison(train_data, cfg.trigger, cfg.poison_fraction, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  res.poisoned_indices = pd.poisoned_indices;
  const Index target = cfg.trigger.target_class;

  LossWeights w;
  if (!cfg.c1 || !cfg.c2) {
    const LossWeights a =
        auto_loss_weights(res.net, kind, train_data, pd.triggered, target, cfg.precision_set);
    w.c2 = cfg.c2.value_or(a.c2);
    w.c1 = cfg.c1.value_or(a.c1);
  } else {
    w = {*cfg.c1, *cfg.c2};
  }
  res.weights = w;

  std::vector<Matrix> theta = res.net.weights();
  Optimizer o(theta, cfg.finetune_optimizer.value_or(cfg.optimizer));
  const std::vector<bool> active(theta.size(), true);
  Network cur = res.net;
  for (long e = 0; e < cfg.finetune_epochs; ++e) {
    const LossValue lv = backdoor_objective(cur, kind, train_data, pd.triggered, target,
                                            cfg.precision_set, w, true);
    bool finite = std::isfinite(lv.total);
    for (const auto& g : lv.grad) finite = finite && g.allFinite();
    if (!finite || lv.total > kDivergenceThreshold) {
      throw DivergenceError("fine-tuning diverged at epoch " + std::to_string(e), e);
    }
    res.finetune_losses.push_back(lv.total);
    o.step(theta, lv.grad, active);
    if (!all_finite(theta)) {
      throw DivergenceError("fine-tuning diverged at epoch " + std::to_string(e), e);
    }
    cur = init.with_weights(theta);
  }
  res.net = cur;
  return res;
}

AttackReport evaluate(const Network& net, const Dataset& data, const TriggerSpec& trig,
                      const std::vector<CompressionOp>& ops, const std::string& mode) {
  std::vector<CompressionOp> all{CompressionOp{IdentityOp{}, {}}};
  all.insert(all.end(), ops.begin(), ops.end());

  std::vector<Index> attack_cols;
  for (Index j = 0; j < data.size(); ++j) {
    if (data.y[j] != trig.target_class) attack_cols.push_back(j);
  }
  const Dataset attack = take_columns(data, attack_cols);
  const Matrix xt = apply_trigger(attack.x, trig);
  const std::vector<Index> targets(attack_cols.size(), trig.target_class);

  AttackReport rep;
  rep.mode = mode;
  rep.rows.resize(all.size());
  parallel_for(all.size(), [&](std::size_t i) {
    const Compressed c = apply(net, all[i]);
    AttackRow row;
    row.op = all[i].to_string();
    row.delta_norm = c.delta_norm;
    const Matrix clean_logits = forward(c.net, data.x);
    row.clean_accuracy = accuracy(clean_logits, data.y);
    row.clean_loss = cross_entropy(clean_logits, data.y);
    if (!targets.empty()) {
      const Matrix trig_logits = forward(c.net, xt);
      row.attack_success_rate = accuracy(trig_logits, targets);
      row.triggered_loss = cross_entropy(trig_logits, targets);
    }
    rep.rows[i] = std::move(row);
  });
  return rep;
}

CertificationTable certify_threshold(const Network& net, const Vector& x,
                                     const std::vector<CompressionOp>& ops,
                                     const CertifyOptions& opts) {
  if (!(opts.p >= 1.0)) throw InvalidArgument("certify_threshold: p must be >= 1");
  CertificationTable table;
  table.p = opts.p;
  const Vector logits = forward(net, Matrix(x));
  table.predicted_class = argmax_columns(logits)[0];
  const double gamma = margin(logits, table.predicted_class).gamma;

  std::map<std::vector<int>, LipschitzEstimate> cache;
  for (const auto& op : ops) {
    CertRow row;
    row.op = op.to_string();
    row.gamma = gamma;
    const Compressed c = apply(net, op);
    std::vector<double> flat;
    for (int l = 1; l <= net.num_layers(); ++l) {
      const Matrix d = c.net.weight(l) - net.weight(l);
      flat.insert(flat.end(), d.data(), d.data() + d.size());
    }
    row.delta_norm = linalg::vec_pnorm(flat, opts.p);

    const std::vector<int> layers = op.affected_layers(net);
    if (!layers.empty()) {
      auto it = cache.find(layers);
      if (it == cache.end()) {
        it = cache
                 .emplace(layers, estimate_lipschitz(net, x, ParamSubset::layers(net, layers),
                                                     opts.power_iterations, opts.probe_step,
                                                     opts.seed))
                 .first;
      }
      row.lipschitz = it->second.sigma_hat;
      row.pattern_unstable = it->second.pattern_unstable;
    }
    const BoundCheck b = margin_lipschitz_check(gamma, row.lipschitz, row.delta_norm, opts.p);
    row.rhs = b.rhs;
    row.bound_satisfied = b.satisfied;
    const Vector after = forward(c.net, Matrix(x));
    row.compressed_margin = margin(after, table.predicted_class).gamma;
    row.flipped = argmax_columns(after)[0] != table.predicted_class;
    if (!row.bound_satisfied) table.certified_safe = static_cast<long>(table.rows.size());
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace perturbcert
