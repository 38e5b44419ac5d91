#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "finite_diff.hpp"
#include "perturbcert/backdoor.hpp"
#include "perturbcert/errors.hpp"
#include "perturbcert/margin.hpp"
#include "support.hpp"

using namespace perturbcert;
using testsupport::random_matrix;
using testsupport::random_network;

namespace {

std::vector<CompressionOp> ops(std::initializer_list<const char*> specs) {
  std::vector<CompressionOp> out;
  for (const char* s : specs) out.push_back(CompressionOp::parse(s));
  return out;
}

struct Fixture {
  SyntheticDataset data;
  Network clean;
};

const Fixture& trained() {
  static const Fixture f = [] {
    Fixture out{generate_dataset({}, 0), Network({Matrix::Identity(2, 2)}, {})};
    const Network init = init_network({2, 16, 16, 4}, Activation::leaky_relu(0.1), 3);
    out.clean = train_clean(init, out.data.train, {OptimizerKind::kAdam, 1e-2}, 300);
    return out;
  }();
  return f;
}

Dataset small_dataset(std::mt19937_64& rng, Index n, Index classes) {
  Dataset d;
  d.x = random_matrix(rng, 3, n);
  for (Index j = 0; j < n; ++j) d.y.push_back(j % classes);
  return d;
}

std::vector<Matrix> random_like(std::mt19937_64& rng, const Network& net) {
  std::vector<Matrix> out;
  for (const auto& w : net.weights()) out.push_back(random_matrix(rng, w.rows(), w.cols()));
  return out;
}

double inner(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
  double s = 0.0;
  for (size_t l = 0; l < a.size(); ++l) s += (a[l].array() * b[l].array()).sum();
  return s;
}

Network shifted(const Network& net, const std::vector<Matrix>& dir, double h) {
  std::vector<Matrix> ws = net.weights();
  for (size_t l = 0; l < ws.size(); ++l) ws[l] += h * dir[l];
  return net.with_weights(std::move(ws));
}

}  // namespace

TEST(Dataset, DeterministicAndSplit) {
  const auto a = generate_dataset({}, 5);
  const auto b = generate_dataset({}, 5);
  EXPECT_EQ(a.train.x, b.train.x);
  EXPECT_EQ(a.train.y, b.train.y);
  EXPECT_EQ(a.validation.x, b.validation.x);
  EXPECT_EQ(a.train.size(), 800);
  EXPECT_EQ(a.validation.size(), 200);
  EXPECT_NE(generate_dataset({}, 6).train.x, a.train.x);
}

TEST(Dataset, ClassesBalancedWithinOne) {
  SyntheticSpec spec;
  spec.samples = 1003;
  const auto d = generate_dataset(spec, 1);
  std::vector<int> counts(4, 0);
  for (Index c : d.train.y) counts[c]++;
  for (Index c : d.validation.y) counts[c]++;
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  EXPECT_LE(*hi - *lo, 1);
}

TEST(Dataset, BlobsAreNearlyLinearlySeparable) {
  const auto d = generate_dataset({}, 2);
  const Network lin = train_clean(init_network({2, 4}, Activation::identity(), 0), d.train,
                                  {OptimizerKind::kAdam, 5e-2}, 300);
  const auto rep = evaluate(lin, d.validation, TriggerSpec{}, {});
  EXPECT_GE(rep.rows[0].clean_accuracy, 0.9);
}

TEST(Poison, FractionZeroAndOne) {
  const auto d = generate_dataset({}, 3).train;
  const auto none = poison(d, TriggerSpec{}, 0.0, 1);
  EXPECT_EQ(none.data.x, d.x);
  EXPECT_EQ(none.data.y, d.y);
  EXPECT_TRUE(none.poisoned_indices.empty());
  const auto all = poison(d, TriggerSpec{}, 1.0, 1);
  for (Index y : all.data.y) EXPECT_EQ(y, 0);
  EXPECT_THROW(poison(d, TriggerSpec{}, 1.5, 1), InvalidArgument);
}

TEST(Poison, TriggeredCoordinatesAreExact) {
  const auto d = generate_dataset({}, 4).train;
  TriggerSpec trig;
  trig.target_class = 2;
  const auto p = poison(d, trig, 0.2, 7);
  EXPECT_EQ(p.poisoned_indices.size(), 160u);
  for (size_t c = 0; c < p.poisoned_indices.size(); ++c) {
    const Index j = p.poisoned_indices[c];
    EXPECT_EQ(p.data.x(0, j), 5.0);
    EXPECT_EQ(p.data.x(1, j), d.x(1, j));
    EXPECT_EQ(p.data.y[j], 2);
    EXPECT_NE(d.y[j], 2);
    EXPECT_EQ(p.triggered.y[c], d.y[j]);
    EXPECT_EQ(p.triggered.x.col(static_cast<Index>(c)), p.data.x.col(j));
  }
  EXPECT_THROW(apply_trigger(d.x, TriggerSpec{{}, {}, 0}), InvalidArgument);
  EXPECT_THROW(apply_trigger(d.x, TriggerSpec{{2}, {1.0}, 0}), InvalidArgument);
}

TEST(Loss, ZeroC1IsFullPrecisionOnly) {
  std::mt19937_64 rng(1);
  const Network net = random_network(rng, {3, 4, 3}, Activation::tanh());
  const Dataset clean = small_dataset(rng, 12, 3);
  const Dataset trig = small_dataset(rng, 4, 3);
  const auto lv = loss_backdoor(net, clean, trig, 0, ops({"prune:0.5"}), {0.0, 0.7}, false);
  EXPECT_NEAR(lv.total, lv.fp_clean + 0.7 * lv.fp_triggered, 1e-15);
  EXPECT_NEAR(lv.fp_clean, cross_entropy(forward(net, clean.x), clean.y), 1e-15);
}

TEST(Loss, IdentityPrecisionAndZeroC2) {
  std::mt19937_64 rng(2);
  const Network net = random_network(rng, {3, 4, 3}, Activation::tanh());
  const Dataset clean = small_dataset(rng, 12, 3);
  const Dataset trig = small_dataset(rng, 4, 3);
  const double ce = cross_entropy(forward(net, clean.x), clean.y);
  const auto lv = loss_backdoor(net, clean, trig, 0, ops({"identity"}), {0.4, 0.0}, false);
  EXPECT_NEAR(lv.total, 1.4 * ce, 1e-14);
  const auto lc = loss_control(net, clean, trig, 0, ops({"identity"}), {0.0, 0.0}, false);
  EXPECT_NEAR(lc.total, ce, 1e-15);
}

TEST(Loss, ControlDiffersOnlyInFullPrecisionTriggeredTerm) {
  std::mt19937_64 rng(3);
  const Network net = random_network(rng, {3, 5, 3}, Activation::tanh());
  const Dataset clean = small_dataset(rng, 12, 3);
  const Dataset trig = small_dataset(rng, 5, 3);
  const auto p = ops({"quant:b=4,sym", "lowrank:layer=2,k=1"});
  const auto b = loss_backdoor(net, clean, trig, 1, p, {0.5, 0.5}, false);
  const auto c = loss_control(net, clean, trig, 1, p, {0.5, 0.5}, false);
  EXPECT_EQ(b.fp_clean, c.fp_clean);
  EXPECT_EQ(b.mp, c.mp);
  EXPECT_NE(b.fp_triggered, c.fp_triggered);
  EXPECT_NEAR(c.fp_triggered,
              cross_entropy(forward(net, trig.x), std::vector<Index>(5, 1)), 1e-15);
  EXPECT_NEAR(b.fp_triggered, cross_entropy(forward(net, trig.x), trig.y), 1e-15);
}

TEST(Loss, GradientMatchesFiniteDifferencesForSmoothOps) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 4; ++trial) {
    const Network net = random_network(rng, {3, 5, 4, 3}, Activation::tanh());
    const Dataset clean = small_dataset(rng, 10, 3);
    const Dataset trig = small_dataset(rng, 4, 3);
    const auto p = ops({"identity", "lowrank:layer=3,k=1", "lowrank:layer=2,k=2"});
    for (LossKind kind : {LossKind::kBackdoor, LossKind::kControl}) {
      const LossWeights w{0.6, 0.3};
      const auto lv = backdoor_objective(net, kind, clean, trig, 2, p, w, true);
      const auto dir = random_like(rng, net);
      const double fd = oracle::central_difference4(
          [&](double h) {
            return backdoor_objective(shifted(net, dir, h), kind, clean, trig, 2, p, w, false)
                .total;
          },
          1e-3);
      EXPECT_LT(oracle::relative_error(inner(lv.grad, dir), fd), 1e-5) << "trial " << trial;
    }
  }
}

TEST(Loss, LeakyGradientMatchesAwayFromKinks) {
  std::mt19937_64 rng(5);
  const Network net = random_network(rng, {3, 6, 3}, Activation::leaky_relu(0.1));
  const Dataset clean = small_dataset(rng, 8, 3);
  const Dataset trig = small_dataset(rng, 3, 3);
  const auto p = ops({"lowrank:layer=2,k=2"});
  const auto lv = loss_backdoor(net, clean, trig, 0, p, {0.5, 0.5}, true);
  const auto dir = random_like(rng, net);
  // A step of 1e-6 is far smaller than the distance to any kink here.
  const double fd = oracle::central_difference(
      [&](double h) {
        return loss_backdoor(shifted(net, dir, h), clean, trig, 0, p, {0.5, 0.5}, false).total;
      },
      1e-6);
  EXPECT_LT(oracle::relative_error(inner(lv.grad, dir), fd), 1e-5);
}

TEST(Loss, PruneAndQuantizeUseStraightThroughGradient) {
  std::mt19937_64 rng(6);
  const Network net = random_network(rng, {3, 5, 3}, Activation::tanh());
  const Dataset clean = small_dataset(rng, 10, 3);
  const Dataset trig = small_dataset(rng, 4, 3);
  for (const char* spec : {"prune:0.4", "quant:b=3,sym"}) {
    const auto p = ops({spec});
    const Network compressed = apply(net, p[0]).net;
    const auto with = loss_backdoor(net, clean, trig, 0, p, {0.8, 0.5}, true);
    const auto without = loss_backdoor(net, clean, trig, 0, p, {0.0, 0.5}, true);
    const auto at_c = loss_backdoor(compressed, clean, trig, 0, ops({"identity"}), {0.8, 0.5}, true);
    const auto at_c0 =
        loss_backdoor(compressed, clean, trig, 0, ops({"identity"}), {0.0, 0.5}, true);
    for (size_t l = 0; l < with.grad.size(); ++l) {
      const Matrix ste = with.grad[l] - without.grad[l];
      const Matrix ref = at_c.grad[l] - at_c0.grad[l];
      EXPECT_LT((ste - ref).cwiseAbs().maxCoeff(), 1e-12) << spec;
    }
  }
}

TEST(Loss, RejectsEmptyPrecisionSet) {
  std::mt19937_64 rng(7);
  const Network net = random_network(rng, {3, 4, 3}, Activation::tanh());
  const Dataset d = small_dataset(rng, 6, 3);
  EXPECT_THROW(loss_backdoor(net, d, d, 0, {}, {}), InvalidArgument);
  EXPECT_THROW(loss_backdoor(net, d, d, 3, ops({"identity"}), {}), InvalidArgument);
}

TEST(AutoWeights, HitTargetRatios) {
  std::mt19937_64 rng(8);
  const Network net = random_network(rng, {3, 5, 3}, Activation::tanh());
  const Dataset clean = small_dataset(rng, 12, 3);
  const Dataset trig = small_dataset(rng, 4, 3);
  const auto p = ops({"quant:b=4,sym", "prune:0.3"});
  const auto w = auto_loss_weights(net, LossKind::kBackdoor, clean, trig, 0, p);
  const auto lv = loss_backdoor(net, clean, trig, 0, p, w, false);
  const std::vector<Index> attacker(4, 0);
  double mp_clean = 0.0, mp_trig = 0.0;
  for (const auto& op : p) {
    const Network c = apply(net, op).net;
    mp_clean += cross_entropy(forward(c, clean.x), clean.y);
    mp_trig += cross_entropy(forward(c, trig.x), attacker);
  }
  EXPECT_NEAR(w.c2 * mp_trig, 0.2 * mp_clean, 1e-12);
  EXPECT_NEAR(w.c1 * lv.mp, 0.9 * (lv.fp_clean + w.c2 * lv.fp_triggered), 1e-12);
}

TEST(Train, FineTuneLossDecreasesInitially) {
  const Fixture& f = trained();
  TrainConfig cfg;
  cfg.pretrain_epochs = 0;
  cfg.finetune_epochs = 10;
  cfg.finetune_optimizer = OptimizerConfig{OptimizerKind::kAdam, 1e-3};
  cfg.precision_set = ops({"lowrank:layer=3,k=2"});
  const auto r = train(f.clean, LossKind::kBackdoor, f.data.train, cfg);
  ASSERT_EQ(r.finetune_losses.size(), 10u);
  for (size_t e = 1; e < 10; ++e) EXPECT_LT(r.finetune_losses[e], r.finetune_losses[e - 1]);
}

TEST(Train, DeterministicAndValidated) {
  const Fixture& f = trained();
  TrainConfig cfg;
  cfg.pretrain_epochs = 5;
  cfg.finetune_epochs = 5;
  cfg.precision_set = ops({"prune:0.2"});
  const Network init = init_network({2, 8, 4}, Activation::leaky_relu(0.1), 1);
  const auto a = train(init, LossKind::kControl, f.data.train, cfg);
  const auto b = train(init, LossKind::kControl, f.data.train, cfg);
  EXPECT_EQ(a.finetune_losses, b.finetune_losses);
  EXPECT_EQ(a.net.weights(), b.net.weights());
  cfg.precision_set.clear();
  EXPECT_THROW(train(init, LossKind::kControl, f.data.train, cfg), InvalidArgument);
}

TEST(Train, DivergenceIsReported) {
  const Fixture& f = trained();
  const Network init = init_network({2, 8, 4}, Activation::leaky_relu(0.1), 1);
  try {
    train_clean(init, f.data.train, {OptimizerKind::kSgd, 1e6}, 50);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.epoch(), 0);
  }
}

TEST(Evaluate, CleanModelRowsAndDeterminism) {
  const Fixture& f = trained();
  const auto p = ops({"prune:0.3", "quant:b=4,sym", "lowrank:layer=3,k=2"});
  const auto a = evaluate(f.clean, f.data.validation, TriggerSpec{}, p, "backdoor");
  const auto b = evaluate(f.clean, f.data.validation, TriggerSpec{}, p, "backdoor");
  ASSERT_EQ(a.rows.size(), 4u);
  EXPECT_EQ(a.rows[0].op, "identity");
  EXPECT_EQ(a.rows[3].op, "lowrank:layer=3,k=2");
  for (size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].clean_accuracy, b.rows[i].clean_accuracy);
    EXPECT_EQ(a.rows[i].attack_success_rate, b.rows[i].attack_success_rate);
    EXPECT_GE(a.rows[i].clean_accuracy, 0.0);
    EXPECT_LE(a.rows[i].clean_accuracy, 1.0);
    EXPECT_GE(a.rows[i].attack_success_rate, 0.0);
    EXPECT_LE(a.rows[i].attack_success_rate, 1.0);
  }
  const auto pred = argmax_columns(forward(f.clean, f.data.validation.x));
  double ok = 0;
  for (Index j = 0; j < f.data.validation.size(); ++j) ok += pred[j] == f.data.validation.y[j];
  EXPECT_EQ(a.rows[0].clean_accuracy, ok / static_cast<double>(f.data.validation.size()));
  EXPECT_GE(a.rows[0].clean_accuracy, 0.9);
  // Clean model: the trigger alone rarely lands in the target class.
  EXPECT_LT(a.rows[0].attack_success_rate, 0.5);
}

TEST(Evaluate, UntrainedNetsSitNearChance) {
  const auto d = generate_dataset({}, 9);
  double sum = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Network net = init_network({2, 16, 4}, Activation::leaky_relu(0.1), s);
    sum += evaluate(net, d.validation, TriggerSpec{}, {}).rows[0].clean_accuracy;
  }
  EXPECT_NEAR(sum / 20.0, 0.25, 0.1);
}

TEST(Certify, ZeroStrengthOpIsCertifiedSafe) {
  const Fixture& f = trained();
  const Vector x = f.data.validation.x.col(0);
  const auto t = certify_threshold(f.clean, x, ops({"prune:0", "identity"}));
  for (const auto& row : t.rows) {
    EXPECT_EQ(row.delta_norm, 0.0);
    EXPECT_EQ(row.rhs, 0.0);
    EXPECT_FALSE(row.bound_satisfied);
    EXPECT_FALSE(row.flipped);
  }
  EXPECT_EQ(t.certified_safe, 1);
}

TEST(Certify, RhsFollowsDeltaNormAndSafeRowsHold) {
  const Fixture& f = trained();
  std::vector<CompressionOp> sweep;
  for (int s = 0; s <= 9; ++s) sweep.push_back(CompressionOp{PruneOp{0.1 * s}, {}});
  for (Index j = 0; j < 10; ++j) {
    const auto t = certify_threshold(f.clean, f.data.validation.x.col(j), sweep);
    for (size_t i = 1; i < t.rows.size(); ++i) {
      if (t.rows[i].delta_norm >= t.rows[i - 1].delta_norm) {
        EXPECT_GE(t.rows[i].rhs, t.rows[i - 1].rhs);
      }
    }
    for (const auto& row : t.rows) {
      if (!row.bound_satisfied) EXPECT_FALSE(row.flipped) << row.op;
      EXPECT_NEAR(row.rhs, std::sqrt(2.0) * row.lipschitz * row.delta_norm, 1e-12);
    }
  }
}

TEST(Certify, RejectsBadNormOrder) {
  const Fixture& f = trained();
  CertifyOptions o;
  o.p = 0.5;
  EXPECT_THROW(certify_threshold(f.clean, f.data.validation.x.col(0), ops({"prune:0.1"}), o),
               InvalidArgument);
}
