#include "perturbcert/experiments.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "format.hpp"
#include "perturbcert/backdoor.hpp"
#include "perturbcert/compress.hpp"
#include "perturbcert/errors.hpp"
#include "perturbcert/lipschitz.hpp"
#include "perturbcert/margin.hpp"
#include "perturbcert/minperturb.hpp"
#include "perturbcert/network.hpp"

namespace perturbcert {

namespace {

using nlohmann::json;

constexpr int kSchemaVersion = 1;

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

template <typename T>
T get_or(const json& cfg, const char* key, T def) {
  if (!cfg.is_object() || !cfg.contains(key) || cfg.at(key).is_null()) return def;
  return cfg.at(key).get<T>();
}

json section(const json& cfg, const char* key) {
  if (cfg.is_object() && cfg.contains(key) && !cfg.at(key).is_null()) {
    if (!cfg.at(key).is_object()) {
      throw InvalidArgument(std::string("config section '") + key + "' must be an object");
    }
    return cfg.at(key);
  }
  return json::object();
}

void reject_unknown(const json& cfg, const std::set<std::string>& known, const std::string& where) {
  if (!cfg.is_object()) throw InvalidArgument(where + ": expected a JSON object");
  for (const auto& [k, v] : cfg.items()) {
    if (!known.count(k)) throw InvalidArgument(where + ": unknown key '" + k + "'");
  }
}

std::uint64_t seed_of(const json& cfg) { return get_or<std::uint64_t>(cfg, "seed", 0); }

SyntheticSpec data_spec(const json& cfg, SyntheticSpec def = {}) {
  const json d = section(cfg, "data");
  reject_unknown(d, {"samples", "classes", "dim", "separation", "stddev", "train_fraction"},
                 "data");
  def.samples = get_or<Index>(d, "samples", def.samples);
  def.classes = get_or<Index>(d, "classes", def.classes);
  def.dim = get_or<Index>(d, "dim", def.dim);
  def.separation = get_or<double>(d, "separation", def.separation);
  def.stddev = get_or<double>(d, "stddev", def.stddev);
  def.train_fraction = get_or<double>(d, "train_fraction", def.train_fraction);
  return def;
}

OptimizerConfig optimizer_from(const json& s, OptimizerConfig def) {
  const std::string kind = get_or<std::string>(s, "optimizer", def.kind == OptimizerKind::kAdam ? "adam" : "sgd");
  if (kind == "adam") {
    def.kind = OptimizerKind::kAdam;
  } else if (kind == "sgd") {
    def.kind = OptimizerKind::kSgd;
  } else {
    throw InvalidArgument("unknown optimizer '" + kind + "'");
  }
  def.learning_rate = get_or<double>(s, "learning_rate", def.learning_rate);
  return def;
}

json optimizer_json(const OptimizerConfig& o) {
  return {{"optimizer", o.kind == OptimizerKind::kAdam ? "adam" : "sgd"},
          {"learning_rate", o.learning_rate},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"epsilon", o.epsilon}};
}

struct ModelDefaults {
  std::vector<Index> dims;
  std::string activation;
  long epochs;
  double learning_rate;
};

InitScheme init_scheme(const std::string& s) {
  if (s == "lecun") return InitScheme::kLecunNormal;
  if (s == "he") return InitScheme::kHeNormal;
  if (s == "uniform") return InitScheme::kUniformFanIn;
  throw InvalidArgument("unknown init scheme '" + s + "'");
}

struct ModelSpec {
  std::vector<Index> dims;
  Activation activation;
  InitScheme init = InitScheme::kLecunNormal;
  long epochs = 0;
  OptimizerConfig optimizer;
  json echo;
};

ModelSpec model_spec(const json& cfg, const ModelDefaults& def) {
  const json m = section(cfg, "model");
  reject_unknown(m, {"dims", "activation", "init", "epochs", "learning_rate", "optimizer"},
                 "model");
  ModelSpec s;
  s.dims = get_or<std::vector<Index>>(m, "dims", def.dims);
  s.activation = Activation::parse(get_or<std::string>(m, "activation", def.activation));
  const std::string init = get_or<std::string>(m, "init", "lecun");
  s.init = init_scheme(init);
  s.epochs = get_or<long>(m, "epochs", def.epochs);
  if (s.epochs < 0) throw InvalidArgument("model.epochs must be non-negative");
  s.optimizer = optimizer_from(m, {OptimizerKind::kAdam, def.learning_rate});
  s.echo = {{"dims", s.dims},
            {"activation", s.activation.to_string()},
            {"init", init},
            {"epochs", s.epochs},
            {"optimizer", optimizer_json(s.optimizer)}};
  return s;
}

struct Setup {
  Network net;
  SyntheticDataset data;
  json info;
};

// Inline "network" document if present, otherwise a freshly trained model.
Setup obtain_network(const json& cfg, const ModelDefaults& def, Report& rep,
                     SyntheticSpec data_def = {}) {
  const std::uint64_t seed = seed_of(cfg);
  const SyntheticSpec ds = data_spec(cfg, data_def);
  SyntheticDataset data = generate_dataset(ds, seed);
  json info = {{"data",
                {{"samples", ds.samples},
                 {"classes", ds.classes},
                 {"dim", ds.dim},
                 {"separation", ds.separation},
                 {"stddev", ds.stddev},
                 {"train_fraction", ds.train_fraction}}}};
  if (cfg.contains("network") && !cfg.at("network").is_null()) {
    Network net = network_from_json(cfg.at("network"));
    if (net.input_dim() != ds.dim) {
      throw InvalidArgument("network input dimension does not match the data");
    }
    info["network_source"] = "inline";
    return {std::move(net), std::move(data), std::move(info)};
  }
  const ModelSpec ms = model_spec(cfg, def);
  if (ms.dims.front() != ds.dim || ms.dims.back() != ds.classes) {
    throw InvalidArgument("model.dims must start at the data dimension and end at the class count");
  }
  Network net = init_network(ms.dims, ms.activation, seed + 1, ms.init);
  net = train_clean(net, data.train, ms.optimizer, ms.epochs);
  info["network_source"] = "trained";
  info["model"] = ms.echo;
  rep.artifacts["network"] = network_to_json(net);
  return {std::move(net), std::move(data), std::move(info)};
}

double accuracy_of(const Network& net, const Dataset& d) {
  if (d.size() == 0) return 0.0;
  const auto pred = argmax_columns(forward(net, d.x));
  Index ok = 0;
  for (Index j = 0; j < d.size(); ++j) ok += pred[j] == d.y[j] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(d.size());
}

// First column classified as its label with a strictly positive margin, or
// the configured index.
Index pick_sample(const Network& net, const Dataset& d, const json& cfg) {
  if (cfg.contains("sample_index") && !cfg.at("sample_index").is_null()) {
    const Index j = cfg.at("sample_index").get<Index>();
    if (j < 0 || j >= d.size()) throw InvalidArgument("sample_index out of range");
    return j;
  }
  const Matrix logits = forward(net, d.x);
  for (Index j = 0; j < d.size(); ++j) {
    if (margin(logits.col(j), d.y[j]).gamma > 0.0) return j;
  }
  throw InvalidArgument("no correctly classified sample available");
}

std::vector<CompressionOp> parse_ops(const json& list, const char* what) {
  if (!list.is_array()) throw InvalidArgument(std::string(what) + " must be a list");
  std::vector<CompressionOp> ops;
  for (const auto& o : list) ops.push_back(CompressionOp::parse(o.get<std::string>()));
  return ops;
}

std::vector<int> all_layers(const Network& net) {
  std::vector<int> l;
  for (int i = 1; i <= net.num_layers(); ++i) l.push_back(i);
  return l;
}

// ---------------------------------------------------------------- commands

const ModelDefaults kToyModel{{2, 16, 16, 16, 16, 4}, "leaky_relu:0.1", 500, 1e-2};

Report cmd_train(const json& cfg) {
  reject_unknown(cfg, {"seed", "data", "model", "network"}, "train config");
  Report rep;
  Setup s = obtain_network(cfg, kToyModel, rep);
  rep.table.columns = {"split", "samples", "accuracy", "loss"};
  for (const auto& [name, d] : {std::pair<const char*, const Dataset*>{"train", &s.data.train},
                                {"validation", &s.data.validation}}) {
    rep.table.rows.push_back({name, d->size(), accuracy_of(s.net, *d),
                              num(cross_entropy(forward(s.net, d->x), d->y))});
  }
  rep.artifacts["network"] = network_to_json(s.net);
  rep.details["setup"] = s.info;
  return rep;
}

Report cmd_flip(const json& cfg) {
  reject_unknown(cfg, {"seed", "data", "model", "network", "lambdas", "layers", "epsilon",
                       "solver", "sample_index"},
                 "flip config");
  Report rep;
  Setup s = obtain_network(cfg, kToyModel, rep);
  const auto lambdas = get_or<std::vector<double>>(cfg, "lambdas", {1.0, 100.0, 200.0});
  const auto layers = get_or<std::vector<int>>(cfg, "layers", all_layers(s.net));
  const double eps = get_or<double>(cfg, "epsilon", kDefaultFlipEpsilon);
  const json sol = section(cfg, "solver");
  reject_unknown(sol, {"optimizer", "learning_rate", "iterations", "stop_on_flip"}, "solver");
  EmpiricalConfig ec;
  ec.optimizer = optimizer_from(sol, ec.optimizer);
  ec.iterations = get_or<long>(sol, "iterations", 3000);
  ec.stop_on_flip = get_or<bool>(sol, "stop_on_flip", false);
  if (lambdas.empty() || layers.empty()) throw InvalidArgument("flip: empty lambda or layer list");
  for (int l : layers) s.net.check_layer(l);

  const Index j = pick_sample(s.net, s.data.validation, cfg);
  const Vector x = s.data.validation.x.col(j);
  const Index t = s.data.validation.y[j];
  const FlipTarget target = make_flip_target(s.net, x, t, eps);
  const MarginReport m0 = margin(target.y_original.col(0), t);

  struct Closed {
    double norm = std::numeric_limits<double>::quiet_NaN();
    double residual = std::numeric_limits<double>::quiet_NaN();
    bool flipped = false;
    bool exact = false;
  };
  std::map<int, Closed> closed;
  json closed_errors = json::object();
  for (int l : layers) {
    Closed c;
    try {
      const PerturbationResult r = minimal_perturbation_exact(s.net, l, Matrix(x), target);
      c = {r.frobenius_norm, r.constraint_residual, r.flipped, !r.least_squares_only};
    } catch (const InvalidArgument&) {
      throw;
    } catch (const Error& e) {
      closed_errors[std::to_string(l)] = {{"code", to_string(e.code())}, {"message", e.what()}};
    }
    closed[l] = c;
  }

  rep.table.columns = {"layer",          "lambda",           "theoretical_norm",
                       "empirical_norm", "margin",           "empirical_margin",
                       "theoretical_flip", "empirical_flip", "theoretical_residual",
                       "theoretical_exact", "empirical_iterations"};
  for (double lam : lambdas) {
    for (int l : layers) {
      const PerturbationResult e =
          minimal_perturbation_empirical(s.net, {l}, Matrix(x), {m0.runner_up}, lam, ec);
      const Closed& c = closed[l];
      rep.table.rows.push_back({l, lam, num(c.norm), e.frobenius_norm, m0.gamma,
                                margin(e.achieved_logits.col(0), t).gamma, c.flipped,
                                e.flipped, num(c.residual), c.exact, e.iterations});
    }
  }
  rep.details["setup"] = s.info;
  rep.details["sample"] = {{"split", "validation"}, {"index", j}, {"true_class", t},
                           {"runner_up", m0.runner_up}, {"gamma", m0.gamma},
                           {"epsilon", eps}};
  rep.details["solver"] = {{"iterations", ec.iterations}, {"stop_on_flip", ec.stop_on_flip},
                           {"optimizer", optimizer_json(ec.optimizer)}};
  rep.details["closed_form_errors"] = closed_errors;
  return rep;
}

Report cmd_multilayer(const json& cfg) {
  reject_unknown(cfg, {"seed", "data", "model", "network", "lambda", "solver", "sample_index",
                       "epsilon", "monotonicity_tolerance", "objective"},
                 "multilayer config");
  Report rep;
  std::vector<Index> dims{2};
  for (int i = 0; i < 9; ++i) dims.push_back(32);
  dims.push_back(4);
  SyntheticSpec data_def;
  data_def.samples = 1250;  // 1000 training points
  const std::string objective = get_or<std::string>(cfg, "objective", "sample");
  if (objective != "dataset" && objective != "sample") {
    throw InvalidArgument("objective must be \"dataset\" or \"sample\"");
  }
  const double lambda = get_or<double>(cfg, "lambda", 1e-3);
  const double tol = get_or<double>(cfg, "monotonicity_tolerance", 0.05);
  const json sol = section(cfg, "solver");
  reject_unknown(sol, {"optimizer", "learning_rate", "iterations", "stop_on_flip"}, "solver");
  EmpiricalConfig ec;
  ec.optimizer = optimizer_from(sol, ec.optimizer);
  ec.iterations = get_or<long>(sol, "iterations", 5000);
  ec.stop_on_flip = get_or<bool>(sol, "stop_on_flip", false);
  Setup s = obtain_network(cfg, {dims, "identity", 1000, 1e-3}, rep, data_def);

  const Index j = pick_sample(s.net, s.data.train, cfg);
  const Vector x = s.data.train.x.col(j);
  const Index t = s.data.train.y[j];
  const MarginReport m0 = margin(forward(s.net, Matrix(x)).col(0), t);
  const FlipTarget target =
      make_flip_target(s.net, x, t, get_or<double>(cfg, "epsilon", kDefaultFlipEpsilon));

  // "dataset": refit the whole training set with the chosen sample relabelled
  // (other columns keep the reference prediction); "sample": that column alone.
  Matrix fit_x;
  std::vector<Index> fit_y;
  if (objective == "dataset") {
    fit_x = s.data.train.x;
    fit_y = argmax_columns(forward(s.net, fit_x));
    fit_y[j] = m0.runner_up;
  } else {
    fit_x = Matrix(x);
    fit_y = {m0.runner_up};
  }

  const int m = s.net.num_layers();
  rep.table.columns = {"k",           "group_norm",        "group_flipped",
                       "single_norm", "single_flipped",    "lower_bound",
                       "closed_form_norm", "group_iterations", "single_iterations"};
  std::vector<MonotonicityEntry> group_entries;
  long bound_violations = 0;
  for (int k = 1; k <= m; ++k) {
    std::vector<int> group;
    for (int l = 1; l <= k; ++l) group.push_back(l);
    const PerturbationResult g =
        minimal_perturbation_empirical(s.net, group, fit_x, fit_y, lambda, ec);
    const PerturbationResult one =
        minimal_perturbation_empirical(s.net, {k}, fit_x, fit_y, lambda, ec);
    const double lk = lipschitz_closed_form_single_layer(s.net, k, x);
    const double bound = lk > 0.0 ? m0.gamma / (std::sqrt(2.0) * lk)
                                  : std::numeric_limits<double>::infinity();
    double closed_norm = std::numeric_limits<double>::quiet_NaN();
    try {
      closed_norm = minimal_perturbation_exact(s.net, k, Matrix(x), target).frobenius_norm;
    } catch (const InvalidArgument&) {
      throw;
    } catch (const Error&) {
    }
    if (g.flipped) group_entries.push_back({group, g.frobenius_norm});
    if (one.flipped && bound > one.frobenius_norm) ++bound_violations;
    rep.table.rows.push_back({k, g.frobenius_norm, g.flipped, one.frobenius_norm,
                              one.flipped, num(bound), num(closed_norm), g.iterations,
                              one.iterations});
  }
  const MonotonicityReport audit = monotonicity_audit(group_entries, tol);
  json viol = json::array();
  for (const auto& v : audit.violations) {
    viol.push_back({{"subset_k", group_entries[v.smaller].layer_set.size()},
                    {"superset_k", group_entries[v.larger].layer_set.size()},
                    {"ratio", v.ratio}});
  }
  rep.details["setup"] = s.info;
  rep.details["sample"] = {{"split", "train"}, {"index", j}, {"true_class", t},
                           {"runner_up", m0.runner_up}, {"gamma", m0.gamma}};
  rep.details["lambda"] = lambda;
  rep.details["objective"] = objective;
  rep.details["solver"] = {{"iterations", ec.iterations}, {"stop_on_flip", ec.stop_on_flip},
                           {"optimizer", optimizer_json(ec.optimizer)}};
  rep.details["monotonicity"] = {{"tolerance", tol},
                                 {"pairs_checked", audit.pairs_checked},
                                 {"passed", audit.passed()},
                                 {"violations", viol}};
  rep.details["bound_violations"] = bound_violations;
  return rep;
}

TriggerSpec trigger_from(const json& cfg, Index classes) {
  const json tr = section(cfg, "trigger");
  reject_unknown(tr, {"mask", "values", "target_class"}, "trigger");
  TriggerSpec t;
  t.mask = get_or<std::vector<Index>>(tr, "mask", t.mask);
  t.values = get_or<std::vector<double>>(tr, "values", t.values);
  t.target_class = get_or<Index>(tr, "target_class", 0);
  if (t.target_class < 0 || t.target_class >= classes) {
    throw InvalidArgument("trigger.target_class out of range");
  }
  return t;
}

Report cmd_attack(const json& cfg) {
  reject_unknown(cfg, {"seed", "data", "model", "precision_set", "trigger", "poison_fraction",
                       "finetune_epochs", "c1", "c2", "mode", "finetune"},
                 "attack config");
  Report rep;
  const std::uint64_t seed = seed_of(cfg);
  const SyntheticSpec ds = data_spec(cfg);
  const SyntheticDataset data = generate_dataset(ds, seed);
  const ModelSpec ms = model_spec(cfg, {{2, 16, 16, 4}, "leaky_relu:0.1", 300, 1e-2});
  if (ms.dims.front() != ds.dim || ms.dims.back() != ds.classes) {
    throw InvalidArgument("model.dims must start at the data dimension and end at the class count");
  }
  const Network init = init_network(ms.dims, ms.activation, seed + 1, ms.init);

  TrainConfig tc;
  tc.seed = seed;
  tc.optimizer = ms.optimizer;
  tc.pretrain_epochs = ms.epochs;
  tc.finetune_epochs = get_or<long>(cfg, "finetune_epochs", 300);
  tc.poison_fraction = get_or<double>(cfg, "poison_fraction", 0.2);
  const json ft = section(cfg, "finetune");
  reject_unknown(ft, {"optimizer", "learning_rate"}, "finetune");
  const OptimizerConfig ft_opt = optimizer_from(ft, ms.optimizer);
  tc.finetune_optimizer = ft_opt;
  auto weight = [&](const char* key) -> std::optional<double> {
    if (!cfg.contains(key) || cfg.at(key).is_null()) return 0.5;
    if (cfg.at(key).is_string()) {
      if (cfg.at(key).get<std::string>() != "auto") {
        throw InvalidArgument(std::string(key) + " must be a number or \"auto\"");
      }
      return std::nullopt;
    }
    return cfg.at(key).get<double>();
  };
  tc.c1 = weight("c1");
  tc.c2 = weight("c2");
  tc.trigger = trigger_from(cfg, ds.classes);
  const int last = static_cast<int>(ms.dims.size()) - 1;
  tc.precision_set = cfg.contains("precision_set")
                         ? parse_ops(cfg.at("precision_set"), "precision_set")
                         : std::vector<CompressionOp>{CompressionOp::parse(
                               "lowrank:layer=" + std::to_string(last) + ",k=2")};
  if (tc.precision_set.empty()) throw InvalidArgument("precision_set must not be empty");

  const std::string mode = get_or<std::string>(cfg, "mode", "both");
  std::vector<std::pair<std::string, LossKind>> modes;
  if (mode == "backdoor" || mode == "both") modes.emplace_back("backdoor", LossKind::kBackdoor);
  if (mode == "control" || mode == "both") modes.emplace_back("control", LossKind::kControl);
  if (modes.empty()) throw InvalidArgument("mode must be backdoor, control or both");

  rep.table.columns = {"mode", "op", "clean_accuracy", "attack_success_rate", "clean_loss",
                       "triggered_loss", "delta_norm"};
  json runs = json::object();
  for (const auto& [name, kind] : modes) {
    const TrainResult fin = train(init, kind, data.train, tc);
    const AttackReport ar =
        evaluate(fin.net, data.validation, tc.trigger, tc.precision_set, name);
    for (const auto& row : ar.rows) {
      rep.table.rows.push_back({name, row.op, row.clean_accuracy, row.attack_success_rate,
                                num(row.clean_loss), num(row.triggered_loss), row.delta_norm});
    }
    runs[name] = {{"c1", fin.weights.c1},
                  {"c2", fin.weights.c2},
                  {"poisoned", fin.poisoned_indices.size()},
                  {"pretrain_final_loss",
                   fin.pretrain_losses.empty() ? json(nullptr) : num(fin.pretrain_losses.back())},
                  {"finetune_final_loss",
                   fin.finetune_losses.empty() ? json(nullptr) : num(fin.finetune_losses.back())}};
    rep.artifacts["network_" + name] = network_to_json(fin.net);
  }
  rep.details["runs"] = runs;
  rep.details["model"] = ms.echo;
  rep.details["finetune_optimizer"] = optimizer_json(ft_opt);
  rep.details["trigger"] = {{"mask", tc.trigger.mask},
                            {"values", tc.trigger.values},
                            {"target_class", tc.trigger.target_class}};
  rep.details["asr_population"] = "validation samples whose true class is not the target";
  return rep;
}

Report cmd_certify(const json& cfg) {
  reject_unknown(cfg, {"seed", "data", "model", "network", "ops", "sparsities", "samples", "p",
                       "lipschitz"},
                 "certify config");
  Report rep;
  std::vector<CompressionOp> ops;
  if (cfg.contains("ops")) {
    ops = parse_ops(cfg.at("ops"), "ops");
  } else {
    for (double rho : get_or<std::vector<double>>(
             cfg, "sparsities", {0.0, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5})) {
      ops.push_back(CompressionOp{PruneOp{rho}, {}});
    }
  }
  if (ops.empty()) throw InvalidArgument("certify: empty op list");
  Setup s = obtain_network(cfg, kToyModel, rep);
  for (const auto& op : ops) (void)op.affected_layers(s.net);
  const Index n = get_or<Index>(cfg, "samples", 10);
  if (n < 1 || n > s.data.validation.size()) throw InvalidArgument("certify: bad sample count");
  CertifyOptions co;
  co.p = get_or<double>(cfg, "p", 2.0);
  const json lc = section(cfg, "lipschitz");
  reject_unknown(lc, {"iterations", "epsilon", "seed"}, "lipschitz");
  co.power_iterations = get_or<int>(lc, "iterations", kDefaultPowerIterations);
  co.probe_step = get_or<double>(lc, "epsilon", kDefaultProbeStep);
  co.seed = get_or<std::uint64_t>(lc, "seed", seed_of(cfg));

  rep.table.columns = {"sample", "op",        "sparsity", "margin",        "compressed_margin",
                       "flip",   "lipschitz", "delta_norm", "rhs",         "bound_satisfied",
                       "certified_safe", "pattern_unstable"};
  long violations = 0;
  json safe = json::array();
  for (Index j = 0; j < n; ++j) {
    const CertificationTable ct =
        certify_threshold(s.net, s.data.validation.x.col(j), ops, co);
    for (std::size_t r = 0; r < ct.rows.size(); ++r) {
      const CertRow& row = ct.rows[r];
      const auto* pr = std::get_if<PruneOp>(&ops[r].kind);
      if (!row.bound_satisfied && row.flipped) ++violations;
      rep.table.rows.push_back({j, row.op, pr ? json(pr->rho) : json(nullptr), row.gamma,
                                row.compressed_margin, row.flipped, row.lipschitz,
                                row.delta_norm, row.rhs, row.bound_satisfied,
                                static_cast<long>(r) == ct.certified_safe,
                                row.pattern_unstable});
    }
    safe.push_back(ct.certified_safe >= 0 ? json(ct.rows[ct.certified_safe].op) : json(nullptr));
  }
  rep.details["setup"] = s.info;
  rep.details["p"] = co.p;
  rep.details["lipschitz"] = {{"iterations", co.power_iterations},
                              {"epsilon", co.probe_step},
                              {"seed", co.seed},
                              {"scope", "layers touched by each op, all entries"},
                              {"note", "local estimate at the sample; see README"}};
  rep.details["certified_safe_op"] = safe;
  rep.details["soundness_violations"] = violations;
  return rep;
}

Report cmd_lipschitz(const json& cfg) {
  reject_unknown(cfg, {"seed", "data", "model", "network", "layers", "iterations", "epsilon",
                       "seeds", "oracle", "sample_index"},
                 "lipschitz config");
  Report rep;
  Setup s = obtain_network(cfg, kToyModel, rep);
  const auto layers = get_or<std::vector<int>>(cfg, "layers", all_layers(s.net));
  const ParamSubset subset = ParamSubset::layers(s.net, layers);
  const int k = get_or<int>(cfg, "iterations", kDefaultPowerIterations);
  const double eps = get_or<double>(cfg, "epsilon", kDefaultProbeStep);
  const auto seeds = get_or<std::vector<std::uint64_t>>(cfg, "seeds", {0, 1, 2, 3, 4});
  if (seeds.empty()) throw InvalidArgument("lipschitz: empty seed list");
  const bool want_oracle =
      get_or<bool>(cfg, "oracle", true) && subset.count() <= kJacobianOracleCap;

  const Index j = pick_sample(s.net, s.data.validation, cfg);
  const Vector x = s.data.validation.x.col(j);
  double oracle = std::numeric_limits<double>::quiet_NaN();
  if (want_oracle) oracle = jacobian_oracle(s.net, x, subset).sigma(0);

  rep.table.columns = {"seed", "sigma_hat", "converged", "epsilon", "pattern_unstable",
                       "restarts", "oracle_sigma", "relative_error"};
  json traces = json::object();
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0, sum = 0.0;
  for (std::uint64_t sd : seeds) {
    const LipschitzEstimate e = estimate_lipschitz(s.net, x, subset, k, eps, sd);
    lo = std::min(lo, e.sigma_hat);
    hi = std::max(hi, e.sigma_hat);
    sum += e.sigma_hat;
    rep.table.rows.push_back({sd, e.sigma_hat, e.converged, e.epsilon, e.pattern_unstable,
                              e.restarts, num(oracle),
                              num(std::abs(e.sigma_hat - oracle) / oracle)});
    traces[std::to_string(sd)] = e.trace;
  }
  const double mean = sum / static_cast<double>(seeds.size());
  rep.details["setup"] = s.info;
  rep.details["sample_index"] = j;
  rep.details["layers"] = layers;
  rep.details["parameters"] = subset.count();
  rep.details["relative_spread"] = num(mean > 0.0 ? (hi - lo) / mean : 0.0);
  rep.details["traces"] = traces;
  return rep;
}

Report cmd_lowrank(const json& cfg) {
  reject_unknown(cfg, {"seed", "data", "model", "network", "ks", "samples"},
                 "lowrank-analyze config");
  Report rep;
  Setup s = obtain_network(cfg, kToyModel, rep);
  const int m = s.net.num_layers();
  const Matrix& w = s.net.weight(m);
  const Index r = std::min(w.rows(), w.cols());
  std::vector<Index> def_ks;
  for (Index k = 1; k <= r; ++k) def_ks.push_back(k);
  const auto ks = get_or<std::vector<Index>>(cfg, "ks", def_ks);
  const Index n = get_or<Index>(cfg, "samples", 10);
  if (n < 1 || n > s.data.validation.size()) throw InvalidArgument("lowrank: bad sample count");

  rep.table.columns = {"sample", "k", "t", "p", "m0", "s_k", "s_k_direct", "flip_predicted",
                       "flip_observed", "prediction_scope", "input_residual",
                       "output_residual", "energy_retained_own", "energy_tail_own",
                       "energy_retained_full", "energy_tail_full"};
  for (Index j = 0; j < n; ++j) {
    const Vector x = s.data.validation.x.col(j);
    const Vector z = upstream(s.net, m, x);
    const Vector logits = w * z;
    const Index t = argmax_columns(logits)[0];
    const Index p = margin(logits, t).runner_up;
    const LowRankMarginAnalysis a = low_rank_margin_analysis(w, z, t, p, ks);
    const linalg::SvdResult sv = linalg::svd(w);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      const Matrix wk = ks[i] == r ? w : linalg::low_rank_approx(sv, ks[i]);
      const bool observed = argmax_columns(wk * z)[0] != t;
      const bool zero_z = z.squaredNorm() == 0.0;
      EnergySplit e;
      if (!zero_z) e = energy_split(w, z, ks[i]);
      rep.table.rows.push_back({j, ks[i], t, p, a.m0, a.s_k[i], a.s_k_direct[i],
                                static_cast<bool>(a.flip_predicted[i]), observed,
                                a.prediction_scope, a.input_residual_norm[i],
                                a.output_residual_norm[i],
                                zero_z ? json(nullptr) : json(e.retained_own),
                                zero_z ? json(nullptr) : json(e.tail_own),
                                zero_z ? json(nullptr) : json(e.retained_full),
                                zero_z ? json(nullptr) : json(e.tail_full)});
    }
  }
  rep.details["setup"] = s.info;
  rep.details["layer"] = m;
  return rep;
}

std::string csv_cell(const json& v) {
  if (v.is_null()) return "";
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return v.dump();
  if (v.is_number_float()) return detail::format_shortest(v.get<double>());
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + "\"";
  }
  return v.dump();
}

std::string dat_cell(const json& v) {
  if (v.is_null()) return "nan";
  if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
  if (v.is_number_integer()) return v.dump();
  if (v.is_number_float()) return detail::format_shortest(v.get<double>());
  std::string s = v.is_string() ? v.get<std::string>() : v.dump();
  for (char& c : s) {
    if (c == ' ' || c == '\t') c = '_';
  }
  return s;
}

std::string header_lines(const Report& r) {
  return "# schema: " + r.schema + "\n# manifest: " + r.manifest.dump() + "\n";
}

}  // namespace

std::vector<std::string> experiment_commands() {
  return {"train", "flip", "multilayer", "attack", "certify", "lipschitz", "lowrank-analyze"};
}

Report run_experiment(const std::string& command, const json& config, const json& manifest) {
  if (!config.is_object()) throw InvalidArgument("config must be a JSON object");
  Report rep;
  try {
    if (command == "train") {
      rep = cmd_train(config);
    } else if (command == "flip") {
      rep = cmd_flip(config);
    } else if (command == "multilayer") {
      rep = cmd_multilayer(config);
    } else if (command == "attack") {
      rep = cmd_attack(config);
    } else if (command == "certify") {
      rep = cmd_certify(config);
    } else if (command == "lipschitz") {
      rep = cmd_lipschitz(config);
    } else if (command == "lowrank-analyze") {
      rep = cmd_lowrank(config);
    } else {
      throw InvalidArgument("unknown command '" + command + "'");
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  rep.command = command;
  std::string tag = command;
  std::replace(tag.begin(), tag.end(), '-', '_');
  rep.schema = "perturbcert." + tag + "/v" + std::to_string(kSchemaVersion);
  rep.manifest = manifest.is_null() ? json::object() : manifest;
  return rep;
}

std::string render_csv(const Report& r) {
  std::string out = header_lines(r);
  for (std::size_t c = 0; c < r.table.columns.size(); ++c) {
    if (c > 0) out += ',';
    out += r.table.columns[c];
  }
  out += '\n';
  for (const auto& row : r.table.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) out += ',';
      out += csv_cell(row[c]);
    }
    out += '\n';
  }
  return out;
}

std::string render_json(const Report& r) {
  json rows = json::array();
  for (const auto& row : r.table.rows) {
    json o = json::object();
    for (std::size_t c = 0; c < row.size() && c < r.table.columns.size(); ++c) {
      o[r.table.columns[c]] = row[c];
    }
    rows.push_back(o);
  }
  const json doc = {{"schema", r.schema},   {"command", r.command}, {"manifest", r.manifest},
                    {"columns", r.table.columns}, {"rows", rows},   {"details", r.details}};
  return doc.dump(2) + "\n";
}

std::string render_dat(const Report& r) {
  std::string out = header_lines(r) + "#";
  for (const auto& c : r.table.columns) out += " " + c;
  out += '\n';
  for (const auto& row : r.table.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) out += ' ';
      out += dat_cell(row[c]);
    }
    out += '\n';
  }
  return out;
}

std::string git_blob_hash(std::string_view bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw std::runtime_error("sha1: out of memory");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("sha1: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

}  // namespace perturbcert
