#include "perturbcert/compress.hpp"
#include "perturbcert/margin.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>

#include "format.hpp"
#include "perturbcert/errors.hpp"

namespace perturbcert {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& ctx) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || !std::isfinite(v)) {
    throw InvalidArgument("compression op '" + ctx + "': bad number '" + s + "'");
  }
  return v;
}

long parse_long(const std::string& s, const std::string& ctx) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) {
    throw InvalidArgument("compression op '" + ctx + "': bad integer '" + s + "'");
  }
  return v;
}

std::vector<int> resolve_scope(const Network& net, const std::vector<int>& scope) {
  std::vector<int> layers;
  if (scope.empty()) {
    for (int l = 1; l <= net.num_layers(); ++l) layers.push_back(l);
    return layers;
  }
  layers = scope;
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  for (int l : layers) net.check_layer(l);
  return layers;
}

void check_quantize(const QuantizeOp& op) {
  if (op.bits < 1 || op.bits > 32) {
    throw InvalidArgument("quantize: bit width must lie in [1, 32]");
  }
  if (op.symmetric) {
    if (op.bits < 2) throw InvalidArgument("quantize: symmetric mode needs at least 2 bits");
    if (op.zero_point != 0) throw InvalidArgument("quantize: symmetric mode has zero point 0");
  } else if (!(op.scale > 0.0) || !std::isfinite(op.scale)) {
    throw InvalidArgument("quantize: scale must be positive");
  }
}

}  // namespace

CompressionOp CompressionOp::parse(const std::string& text) {
  CompressionOp op;
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const std::string body = colon == std::string::npos ? "" : text.substr(colon + 1);
  std::vector<std::string> parts = body.empty() ? std::vector<std::string>{} : split(body, ',');

  auto take_scope = [&](const std::string& part) {
    if (part.rfind("layers=", 0) != 0) return false;
    for (const auto& l : split(part.substr(7), '|')) {
      op.scope.push_back(static_cast<int>(parse_long(l, text)));
    }
    if (op.scope.empty()) throw InvalidArgument("compression op '" + text + "': empty layers");
    return true;
  };

  if (head == "identity") {
    if (!parts.empty()) throw InvalidArgument("identity op takes no arguments");
    op.kind = IdentityOp{};
  } else if (head == "prune") {
    PruneOp p;
    bool have_rho = false;
    for (const auto& part : parts) {
      if (take_scope(part)) continue;
      const std::string v = part.rfind("rho=", 0) == 0 ? part.substr(4) : part;
      p.rho = parse_double(v, text);
      have_rho = true;
    }
    if (!have_rho) throw InvalidArgument("prune op '" + text + "' needs a fraction");
    if (p.rho < 0.0 || p.rho > 1.0) throw InvalidArgument("prune fraction must lie in [0, 1]");
    op.kind = p;
  } else if (head == "quant") {
    QuantizeOp q;
    bool have_bits = false, have_scale = false, sym = false, have_zero = false;
    for (const auto& part : parts) {
      if (take_scope(part)) continue;
      if (part == "sym") {
        sym = true;
      } else if (part.rfind("b=", 0) == 0) {
        q.bits = static_cast<int>(parse_long(part.substr(2), text));
        have_bits = true;
      } else if (part.rfind("s=", 0) == 0) {
        q.scale = parse_double(part.substr(2), text);
        have_scale = true;
      } else if (part.rfind("z=", 0) == 0) {
        q.zero_point = parse_long(part.substr(2), text);
        have_zero = true;
      } else {
        throw InvalidArgument("quant op '" + text + "': unknown field '" + part + "'");
      }
    }
    if (!have_bits) throw InvalidArgument("quant op '" + text + "' needs b=<bits>");
    if (sym && (have_scale || have_zero)) {
      throw InvalidArgument("quant op '" + text + "': sym computes its own scale");
    }
    if (!sym && !have_scale) {
      throw InvalidArgument("quant op '" + text + "' needs sym or s=<scale>");
    }
    q.symmetric = sym;
    check_quantize(q);
    op.kind = q;
  } else if (head == "lowrank") {
    LowRankOp lr;
    bool have_layer = false, have_k = false;
    for (const auto& part : parts) {
      if (part.rfind("layer=", 0) == 0) {
        lr.layer = static_cast<int>(parse_long(part.substr(6), text));
        have_layer = true;
      } else if (part.rfind("k=", 0) == 0) {
        lr.k = parse_long(part.substr(2), text);
        have_k = true;
      } else {
        throw InvalidArgument("lowrank op '" + text + "': unknown field '" + part + "'");
      }
    }
    if (!have_layer || !have_k) {
      throw InvalidArgument("lowrank op '" + text + "' needs layer=<n>,k=<rank>");
    }
    if (lr.k < 1) throw InvalidArgument("lowrank op: k must be at least 1");
    op.kind = lr;
  } else {
    throw InvalidArgument("unknown compression op '" + text + "'");
  }
  return op;
}

std::string CompressionOp::to_string() const {
  std::string s;
  if (std::holds_alternative<IdentityOp>(kind)) return "identity";
  if (const auto* p = std::get_if<PruneOp>(&kind)) {
    s = "prune:" + detail::format_shortest(p->rho);
  } else if (const auto* q = std::get_if<QuantizeOp>(&kind)) {
    s = "quant:b=" + std::to_string(q->bits);
    if (q->symmetric) {
      s += ",sym";
    } else {
      s += ",s=" + detail::format_shortest(q->scale) + ",z=" + std::to_string(q->zero_point);
    }
  } else if (const auto* lr = std::get_if<LowRankOp>(&kind)) {
    return "lowrank:layer=" + std::to_string(lr->layer) + ",k=" + std::to_string(lr->k);
  }
  if (!scope.empty()) {
    s += ",layers=";
    for (std::size_t i = 0; i < scope.size(); ++i) {
      if (i > 0) s += "|";
      s += std::to_string(scope[i]);
    }
  }
  return s;
}

std::vector<int> CompressionOp::affected_layers(const Network& net) const {
  if (std::holds_alternative<IdentityOp>(kind)) return {};
  if (const auto* lr = std::get_if<LowRankOp>(&kind)) {
    net.check_layer(lr->layer);
    return {lr->layer};
  }
  return resolve_scope(net, scope);
}

Compressed prune(const Network& net, double rho, const std::vector<int>& scope) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw InvalidArgument("prune: rho must lie in [0, 1]");
  const std::vector<int> layers = resolve_scope(net, scope);

  struct Entry {
    double mag;
    std::size_t flat;
    int layer;
    Index i, j;
  };
  std::vector<Entry> entries;
  for (int l : layers) {
    const Matrix& w = net.weight(l);
    for (Index i = 0; i < w.rows(); ++i)
      for (Index j = 0; j < w.cols(); ++j)
        entries.push_back({std::abs(w(i, j)), entries.size(), l, i, j});
  }
  const double total = static_cast<double>(entries.size());
  // The small slack keeps 0.1 * 10 from rounding up to 2.
  const auto quota = static_cast<std::size_t>(
      std::clamp(std::ceil(rho * total - 1e-9), 0.0, total));
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return a.mag < b.mag;
  });

  std::vector<Matrix> ws = net.weights();
  double sq = 0.0;
  for (std::size_t e = 0; e < quota; ++e) {
    double& v = ws[entries[e].layer - 1](entries[e].i, entries[e].j);
    sq += v * v;
    v = 0.0;
  }
  return {net.with_weights(std::move(ws)), std::sqrt(sq)};
}

Matrix quantize_matrix(const Matrix& w, const QuantizeOp& op) {
  check_quantize(op);
  if (op.symmetric) {
    const double qmax = std::ldexp(1.0, op.bits - 1) - 1.0;
    const double maxabs = w.cwiseAbs().maxCoeff();
    if (maxabs == 0.0) return w;
    const double s = maxabs / qmax;
    return w.unaryExpr([s, qmax](double x) {
      return std::clamp(std::nearbyint(x / s), -qmax, qmax) * s;
    });
  }
  const double hi = std::ldexp(1.0, op.bits) - 1.0;
  const double s = op.scale;
  const double z = static_cast<double>(op.zero_point);
  return w.unaryExpr([s, z, hi](double x) {
    return (std::clamp(std::nearbyint(x / s) + z, 0.0, hi) - z) * s;
  });
}

Compressed quantize(const Network& net, const QuantizeOp& op, const std::vector<int>& scope) {
  check_quantize(op);
  std::vector<Matrix> ws = net.weights();
  double sq = 0.0;
  for (int l : resolve_scope(net, scope)) {
    Matrix q = quantize_matrix(ws[l - 1], op);
    sq += (q - ws[l - 1]).squaredNorm();
    ws[l - 1] = std::move(q);
  }
  return {net.with_weights(std::move(ws)), std::sqrt(sq)};
}

Compressed apply_low_rank(const Network& net, int layer, Index k) {
  const Matrix& w = net.weight(layer);
  const Index r = std::min(w.rows(), w.cols());
  if (k < 1 || k > r) {
    throw InvalidArgument("apply_low_rank: k=" + std::to_string(k) + " outside [1, " +
                          std::to_string(r) + "] for layer " + std::to_string(layer));
  }
  if (k == r) return {net, 0.0};
  const linalg::SvdResult s = linalg::svd(w);
  const double tail = std::sqrt(s.sigma.tail(r - k).squaredNorm());
  return {net.with_weight(layer, linalg::low_rank_approx(s, k)), tail};
}

Compressed apply(const Network& net, const CompressionOp& op) {
  if (std::holds_alternative<IdentityOp>(op.kind)) return {net, 0.0};
  if (const auto* p = std::get_if<PruneOp>(&op.kind)) return prune(net, p->rho, op.scope);
  if (const auto* q = std::get_if<QuantizeOp>(&op.kind)) return quantize(net, *q, op.scope);
  const auto& lr = std::get<LowRankOp>(op.kind);
  return apply_low_rank(net, lr.layer, lr.k);
}

Matrix low_rank_backward(const Matrix& w, Index k, const Matrix& grad_wk) {
  if (grad_wk.rows() != w.rows() || grad_wk.cols() != w.cols()) {
    throw InvalidArgument("low_rank_backward: gradient shape mismatch");
  }
  const linalg::SvdResult s = linalg::svd(w);
  const Index r = s.sigma.size();
  if (k < 1 || k > r) throw InvalidArgument("low_rank_backward: k out of range");
  const Matrix& u = s.u;
  const Matrix v = s.vt.transpose();
  const Matrix h = u.transpose() * grad_wk * v;
  const double floor = 1e-12 * s.sigma(0) * s.sigma(0);

  Matrix c = Matrix::Zero(r, r);
  c.topLeftCorner(k, k) = h.topLeftCorner(k, k);
  for (Index i = 0; i < k; ++i) {
    const double si = s.sigma(i);
    for (Index j = k; j < r; ++j) {
      const double sj = s.sigma(j);
      const double d = std::max(si * si - sj * sj, floor);
      c(i, j) = si * (si * h(i, j) + sj * h(j, i)) / d;
      c(j, i) = si * (sj * h(i, j) + si * h(j, i)) / d;
    }
  }
  Matrix g = u * c * v.transpose();
  const Matrix uk = u.leftCols(k);
  const Matrix vk = v.leftCols(k);
  // Directions outside the thin bases only couple to the retained modes.
  if (w.cols() > r) g += uk * (uk.transpose() * grad_wk - (uk.transpose() * grad_wk * v) * v.transpose());
  if (w.rows() > r) g += (grad_wk * vk - u * (u.transpose() * grad_wk * vk)) * vk.transpose();
  return g;
}

LowRankMarginAnalysis low_rank_margin_analysis(const Matrix& w, const Vector& z, Index t,
                                               Index p, const std::vector<Index>& ks) {
  if (z.size() != w.cols()) throw InvalidArgument("low_rank_margin_analysis: z has wrong size");
  if (t < 0 || p < 0 || t >= w.rows() || p >= w.rows()) {
    throw InvalidArgument("low_rank_margin_analysis: class index out of range");
  }
  if (t == p) throw InvalidArgument("low_rank_margin_analysis: t and p must differ");
  const linalg::SvdResult s = linalg::svd(w);
  const Index r = s.sigma.size();

  Vector d = Vector::Zero(w.rows());
  d(t) = 1.0;
  d(p) = -1.0;
  LowRankMarginAnalysis a;
  const Vector logits = w * z;
  a.m0 = d.dot(logits);
  const Index top = argmax_columns(logits)[0];
  a.prediction_scope =
      (top == t && margin(logits, t).runner_up == p) ? "top2_pair" : "pairwise";

  const Vector du = s.u.transpose() * d;   // d^T u_i
  const Vector vz = s.vt * z;              // v_i^T z
  for (Index k : ks) {
    if (k < 1 || k > r) {
      throw InvalidArgument("low_rank_margin_analysis: k=" + std::to_string(k) +
                            " outside [1, " + std::to_string(r) + "]");
    }
    double sk = 0.0;
    for (Index i = k; i < r; ++i) sk += s.sigma(i) * du(i) * vz(i);
    const Matrix wk = linalg::low_rank_approx(s, k);
    a.ks.push_back(k);
    a.s_k.push_back(sk);
    a.s_k_direct.push_back(d.dot((w - wk) * z));
    a.flip_predicted.push_back(sk > a.m0);
    a.input_residual_norm.push_back((z - s.vt.topRows(k).transpose() * vz.head(k)).norm());
    a.output_residual_norm.push_back((d - s.u.leftCols(k) * du.head(k)).norm());
  }
  return a;
}

EnergySplit energy_split(const Matrix& w, const Vector& z, Index k,
                         const std::optional<Vector>& direction) {
  if (z.size() != w.cols()) throw InvalidArgument("energy_split: z has wrong size");
  const double zz = z.squaredNorm();
  if (!(zz > 0.0)) throw InvalidArgument("energy_split: z must be nonzero");
  if (direction && direction->size() != w.rows()) {
    throw InvalidArgument("energy_split: direction has wrong size");
  }
  const linalg::SvdResult s = linalg::svd(w);
  const Index r = s.sigma.size();
  if (k < 1 || k > r) throw InvalidArgument("energy_split: k out of range");
  const Matrix wk = k == r ? w : linalg::low_rank_approx(s, k);
  const Matrix wt = k == r ? Matrix::Zero(w.rows(), w.cols()) : Matrix(w - wk);

  auto out_energy = [&](const Matrix& a) {
    const Vector y = a * z;
    if (direction) {
      const double v = direction->dot(y);
      return v * v;
    }
    return y.squaredNorm();
  };
  auto normalised = [zz](double num, double fro_sq) {
    return fro_sq > 0.0 ? num / (fro_sq * zz) : 0.0;
  };

  EnergySplit e;
  e.directional = direction.has_value();
  e.retained_sq = out_energy(wk);
  e.tail_sq = out_energy(wt);
  e.total_sq = out_energy(w);
  const double full = w.squaredNorm();
  e.retained_own = normalised(e.retained_sq, wk.squaredNorm());
  e.tail_own = normalised(e.tail_sq, wt.squaredNorm());
  e.retained_full = normalised(e.retained_sq, full);
  e.tail_full = normalised(e.tail_sq, full);
  e.total = normalised(e.total_sq, full);
  return e;
}

}  // namespace perturbcert
