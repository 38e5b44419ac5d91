#include "perturbcert/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "format.hpp"
#include "perturbcert/errors.hpp"

namespace perturbcert {

namespace {

constexpr double kTanhClamp = 1.0 - 1e-12;
constexpr double kInverseResidualTol = 1e-6;

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Activation Activation::leaky_relu(double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw InvalidArgument("LeakyReLU slope must be strictly positive");
  }
  return {Kind::kLeakyRelu, alpha};
}

Activation Activation::parse(const std::string& text) {
  if (text == "identity" || text == "linear") return identity();
  if (text == "tanh") return tanh();
  if (text == "relu") return relu();
  const std::string prefix = "leaky_relu:";
  if (text.rfind(prefix, 0) == 0) {
    std::size_t used = 0;
    const std::string num = text.substr(prefix.size());
    double alpha = 0.0;
    try {
      alpha = std::stod(num, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != num.size()) {
      throw InvalidArgument("bad LeakyReLU slope in '" + text + "'");
    }
    return leaky_relu(alpha);
  }
  throw InvalidArgument("unknown activation '" + text + "'");
}

std::string Activation::to_string() const {
  switch (kind) {
    case Kind::kIdentity: return "identity";
    case Kind::kTanh: return "tanh";
    case Kind::kRelu: return "relu";
    case Kind::kLeakyRelu: return "leaky_relu:" + detail::format_shortest(alpha);
  }
  return "identity";
}

Matrix activation_apply(const Activation& act, const Matrix& v) {
  switch (act.kind) {
    case Activation::Kind::kIdentity: return v;
    case Activation::Kind::kTanh: return v.array().tanh().matrix();
    case Activation::Kind::kRelu: return v.cwiseMax(0.0);
    case Activation::Kind::kLeakyRelu:
      return v.unaryExpr([a = act.alpha](double x) { return x >= 0.0 ? x : a * x; });
  }
  return v;
}

Matrix activation_invert(const Activation& act, const Matrix& v) {
  switch (act.kind) {
    case Activation::Kind::kIdentity: return v;
    case Activation::Kind::kLeakyRelu:
      return v.unaryExpr([a = act.alpha](double x) { return x >= 0.0 ? x : x / a; });
    case Activation::Kind::kTanh: {
      if ((v.array().abs() >= 1.0).any()) {
        throw TanhRangeError("tanh inverse: target magnitude >= 1");
      }
      return v.unaryExpr([](double x) {
        return std::atanh(std::clamp(x, -kTanhClamp, kTanhClamp));
      });
    }
    case Activation::Kind::kRelu: {
      if ((v.array() <= 0.0).any()) {
        throw ReluBranchError("relu inverse: non-positive value outside the identity branch");
      }
      return v;
    }
  }
  return v;
}

Matrix activation_derivative(const Activation& act, const Matrix& z) {
  switch (act.kind) {
    case Activation::Kind::kIdentity: return Matrix::Ones(z.rows(), z.cols());
    case Activation::Kind::kTanh:
      return z.unaryExpr([](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
    case Activation::Kind::kRelu:
      return z.unaryExpr([](double x) { return x >= 0.0 ? 1.0 : 0.0; });
    case Activation::Kind::kLeakyRelu:
      return z.unaryExpr([a = act.alpha](double x) { return x >= 0.0 ? 1.0 : a; });
  }
  return Matrix::Ones(z.rows(), z.cols());
}

Network::Network(std::vector<Matrix> weights, std::vector<Activation> activations)
    : weights_(std::move(weights)), activations_(std::move(activations)) {
  if (weights_.empty()) {
    throw InvalidArgument("network needs at least one layer");
  }
  if (activations_.size() + 1 != weights_.size()) {
    throw InvalidArgument("network with " + std::to_string(weights_.size()) +
                          " layers needs " + std::to_string(weights_.size() - 1) +
                          " activations, got " + std::to_string(activations_.size()));
  }
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    if (weights_[l].rows() == 0 || weights_[l].cols() == 0) {
      throw InvalidArgument("layer " + std::to_string(l + 1) + " has an empty weight");
    }
    linalg::require_finite(weights_[l], "network weight");
    if (l > 0 && weights_[l].cols() != weights_[l - 1].rows()) {
      throw InvalidArgument("layer " + std::to_string(l + 1) + " weight " +
                            shape(weights_[l]) + " does not follow " +
                            shape(weights_[l - 1]));
    }
  }
  for (const auto& a : activations_) {
    if (a.kind == Activation::Kind::kLeakyRelu && !(a.alpha > 0.0)) {
      throw InvalidArgument("LeakyReLU slope must be strictly positive");
    }
  }
}

std::vector<Index> Network::dims() const {
  std::vector<Index> d;
  d.push_back(weights_.front().cols());
  for (const auto& w : weights_) d.push_back(w.rows());
  return d;
}

void Network::check_layer(int layer) const {
  if (layer < 1 || layer > num_layers()) {
    throw InvalidArgument("layer index " + std::to_string(layer) + " outside [1, " +
                          std::to_string(num_layers()) + "]");
  }
}

const Matrix& Network::weight(int layer) const {
  check_layer(layer);
  return weights_[layer - 1];
}

const Activation& Network::activation(int layer) const {
  if (layer < 1 || layer >= num_layers()) {
    throw InvalidArgument("no activation after layer " + std::to_string(layer));
  }
  return activations_[layer - 1];
}

Index Network::parameter_count() const {
  Index n = 0;
  for (const auto& w : weights_) n += w.size();
  return n;
}

Network Network::with_weight(int layer, Matrix w) const {
  check_layer(layer);
  std::vector<Matrix> ws = weights_;
  ws[layer - 1] = std::move(w);
  return Network(std::move(ws), activations_);
}

Network Network::with_weights(std::vector<Matrix> ws) const {
  return Network(std::move(ws), activations_);
}

Matrix forward(const Network& net, const Matrix& x) {
  if (x.rows() != net.input_dim()) {
    throw InvalidArgument("forward: input has " + std::to_string(x.rows()) +
                          " rows, network expects " + std::to_string(net.input_dim()));
  }
  Matrix z = x;
  const int m = net.num_layers();
  for (int l = 1; l < m; ++l) {
    z = activation_apply(net.activation(l), net.weight(l) * z);
  }
  return net.weight(m) * z;
}

Matrix upstream(const Network& net, int n, const Matrix& x) {
  net.check_layer(n);
  if (x.rows() != net.input_dim()) {
    throw InvalidArgument("upstream: input dimension mismatch");
  }
  Matrix z = x;
  for (int l = 1; l < n; ++l) {
    z = activation_apply(net.activation(l), net.weight(l) * z);
  }
  return z;
}

Matrix downstream(const Network& net, int n, const Matrix& z) {
  net.check_layer(n);
  if (z.rows() != net.weight(n).rows()) {
    throw InvalidArgument("downstream: expected " + std::to_string(net.weight(n).rows()) +
                          " rows, got " + std::to_string(z.rows()));
  }
  Matrix cur = z;
  for (int l = n; l < net.num_layers(); ++l) {
    cur = net.weight(l + 1) * activation_apply(net.activation(l), cur);
  }
  return cur;
}

Matrix downstream_inverse(const Network& net, int n, const Matrix& y_target,
                          const Matrix& z_reference) {
  net.check_layer(n);
  const int m = net.num_layers();
  if (z_reference.rows() != net.weight(n).rows()) {
    throw InvalidArgument("downstream_inverse: reference has wrong row count");
  }
  if (y_target.rows() != net.output_dim() || y_target.cols() != z_reference.cols()) {
    throw InvalidArgument("downstream_inverse: target shape " + shape(y_target) +
                          " incompatible with reference " + shape(z_reference));
  }
  if (n == m) return y_target;

  // ref_pre[l] is the pre-activation reaching layer l's output when the
  // reference is pushed forward; index n holds z_reference itself.
  std::vector<Matrix> ref_pre(m + 1);
  ref_pre[n] = z_reference;
  for (int l = n; l < m; ++l) {
    ref_pre[l + 1] = net.weight(l + 1) * activation_apply(net.activation(l), ref_pre[l]);
  }

  Matrix cur = y_target;
  for (int l = m; l > n; --l) {
    const Matrix& w = net.weight(l);
    const Activation& act = net.activation(l - 1);
    const Matrix a_ref = activation_apply(act, ref_pre[l - 1]);
    const Matrix rhs = cur - w * a_ref;

    Matrix a;
    if (w.rows() == w.cols()) {
      Eigen::FullPivLU<Matrix> lu(w);
      if (lu.isInvertible()) {
        a = a_ref + lu.solve(rhs);
      } else {
        a = a_ref + linalg::pinv(w) * rhs;
      }
    } else {
      a = a_ref + linalg::pinv(w) * rhs;
    }
    const double residual = (w * a - cur).norm();
    if (!(residual <= kInverseResidualTol * std::max(1.0, cur.norm()))) {
      throw RankDeficientDownstream(
          "downstream_inverse: layer " + std::to_string(l) +
              " has no exact right inverse (residual " + std::to_string(residual) + ")",
          residual);
    }

    if (act.kind == Activation::Kind::kRelu) {
      if ((ref_pre[l - 1].array() <= 0.0).any() || (a.array() <= 0.0).any()) {
        throw ReluBranchError("downstream_inverse: ReLU after layer " +
                              std::to_string(l - 1) +
                              " leaves the strictly positive branch");
      }
    }
    cur = activation_invert(act, a);
  }
  return cur;
}

ForwardTrace forward_trace(const Network& net, const Matrix& x) {
  if (x.rows() != net.input_dim()) {
    throw InvalidArgument("forward_trace: input dimension mismatch");
  }
  ForwardTrace t;
  const int m = net.num_layers();
  t.inputs.reserve(m);
  t.preacts.reserve(m);
  t.inputs.push_back(x);
  for (int l = 1; l <= m; ++l) {
    t.preacts.push_back(net.weight(l) * t.inputs.back());
    if (l < m) t.inputs.push_back(activation_apply(net.activation(l), t.preacts.back()));
  }
  return t;
}

std::vector<Matrix> backward(const Network& net, const ForwardTrace& trace,
                             const Matrix& dlogits, Matrix* dinput) {
  const int m = net.num_layers();
  if (dlogits.rows() != net.output_dim() || dlogits.cols() != trace.logits().cols()) {
    throw InvalidArgument("backward: gradient shape does not match logits");
  }
  std::vector<Matrix> grads(m);
  Matrix delta = dlogits;
  for (int l = m; l >= 1; --l) {
    grads[l - 1].noalias() = delta * trace.inputs[l - 1].transpose();
    if (l > 1 || dinput != nullptr) {
      Matrix back = net.weight(l).transpose() * delta;
      if (l > 1) {
        delta = back.cwiseProduct(activation_derivative(net.activation(l - 1),
                                                        trace.preacts[l - 2]));
      } else {
        *dinput = std::move(back);
      }
    }
  }
  return grads;
}

std::vector<Matrix> backward(const Network& net, const ForwardTrace& trace,
                             const Matrix& dlogits) {
  return backward(net, trace, dlogits, nullptr);
}

std::vector<Index> argmax_columns(const Matrix& logits) {
  std::vector<Index> out(logits.cols());
  for (Index j = 0; j < logits.cols(); ++j) {
    Index best = 0;
    for (Index i = 1; i < logits.rows(); ++i) {
      if (logits(i, j) > logits(best, j)) best = i;
    }
    out[j] = best;
  }
  return out;
}

Network init_network(const std::vector<Index>& dims, const Activation& hidden,
                     std::uint64_t seed, InitScheme scheme) {
  if (dims.size() < 2) {
    throw InvalidArgument("init_network: need at least input and output dims");
  }
  std::mt19937_64 rng(seed);
  std::vector<Matrix> ws;
  for (std::size_t l = 1; l < dims.size(); ++l) {
    const Index rows = dims[l];
    const Index cols = dims[l - 1];
    if (rows < 1 || cols < 1) throw InvalidArgument("init_network: dims must be positive");
    const double fan_in = static_cast<double>(cols);
    Matrix w(rows, cols);
    if (scheme == InitScheme::kUniformFanIn) {
      std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(fan_in),
                                                  1.0 / std::sqrt(fan_in));
      for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) w(i, j) = dist(rng);
    } else {
      const double var = (scheme == InitScheme::kHeNormal ? 2.0 : 1.0) / fan_in;
      std::normal_distribution<double> dist(0.0, std::sqrt(var));
      for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) w(i, j) = dist(rng);
    }
    ws.push_back(std::move(w));
  }
  std::vector<Activation> acts(ws.size() - 1, hidden);
  return Network(std::move(ws), std::move(acts));
}

nlohmann::json network_to_json(const Network& net) {
  nlohmann::json doc;
  doc["dims"] = net.dims();
  nlohmann::json acts = nlohmann::json::array();
  for (const auto& a : net.activations()) acts.push_back(a.to_string());
  doc["activations"] = acts;
  nlohmann::json ws = nlohmann::json::array();
  for (const auto& w : net.weights()) {
    std::vector<double> flat;
    flat.reserve(w.size());
    for (Index i = 0; i < w.rows(); ++i)
      for (Index j = 0; j < w.cols(); ++j) flat.push_back(w(i, j));
    ws.push_back(flat);
  }
  doc["weights"] = ws;
  return doc;
}

Network network_from_json(const nlohmann::json& doc) {
  try {
    const auto dims = doc.at("dims").get<std::vector<Index>>();
    const auto& wdoc = doc.at("weights");
    if (dims.size() < 2 || wdoc.size() + 1 != dims.size()) {
      throw InvalidArgument("network json: dims and weights disagree");
    }
    std::vector<Matrix> ws;
    for (std::size_t l = 0; l < wdoc.size(); ++l) {
      const auto flat = wdoc[l].get<std::vector<double>>();
      const Index rows = dims[l + 1];
      const Index cols = dims[l];
      if (rows < 1 || cols < 1 || static_cast<Index>(flat.size()) != rows * cols) {
        throw InvalidArgument("network json: layer " + std::to_string(l + 1) +
                              " has " + std::to_string(flat.size()) + " entries");
      }
      Matrix w(rows, cols);
      for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) w(i, j) = flat[i * cols + j];
      ws.push_back(std::move(w));
    }
    std::vector<Activation> acts;
    if (doc.contains("activations")) {
      for (const auto& a : doc.at("activations")) {
        acts.push_back(Activation::parse(a.get<std::string>()));
      }
    }
    return Network(std::move(ws), std::move(acts));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("network json: ") + e.what());
  }
}

}  // namespace perturbcert
