// Seeded generators and adapters shared by unit, property and acceptance tests.
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "jacobi_svd.hpp"
#include "perturbcert/network.hpp"
#include "reference_net.hpp"

namespace testsupport {

using perturbcert::Activation;
using perturbcert::Index;
using perturbcert::Matrix;
using perturbcert::Network;
using perturbcert::Vector;

inline Matrix random_matrix(std::mt19937_64& rng, Index rows, Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

inline Vector random_vector(std::mt19937_64& rng, Index n, double scale = 1.0) {
  return random_matrix(rng, n, 1, scale).col(0);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform_real(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Network with the given dims and Gaussian weights scaled by 1/sqrt(fan_in).
inline Network random_network(std::mt19937_64& rng, const std::vector<Index>& dims,
                              const Activation& act) {
  std::vector<Matrix> ws;
  for (size_t l = 1; l < dims.size(); ++l) {
    ws.push_back(random_matrix(rng, dims[l], dims[l - 1],
                               1.0 / std::sqrt(static_cast<double>(dims[l - 1]))));
  }
  std::vector<Activation> acts(ws.size() - 1, act);
  return Network(std::move(ws), std::move(acts));
}

/// Random dims d_0..d_M with M in [1, max_layers] and every width in [lo, hi].
inline std::vector<Index> random_dims(std::mt19937_64& rng, int max_layers, int lo, int hi) {
  const int m = uniform_int(rng, 1, max_layers);
  std::vector<Index> dims;
  for (int i = 0; i <= m; ++i) dims.push_back(uniform_int(rng, lo, hi));
  return dims;
}

inline oracle::Dense to_dense(const Matrix& m) {
  oracle::Dense d = oracle::dense(static_cast<int>(m.rows()), static_cast<int>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) d(static_cast<int>(i), static_cast<int>(j)) = m(i, j);
  return d;
}

inline Matrix from_dense(const oracle::Dense& d) {
  Matrix m(d.rows, d.cols);
  for (int i = 0; i < d.rows; ++i)
    for (int j = 0; j < d.cols; ++j) m(i, j) = d(i, j);
  return m;
}

inline oracle::RefNet to_ref(const Network& net) {
  oracle::RefNet r;
  for (const Matrix& w : net.weights()) {
    oracle::RefLayer layer;
    layer.w.assign(w.rows(), std::vector<double>(w.cols()));
    for (Index i = 0; i < w.rows(); ++i)
      for (Index j = 0; j < w.cols(); ++j) layer.w[i][j] = w(i, j);
    r.layers.push_back(layer);
  }
  for (const Activation& a : net.activations()) {
    oracle::RefAct ra;
    switch (a.kind) {
      case Activation::Kind::kIdentity: ra.kind = oracle::RefAct::kIdentity; break;
      case Activation::Kind::kLeakyRelu: ra.kind = oracle::RefAct::kLeaky; break;
      case Activation::Kind::kTanh: ra.kind = oracle::RefAct::kTanh; break;
      case Activation::Kind::kRelu: ra.kind = oracle::RefAct::kRelu; break;
    }
    ra.alpha = a.alpha;
    r.acts.push_back(ra);
  }
  return r;
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace testsupport
