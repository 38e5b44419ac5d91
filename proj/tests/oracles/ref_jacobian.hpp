// Parameter Jacobian of the reference evaluator by central differences, and
// its top singular value through the Jacobi SVD.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "jacobi_svd.hpp"
#include "reference_net.hpp"

namespace oracle {

// Selected entries are given per layer as 0/1 masks; columns follow layer,
// then row, then column order. Returns c x T.
inline Dense ref_parameter_jacobian(RefNet net, const std::vector<double>& x,
                                    const std::vector<std::vector<std::vector<int>>>& masks,
                                    double rel_step = 1e-6) {
  const int c = static_cast<int>(ref_forward(net, x).size());
  std::vector<std::vector<double>> cols;
  for (size_t l = 0; l < net.layers.size(); ++l) {
    auto& w = net.layers[l].w;
    for (size_t i = 0; i < w.size(); ++i) {
      for (size_t j = 0; j < w[i].size(); ++j) {
        if (masks[l][i][j] == 0) continue;
        const double orig = w[i][j];
        const double h = rel_step * std::max(1.0, std::abs(orig));
        w[i][j] = orig + h;
        const auto yp = ref_forward(net, x);
        w[i][j] = orig - h;
        const auto ym = ref_forward(net, x);
        w[i][j] = orig;
        std::vector<double> col(c);
        for (int r = 0; r < c; ++r) col[r] = (yp[r] - ym[r]) / (2.0 * h);
        cols.push_back(std::move(col));
      }
    }
  }
  Dense jac = dense(c, static_cast<int>(cols.size()));
  for (size_t k = 0; k < cols.size(); ++k)
    for (int r = 0; r < c; ++r) jac(r, static_cast<int>(k)) = cols[k][r];
  return jac;
}

inline std::vector<std::vector<std::vector<int>>> full_masks(const RefNet& net) {
  std::vector<std::vector<std::vector<int>>> m;
  for (const auto& layer : net.layers) {
    m.emplace_back(layer.w.size(), std::vector<int>(layer.w[0].size(), 1));
  }
  return m;
}

inline std::vector<std::vector<std::vector<int>>> layer_masks(const RefNet& net,
                                                              const std::vector<int>& layers) {
  auto m = full_masks(net);
  for (size_t l = 0; l < m.size(); ++l) {
    const bool keep = std::find(layers.begin(), layers.end(), static_cast<int>(l) + 1) !=
                      layers.end();
    if (!keep)
      for (auto& row : m[l]) std::fill(row.begin(), row.end(), 0);
  }
  return m;
}

inline double ref_top_singular_value(const RefNet& net, const std::vector<double>& x,
                                     const std::vector<std::vector<std::vector<int>>>& masks) {
  // One-sided Jacobi on J^T only rotates c columns.
  const auto s = singular_values(transpose(ref_parameter_jacobian(net, x, masks)));
  return s.empty() ? 0.0 : s[0];
}

}  // namespace oracle
