#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ptta/nn.hpp"

namespace ptta::testing {

/// Central finite differences of `loss` w.r.t. every parameter of `group`,
/// aligned with DenseNet::parameters(group).
inline std::vector<Vector> numeric_gradient(nn::DenseNet& net, nn::ParamGroup group,
                                            const std::function<double(const nn::DenseNet&)>& loss,
                                            double h = 1e-4) {
  std::vector<Vector> out;
  const auto count = net.parameters(group).size();
  for (std::size_t p = 0; p < count; ++p) {
    const auto size = net.parameters(group)[p].values.size();
    Vector g(static_cast<Eigen::Index>(size));
    for (std::size_t j = 0; j < size; ++j) {
      const double original = net.parameters(group)[p].values[j];
      net.parameters(group)[p].values[j] = original + h;
      const double up = loss(net);
      net.parameters(group)[p].values[j] = original - h;
      const double down = loss(net);
      net.parameters(group)[p].values[j] = original;
      g[static_cast<Eigen::Index>(j)] = (up - down) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// max over tensors of ||analytic - numeric|| / max(||analytic||, ||numeric||, floor).
/// The floor covers tensors whose exact gradient is zero, such as a bias
/// feeding a batch-statistics BN layer, where only rounding noise remains.
inline double max_relative_error(const std::vector<Vector>& analytic, const std::vector<Vector>& numeric,
                                 std::string* worst = nullptr, const std::vector<std::string>& names = {},
                                 double floor = 1e-6) {
  double result = 0.0;
  for (std::size_t i = 0; i < analytic.size() && i < numeric.size(); ++i) {
    const double scale = std::max({analytic[i].norm(), numeric[i].norm(), floor});
    const double err = (analytic[i] - numeric[i]).norm() / scale;
    if (err > result) {
      result = err;
      if (worst && i < names.size()) *worst = names[i];
    }
  }
  if (analytic.size() != numeric.size()) return INFINITY;
  return result;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal(rng);
  return m;
}

/// Perturbs every affine parameter so gamma != 1 and beta != 0.
inline void jitter_affine(nn::DenseNet& net, Rng& rng, double scale = 0.2) {
  std::normal_distribution<double> normal(0.0, scale);
  for (auto& p : net.parameters(nn::ParamGroup::Affine))
    for (auto& v : p.values) v += normal(rng);
}

}  // namespace ptta::testing
