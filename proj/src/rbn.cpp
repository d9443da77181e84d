#include "ptta/rbn.hpp"

#include <cmath>
#include <string>

namespace ptta {

RbnState RbnState::init_from_pretrained(const nn::DenseNet& net, double alpha) {
  require(std::isfinite(alpha) && alpha > 0.0 && alpha <= 1.0, "rbn: alpha must lie in (0, 1]");
  require(net.num_bn_layers() > 0, "rbn: network has no BN layers");
  std::vector<nn::BnStats> globals;
  for (int k = 0; k < net.num_bn_layers(); ++k) {
    const auto& bn = net.bn(k);
    require(bn.running_mean.size() == bn.gamma.size() && bn.running_var.size() == bn.gamma.size(),
            "rbn: BN layer " + std::to_string(k) + " has no running statistics");
    globals.push_back({bn.running_mean, bn.running_var});
  }
  return from_globals(std::move(globals), alpha);
}

RbnState RbnState::from_globals(std::vector<nn::BnStats> globals, double alpha) {
  require(std::isfinite(alpha) && alpha > 0.0 && alpha <= 1.0, "rbn: alpha must lie in (0, 1]");
  for (const auto& g : globals) {
    require(g.mean.size() == g.var.size(), "rbn: mean/var width mismatch");
    require(g.mean.allFinite() && g.var.allFinite() && (g.var.array() >= 0.0).all(),
            "rbn: globals must be finite with non-negative variance");
  }
  RbnState state;
  state.globals_ = std::move(globals);
  state.alpha_ = alpha;
  return state;
}

void RbnState::ema_update(int layer, const nn::BnStats& incoming) {
  require(layer >= 0 && layer < num_layers(), "rbn: layer index out of range");
  auto& g = globals_[layer];
  require(incoming.mean.size() == g.mean.size() && incoming.var.size() == g.var.size(),
          "rbn: incoming statistics width mismatch");
  require(incoming.mean.allFinite() && incoming.var.allFinite(),
          "rbn: incoming statistics must be finite");
  require((incoming.var.array() >= 0.0).all(), "rbn: incoming variance must be non-negative");
  g.mean = (1.0 - alpha_) * g.mean + alpha_ * incoming.mean;
  g.var = (1.0 - alpha_) * g.var + alpha_ * incoming.var;
  ++layer_updates_;
}

void RbnState::ema_update(const std::vector<nn::BnStats>& incoming) {
  require(static_cast<int>(incoming.size()) == num_layers(), "rbn: layer count mismatch");
  // Validate every layer first so a bad layer leaves all globals untouched.
  for (int k = 0; k < num_layers(); ++k) {
    const auto& s = incoming[k];
    require(s.mean.size() == globals_[k].mean.size() && s.var.size() == globals_[k].var.size(),
            "rbn: incoming statistics width mismatch");
    require(s.mean.allFinite() && s.var.allFinite(), "rbn: incoming statistics must be finite");
    require((s.var.array() >= 0.0).all(), "rbn: incoming variance must be non-negative");
  }
  for (int k = 0; k < num_layers(); ++k) ema_update(k, incoming[k]);
}

const nn::BnStats& RbnState::provide(int layer) const {
  require(layer >= 0 && layer < num_layers(), "rbn: layer index out of range");
  return globals_[layer];
}

double RbnState::drift_norm(const nn::DenseNet& net) const {
  require(net.num_bn_layers() == num_layers(), "rbn: layer count mismatch");
  double sq = 0.0;
  for (int k = 0; k < num_layers(); ++k)
    sq += (globals_[k].mean - net.bn(k).running_mean).squaredNorm();
  return std::sqrt(sq);
}

}  // namespace ptta
