#pragma once

#include <cstdint>
#include <vector>

#include "ptta/nn.hpp"

namespace ptta {

inline constexpr double kDefaultRbnAlpha = 0.05;

/// Robust BN statistics: one global (mean, var) pair per BN layer, seeded
/// from the pretrained running statistics and moved by EMA toward the
/// statistics of memory-bank batches.
class RbnState {
 public:
  RbnState() = default;

  /// Copies the net's running statistics; later updates never touch the net.
  static RbnState init_from_pretrained(const nn::DenseNet& net, double alpha = kDefaultRbnAlpha);

  /// mean <- (1 - alpha) mean + alpha * incoming.mean, same for var.
  /// Inputs are validated before anything is written.
  void ema_update(int layer, const nn::BnStats& incoming);
  void ema_update(const std::vector<nn::BnStats>& incoming);

  const nn::BnStats& provide(int layer) const;

  int num_layers() const { return static_cast<int>(globals_.size()); }
  double alpha() const { return alpha_; }
  std::uint64_t layer_updates() const { return layer_updates_; }
  const std::vector<nn::BnStats>& globals() const { return globals_; }

  /// L2 norm of the concatenated (global mean - running mean) over all layers.
  double drift_norm(const nn::DenseNet& net) const;

  static RbnState from_globals(std::vector<nn::BnStats> globals, double alpha);

 private:
  std::vector<nn::BnStats> globals_;
  double alpha_ = kDefaultRbnAlpha;
  std::uint64_t layer_updates_ = 0;
};

}  // namespace ptta
