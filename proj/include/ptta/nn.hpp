#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptta/common.hpp"
#include "ptta/synth_data.hpp"

namespace ptta {
class RbnState;
}

namespace ptta::nn {

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kRunningMomentum = 0.1;

struct Linear {
  Matrix weight;  // out x in
  Vector bias;
};

struct BatchNorm {
  Vector gamma;
  Vector beta;
  Vector running_mean;
  Vector running_var;
  double eps = kBnEpsilon;
};

struct Relu {};

using Layer = std::variant<Linear, BatchNorm, Relu>;

/// Per-feature mean and biased variance.
struct BnStats {
  Vector mean;
  Vector var;
};

/// Batch-axis mean and biased (divide-by-B) variance of a B x C matrix.
BnStats batch_stats(const Matrix& features);

/// gamma * (f - mean) / sqrt(var + eps) + beta, column-wise.
Matrix bn_forward(const Matrix& features, const BnStats& stats, const Vector& gamma,
                  const Vector& beta, double eps);

enum class StatsMode { TrainRunning, TestBatch, RbnGlobal };

/// Where BN layers take (mean, var) from during a forward pass. For RbnGlobal
/// with `update_rbn`, each layer first folds the incoming batch statistics
/// into the global estimate and then normalizes with the updated globals; the
/// globals are treated as constants for differentiation.
struct StatsSource {
  StatsMode mode = StatsMode::TrainRunning;
  RbnState* rbn = nullptr;
  bool update_rbn = false;

  static StatsSource train_running() { return {}; }
  static StatsSource test_batch() { return {StatsMode::TestBatch, nullptr, false}; }
  static StatsSource rbn_global(RbnState& state, bool update = false) {
    return {StatsMode::RbnGlobal, &state, update};
  }
};

enum class ParamGroup { All, Affine };

struct ParamView {
  std::string name;
  std::span<double> values;
};

/// Gradients aligned one-to-one with DenseNet::parameters(group).
struct Gradients {
  ParamGroup group = ParamGroup::All;
  std::vector<std::string> names;
  std::vector<Vector> values;
};

class DenseNet {
 public:
  DenseNet() = default;
  explicit DenseNet(std::vector<Layer> layers);

  /// in -> [Linear -> BN -> ReLU] per hidden width -> Linear(classes), He-initialized.
  static DenseNet mlp(int input_dim, const std::vector<int>& hidden, int num_classes,
                      std::uint64_t seed);

  const std::vector<Layer>& layers() const { return layers_; }
  int input_dim() const;
  int output_dim() const;

  int num_bn_layers() const { return static_cast<int>(bn_positions_.size()); }
  const BatchNorm& bn(int k) const;
  BatchNorm& bn_mut(int k);

  /// Mutable views; every call counts as a parameter mutation and invalidates tapes.
  std::vector<ParamView> parameters(ParamGroup group);
  std::vector<std::span<const double>> parameter_values(ParamGroup group) const;
  std::vector<std::string> parameter_names(ParamGroup group) const;

  std::uint64_t id() const { return id_; }
  std::uint64_t version() const { return version_; }
  void mark_modified() { ++version_; }

 private:
  void index_layers();

  std::vector<Layer> layers_;
  std::vector<std::size_t> bn_positions_;
  std::uint64_t id_ = next_id();
  std::uint64_t version_ = 0;

  static std::uint64_t next_id();

 public:
  DenseNet(const DenseNet& other);
  DenseNet& operator=(const DenseNet& other);
  DenseNet(DenseNet&&) noexcept = default;
  DenseNet& operator=(DenseNet&&) noexcept = default;
};

struct LayerCache {
  Matrix input;          // Linear: layer input; ReLU: pre-activation
  Matrix normalized;     // BN: x_hat
  Vector inv_std;        // BN
  bool batch_stats = false;
};

/// Intermediates recorded by forward() for backward(). Bound to the network
/// instance and its parameter version at record time.
struct Tape {
  std::uint64_t net_id = 0;
  std::uint64_t net_version = 0;
  std::vector<LayerCache> caches;
};

struct ForwardResult {
  Matrix logits;
  Tape tape;
};

/// Inference or adaptation forward pass. TrainRunning normalizes with the
/// stored running statistics; nothing in the net is mutated.
ForwardResult forward(const DenseNet& net, const Matrix& x, const StatsSource& source);

/// Source-training forward: batch statistics for normalization, running
/// statistics updated as 0.9 * old + 0.1 * batch.
ForwardResult forward_train(DenseNet& net, const Matrix& x);

/// Reverse-mode gradients of the loss whose logit gradient is `grad_logits`.
/// Throws Error if the tape was recorded against another net or an older
/// parameter version.
Gradients backward(const DenseNet& net, const Tape& tape, const Matrix& grad_logits,
                   ParamGroup group);

// Loss heads. Each returns the batch-mean loss and its gradient w.r.t. logits.
struct LossResult {
  double value = 0.0;
  Matrix grad_logits;
};

Matrix softmax(const Matrix& logits);
std::vector<int> argmax_rows(const Matrix& m);
LossResult cross_entropy(const Matrix& logits, std::span<const int> labels);
LossResult mean_entropy(const Matrix& logits);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Vector> first_moment;
  std::vector<Vector> second_moment;
  std::int64_t step = 0;
};

AdamState make_adam(const DenseNet& net, ParamGroup group, const AdamConfig& config);

/// Bias-corrected Adam update. Throws DivergenceError naming the first
/// parameter with a non-finite gradient, before anything is modified.
void adam_step(AdamState& state, DenseNet& net, const Gradients& grads);

struct PretrainConfig {
  int epochs = 30;
  int batch_size = 128;
  double lr = 5e-3;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  int epochs = 0;
  double final_loss = 0.0;
  double holdout_accuracy = 0.0;
};

double accuracy(const DenseNet& net, const std::vector<LabeledExample>& data);

/// Minibatch softmax cross-entropy training of all parameters.
PretrainReport pretrain(DenseNet& net, const std::vector<LabeledExample>& train,
                        const std::vector<LabeledExample>& holdout, const PretrainConfig& config);

Matrix stack_features(const std::vector<LabeledExample>& data);

// Checkpoints: <stem>.json manifest (versioned, shapes, hyperparameters) and
// <stem>.bin with little-endian float64 values in manifest order.
struct Checkpoint {
  DenseNet net;
  std::optional<std::vector<BnStats>> rbn_globals;
  double rbn_alpha = 0.0;
  nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& stem);

}  // namespace ptta::nn
