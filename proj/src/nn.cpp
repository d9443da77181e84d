#include "ptta/nn.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "ptta/rbn.hpp"

namespace ptta::nn {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::span<double> span_of(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<double> span_of(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
std::span<const double> span_of(const Matrix& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
std::span<const double> span_of(const Vector& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

Matrix normalize(const Matrix& h, const BnStats& stats, double eps, Vector& inv_std) {
  inv_std = (stats.var.array() + eps).rsqrt().matrix();
  Matrix out = h.rowwise() - stats.mean.transpose();
  out.array().rowwise() *= inv_std.transpose().array();
  return out;
}

Matrix affine(const Matrix& normalized, const Vector& gamma, const Vector& beta) {
  Matrix out = normalized;
  out.array().rowwise() *= gamma.transpose().array();
  out.rowwise() += beta.transpose();
  return out;
}

ForwardResult run_forward(const DenseNet& net, DenseNet* trainable, const Matrix& x,
                          const StatsSource& source) {
  require(x.rows() >= 1, "forward: empty batch");
  require(x.cols() == net.input_dim(), "forward: input width " + std::to_string(x.cols()) +
                                           " does not match network input " +
                                           std::to_string(net.input_dim()));
  require(x.allFinite(), "forward: input contains non-finite values");
  if (source.mode == StatsMode::RbnGlobal) {
    require(source.rbn != nullptr, "forward: RbnGlobal source without RBN state");
    require(source.rbn->num_layers() == net.num_bn_layers(), "forward: RBN layer count mismatch");
  }

  ForwardResult result;
  result.tape.net_id = net.id();
  result.tape.net_version = net.version();
  result.tape.caches.resize(net.layers().size());
  Matrix h = x;
  int bn_index = 0;
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    auto& cache = result.tape.caches[i];
    std::visit(Overloaded{
                   [&](const Linear& lin) {
                     cache.input = h;
                     Matrix out = h * lin.weight.transpose();
                     out.rowwise() += lin.bias.transpose();
                     h = std::move(out);
                   },
                   [&](const BatchNorm& bn) {
                     const int k = bn_index++;
                     BnStats stats;
                     if (trainable != nullptr) {
                       stats = batch_stats(h);
                       auto& mut = trainable->bn_mut(k);
                       mut.running_mean = (1.0 - kRunningMomentum) * mut.running_mean +
                                          kRunningMomentum * stats.mean;
                       mut.running_var = (1.0 - kRunningMomentum) * mut.running_var +
                                         kRunningMomentum * stats.var;
                       cache.batch_stats = true;
                     } else {
                       switch (source.mode) {
                         case StatsMode::TrainRunning:
                           stats = {bn.running_mean, bn.running_var};
                           break;
                         case StatsMode::TestBatch:
                           stats = batch_stats(h);
                           cache.batch_stats = true;
                           break;
                         case StatsMode::RbnGlobal:
                           if (source.update_rbn) source.rbn->ema_update(k, batch_stats(h));
                           stats = source.rbn->provide(k);
                           break;
                       }
                     }
                     cache.normalized = normalize(h, stats, bn.eps, cache.inv_std);
                     h = affine(cache.normalized, bn.gamma, bn.beta);
                   },
                   [&](const Relu&) {
                     cache.input = h;
                     h = h.cwiseMax(0.0);
                   },
               },
               net.layers()[i]);
  }
  result.logits = std::move(h);
  return result;
}

}  // namespace

BnStats batch_stats(const Matrix& features) {
  require(features.rows() >= 1, "batch_stats: empty batch");
  const double b = static_cast<double>(features.rows());
  BnStats s;
  s.mean = features.colwise().sum().transpose() / b;
  const Matrix centered = features.rowwise() - s.mean.transpose();
  s.var = centered.array().square().colwise().sum().transpose() / b;
  return s;
}

Matrix bn_forward(const Matrix& features, const BnStats& stats, const Vector& gamma,
                  const Vector& beta, double eps) {
  const auto width = features.cols();
  require(stats.mean.size() == width && stats.var.size() == width && gamma.size() == width &&
              beta.size() == width,
          "bn_forward: shape mismatch");
  require(eps > 0.0, "bn_forward: eps must be positive");
  require((stats.var.array() >= 0.0).all(), "bn_forward: negative variance");
  Vector inv_std;
  return affine(normalize(features, stats, eps, inv_std), gamma, beta);
}

std::uint64_t DenseNet::next_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

DenseNet::DenseNet(std::vector<Layer> layers) : layers_(std::move(layers)) { index_layers(); }

DenseNet::DenseNet(const DenseNet& other)
    : layers_(other.layers_), bn_positions_(other.bn_positions_), id_(next_id()), version_(0) {}

DenseNet& DenseNet::operator=(const DenseNet& other) {
  if (this != &other) {
    layers_ = other.layers_;
    bn_positions_ = other.bn_positions_;
    ++version_;
  }
  return *this;
}

void DenseNet::index_layers() {
  bn_positions_.clear();
  long width = -1;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    std::visit(Overloaded{
                   [&](const Linear& lin) {
                     require(lin.bias.size() == lin.weight.rows(), "DenseNet: bias/weight mismatch");
                     require(width < 0 || lin.weight.cols() == width,
                             "DenseNet: layer " + std::to_string(i) + " input width mismatch");
                     width = lin.weight.rows();
                   },
                   [&](const BatchNorm& bn) {
                     require(width == bn.gamma.size() && width == bn.beta.size() &&
                                 width == bn.running_mean.size() && width == bn.running_var.size(),
                             "DenseNet: BN layer " + std::to_string(i) + " width mismatch");
                     require(bn.eps > 0.0, "DenseNet: BN eps must be positive");
                     bn_positions_.push_back(i);
                   },
                   [&](const Relu&) {},
               },
               layers_[i]);
  }
  require(!layers_.empty() && std::holds_alternative<Linear>(layers_.front()) &&
              std::holds_alternative<Linear>(layers_.back()),
          "DenseNet: first and last layers must be Linear");
}

DenseNet DenseNet::mlp(int input_dim, const std::vector<int>& hidden, int num_classes,
                       std::uint64_t seed) {
  require(input_dim >= 1 && num_classes >= 1, "mlp: bad dimensions");
  Rng rng(mix_seed(seed, 0x3e7));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto make_linear = [&](int in, int out) {
    Linear lin{Matrix(out, in), Vector::Zero(out)};
    const double scale = std::sqrt(2.0 / in);
    for (Eigen::Index r = 0; r < lin.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < lin.weight.cols(); ++c) lin.weight(r, c) = scale * normal(rng);
    return lin;
  };
  std::vector<Layer> layers;
  int width = input_dim;
  for (int h : hidden) {
    require(h >= 1, "mlp: hidden width must be positive");
    layers.emplace_back(make_linear(width, h));
    layers.emplace_back(BatchNorm{Vector::Ones(h), Vector::Zero(h), Vector::Zero(h), Vector::Ones(h)});
    layers.emplace_back(Relu{});
    width = h;
  }
  layers.emplace_back(make_linear(width, num_classes));
  return DenseNet(std::move(layers));
}

int DenseNet::input_dim() const {
  return static_cast<int>(std::get<Linear>(layers_.front()).weight.cols());
}

int DenseNet::output_dim() const {
  return static_cast<int>(std::get<Linear>(layers_.back()).weight.rows());
}

const BatchNorm& DenseNet::bn(int k) const {
  require(k >= 0 && k < num_bn_layers(), "DenseNet: BN index out of range");
  return std::get<BatchNorm>(layers_[bn_positions_[k]]);
}

BatchNorm& DenseNet::bn_mut(int k) {
  require(k >= 0 && k < num_bn_layers(), "DenseNet: BN index out of range");
  return std::get<BatchNorm>(layers_[bn_positions_[k]]);
}

std::vector<ParamView> DenseNet::parameters(ParamGroup group) {
  ++version_;
  std::vector<ParamView> views;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i) + ".";
    std::visit(Overloaded{
                   [&](Linear& lin) {
                     if (group != ParamGroup::All) return;
                     views.push_back({prefix + "weight", span_of(lin.weight)});
                     views.push_back({prefix + "bias", span_of(lin.bias)});
                   },
                   [&](BatchNorm& bn) {
                     views.push_back({prefix + "gamma", span_of(bn.gamma)});
                     views.push_back({prefix + "beta", span_of(bn.beta)});
                   },
                   [](Relu&) {},
               },
               layers_[i]);
  }
  return views;
}

std::vector<std::span<const double>> DenseNet::parameter_values(ParamGroup group) const {
  std::vector<std::span<const double>> views;
  for (const auto& layer : layers_) {
    std::visit(Overloaded{
                   [&](const Linear& lin) {
                     if (group != ParamGroup::All) return;
                     views.push_back(span_of(lin.weight));
                     views.push_back(span_of(lin.bias));
                   },
                   [&](const BatchNorm& bn) {
                     views.push_back(span_of(bn.gamma));
                     views.push_back(span_of(bn.beta));
                   },
                   [](const Relu&) {},
               },
               layer);
  }
  return views;
}

std::vector<std::string> DenseNet::parameter_names(ParamGroup group) const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i) + ".";
    if (std::holds_alternative<Linear>(layers_[i]) && group == ParamGroup::All) {
      names.push_back(prefix + "weight");
      names.push_back(prefix + "bias");
    } else if (std::holds_alternative<BatchNorm>(layers_[i])) {
      names.push_back(prefix + "gamma");
      names.push_back(prefix + "beta");
    }
  }
  return names;
}

ForwardResult forward(const DenseNet& net, const Matrix& x, const StatsSource& source) {
  return run_forward(net, nullptr, x, source);
}

ForwardResult forward_train(DenseNet& net, const Matrix& x) {
  return run_forward(net, &net, x, StatsSource::test_batch());
}

Gradients backward(const DenseNet& net, const Tape& tape, const Matrix& grad_logits,
                   ParamGroup group) {
  require(tape.net_id == net.id(), "backward: tape was recorded on a different network");
  require(tape.net_version == net.version(), "backward: stale tape (parameters changed since forward)");
  require(tape.caches.size() == net.layers().size(), "backward: tape/layer count mismatch");
  require(grad_logits.cols() == net.output_dim(), "backward: gradient width mismatch");

  const auto n_layers = net.layers().size();
  std::vector<std::pair<Vector, Vector>> per_layer(n_layers);  // (weight|gamma, bias|beta)
  Matrix g = grad_logits;
  for (std::size_t r = n_layers; r-- > 0;) {
    const auto& cache = tape.caches[r];
    require(g.rows() == (cache.input.rows() > 0 ? cache.input.rows() : cache.normalized.rows()),
            "backward: batch size mismatch");
    std::visit(Overloaded{
                   [&](const Linear& lin) {
                     if (group == ParamGroup::All) {
                       const Matrix dw = g.transpose() * cache.input;
                       per_layer[r] = {flatten(dw), g.colwise().sum().transpose()};
                     }
                     if (r > 0) g = g * lin.weight;
                   },
                   [&](const BatchNorm& bn) {
                     per_layer[r] = {(g.array() * cache.normalized.array()).colwise().sum().transpose(),
                                     g.colwise().sum().transpose()};
                     Matrix dxhat = g;
                     dxhat.array().rowwise() *= bn.gamma.transpose().array();
                     if (cache.batch_stats) {
                       const double b = static_cast<double>(g.rows());
                       const Eigen::RowVectorXd mean_d = dxhat.colwise().sum() / b;
                       const Eigen::RowVectorXd mean_dx =
                           (dxhat.array() * cache.normalized.array()).colwise().sum().matrix() / b;
                       Matrix scaled = cache.normalized;
                       scaled.array().rowwise() *= mean_dx.array();
                       dxhat = (dxhat.rowwise() - mean_d) - scaled;
                     }
                     dxhat.array().rowwise() *= cache.inv_std.transpose().array();
                     g = std::move(dxhat);
                   },
                   [&](const Relu&) { g = (cache.input.array() > 0.0).select(g, 0.0); },
               },
               net.layers()[r]);
  }

  Gradients grads;
  grads.group = group;
  grads.names = net.parameter_names(group);
  for (std::size_t i = 0; i < n_layers; ++i) {
    const bool is_linear = std::holds_alternative<Linear>(net.layers()[i]);
    const bool is_bn = std::holds_alternative<BatchNorm>(net.layers()[i]);
    if (is_bn || (is_linear && group == ParamGroup::All)) {
      grads.values.push_back(std::move(per_layer[i].first));
      grads.values.push_back(std::move(per_layer[i].second));
    }
  }
  return grads;
}

Matrix softmax(const Matrix& logits) {
  Matrix p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index best = 0;
    m.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

LossResult cross_entropy(const Matrix& logits, std::span<const int> labels) {
  require(static_cast<Eigen::Index>(labels.size()) == logits.rows(), "cross_entropy: label count mismatch");
  const double b = static_cast<double>(logits.rows());
  const Matrix shifted = logits.colwise() - logits.rowwise().maxCoeff();
  const Vector log_z = shifted.array().exp().rowwise().sum().log().matrix();
  LossResult out;
  out.grad_logits = softmax(logits);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    require(y >= 0 && y < logits.cols(), "cross_entropy: label out of range");
    out.value += log_z[r] - shifted(r, y);
    out.grad_logits(r, y) -= 1.0;
  }
  out.value /= b;
  out.grad_logits /= b;
  return out;
}

LossResult mean_entropy(const Matrix& logits) {
  const double b = static_cast<double>(logits.rows());
  const Matrix shifted = logits.colwise() - logits.rowwise().maxCoeff();
  const Vector log_z = shifted.array().exp().rowwise().sum().log().matrix();
  const Matrix log_p = shifted.colwise() - log_z;
  const Matrix p = log_p.array().exp();
  const Vector h = -(p.array() * log_p.array()).rowwise().sum().matrix();
  LossResult out;
  out.value = h.sum() / b;
  // dH/dz_k = -p_k (log p_k + H)
  out.grad_logits = -(p.array() * (log_p.colwise() + h).array()).matrix() / b;
  return out;
}

AdamState make_adam(const DenseNet& net, ParamGroup group, const AdamConfig& config) {
  require(config.lr > 0.0 && config.beta1 >= 0.0 && config.beta1 < 1.0 && config.beta2 >= 0.0 &&
              config.beta2 < 1.0 && config.eps > 0.0,
          "adam: invalid hyperparameters");
  AdamState state;
  state.config = config;
  for (const auto& p : net.parameter_values(group)) {
    state.first_moment.push_back(Vector::Zero(static_cast<Eigen::Index>(p.size())));
    state.second_moment.push_back(Vector::Zero(static_cast<Eigen::Index>(p.size())));
  }
  return state;
}

void adam_step(AdamState& state, DenseNet& net, const Gradients& grads) {
  require(grads.values.size() == state.first_moment.size(), "adam: gradient count mismatch");
  for (std::size_t i = 0; i < grads.values.size(); ++i) {
    require(grads.values[i].size() == state.first_moment[i].size(), "adam: gradient shape mismatch");
    if (!grads.values[i].allFinite())
      throw DivergenceError("adam: non-finite gradient for parameter " + grads.names.at(i));
  }
  auto params = net.parameters(grads.group);
  require(params.size() == grads.values.size(), "adam: parameter group mismatch");
  const auto& cfg = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = grads.values[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseAbs2();
    Eigen::Map<Vector> p(params[i].values.data(), static_cast<Eigen::Index>(params[i].values.size()));
    p.array() -= cfg.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
  }
}

Matrix stack_features(const std::vector<LabeledExample>& data) {
  require(!data.empty(), "stack_features: empty data");
  Matrix x(static_cast<Eigen::Index>(data.size()), data.front().x.size());
  for (std::size_t i = 0; i < data.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = data[i].x.transpose();
  return x;
}

double accuracy(const DenseNet& net, const std::vector<LabeledExample>& data) {
  if (data.empty()) return 0.0;
  const auto pred = argmax_rows(forward(net, stack_features(data), StatsSource::train_running()).logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) correct += pred[i] == data[i].y;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

PretrainReport pretrain(DenseNet& net, const std::vector<LabeledExample>& train,
                        const std::vector<LabeledExample>& holdout, const PretrainConfig& config) {
  require(!train.empty(), "pretrain: empty source set");
  require(config.epochs >= 0 && config.batch_size >= 2, "pretrain: invalid configuration");
  auto adam = make_adam(net, ParamGroup::All, AdamConfig{config.lr});
  Rng rng(mix_seed(config.seed, 0x9e7));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  PretrainReport report;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      if (end - start < 2) break;
      Matrix x(static_cast<Eigen::Index>(end - start), net.input_dim());
      std::vector<int> y;
      for (std::size_t i = start; i < end; ++i) {
        x.row(static_cast<Eigen::Index>(i - start)) = train[order[i]].x.transpose();
        y.push_back(train[order[i]].y);
      }
      auto fwd = forward_train(net, x);
      const auto loss = cross_entropy(fwd.logits, y);
      if (!std::isfinite(loss.value)) {
        throw DivergenceError("pretrain: loss became non-finite at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(batches));
      }
      adam_step(adam, net, backward(net, fwd.tape, loss.grad_logits, ParamGroup::All));
      loss_sum += loss.value;
      ++batches;
    }
    report.final_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    report.epochs = epoch + 1;
  }
  report.holdout_accuracy = accuracy(net, holdout);
  return report;
}

namespace {

constexpr std::string_view kCheckpointFormat = "ptta-checkpoint";
constexpr int kCheckpointVersion = 1;

void append(std::vector<double>& blob, std::span<const double> values) {
  blob.insert(blob.end(), values.begin(), values.end());
}

std::uint64_t to_little_endian(std::uint64_t bits) {
  if constexpr (std::endian::native == std::endian::little) {
    return bits;
  } else {
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) out |= ((bits >> (8 * i)) & 0xff) << (8 * (7 - i));
    return out;
  }
}

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  auto p = stem;
  p += ext;
  return p;
}

class BlobReader {
 public:
  explicit BlobReader(std::vector<double> values) : values_(std::move(values)) {}
  void fill(std::span<double> out) {
    require(pos_ + out.size() <= values_.size(), "checkpoint: blob is truncated");
    std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>(pos_), out.size(), out.begin());
    pos_ += out.size();
  }
  bool exhausted() const { return pos_ == values_.size(); }

 private:
  std::vector<double> values_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& checkpoint) {
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = kCheckpointVersion;
  manifest["dtype"] = "float64-le";
  std::vector<double> blob;
  auto& layers = manifest["layers"] = nlohmann::json::array();
  for (const auto& layer : checkpoint.net.layers()) {
    std::visit(Overloaded{
                   [&](const Linear& lin) {
                     layers.push_back({{"type", "linear"}, {"in", lin.weight.cols()}, {"out", lin.weight.rows()}});
                     append(blob, span_of(lin.weight));
                     append(blob, span_of(lin.bias));
                   },
                   [&](const BatchNorm& bn) {
                     layers.push_back({{"type", "batchnorm"}, {"width", bn.gamma.size()}, {"eps", bn.eps}});
                     append(blob, span_of(bn.gamma));
                     append(blob, span_of(bn.beta));
                     append(blob, span_of(bn.running_mean));
                     append(blob, span_of(bn.running_var));
                   },
                   [&](const Relu&) { layers.push_back({{"type", "relu"}}); },
               },
               layer);
  }
  if (checkpoint.rbn_globals) {
    manifest["rbn"] = {{"alpha", checkpoint.rbn_alpha}, {"layers", checkpoint.rbn_globals->size()}};
    for (const auto& g : *checkpoint.rbn_globals) {
      append(blob, span_of(g.mean));
      append(blob, span_of(g.var));
    }
  } else {
    manifest["rbn"] = nullptr;
  }
  manifest["blob"] = with_ext(stem, ".bin").filename().string();
  manifest["blob_values"] = blob.size();
  manifest["metadata"] = checkpoint.metadata;

  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::ofstream bin(with_ext(stem, ".bin"), std::ios::binary);
  require(bin.good(), "checkpoint: cannot open " + with_ext(stem, ".bin").string());
  for (double v : blob) {
    const auto le = to_little_endian(std::bit_cast<std::uint64_t>(v));
    bin.write(reinterpret_cast<const char*>(&le), sizeof(le));
  }
  std::ofstream js(with_ext(stem, ".json"));
  require(js.good(), "checkpoint: cannot open " + with_ext(stem, ".json").string());
  js << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  std::ifstream js(with_ext(stem, ".json"));
  require(js.good(), "checkpoint: cannot open " + with_ext(stem, ".json").string());
  const auto manifest = nlohmann::json::parse(js);
  require(manifest.value("format", "") == kCheckpointFormat, "checkpoint: bad format tag");
  require(manifest.value("version", 0) == kCheckpointVersion, "checkpoint: unsupported version");

  const auto count = manifest.at("blob_values").get<std::size_t>();
  std::ifstream bin(with_ext(stem, ".bin"), std::ios::binary);
  require(bin.good(), "checkpoint: cannot open " + with_ext(stem, ".bin").string());
  std::vector<double> values(count);
  for (auto& v : values) {
    std::uint64_t le = 0;
    bin.read(reinterpret_cast<char*>(&le), sizeof(le));
    require(bin.gcount() == sizeof(le), "checkpoint: blob is truncated");
    v = std::bit_cast<double>(to_little_endian(le));
  }
  BlobReader reader(std::move(values));

  std::vector<Layer> layers;
  for (const auto& spec : manifest.at("layers")) {
    const auto type = spec.at("type").get<std::string>();
    if (type == "linear") {
      const auto in = spec.at("in").get<Eigen::Index>();
      const auto out = spec.at("out").get<Eigen::Index>();
      Linear lin{Matrix(out, in), Vector(out)};
      reader.fill(span_of(lin.weight));
      reader.fill(span_of(lin.bias));
      layers.emplace_back(std::move(lin));
    } else if (type == "batchnorm") {
      const auto w = spec.at("width").get<Eigen::Index>();
      BatchNorm bn{Vector(w), Vector(w), Vector(w), Vector(w), spec.at("eps").get<double>()};
      reader.fill(span_of(bn.gamma));
      reader.fill(span_of(bn.beta));
      reader.fill(span_of(bn.running_mean));
      reader.fill(span_of(bn.running_var));
      layers.emplace_back(std::move(bn));
    } else if (type == "relu") {
      layers.emplace_back(Relu{});
    } else {
      throw Error("checkpoint: unknown layer type '" + type + "'");
    }
  }
  Checkpoint cp{DenseNet(std::move(layers)), std::nullopt, 0.0, manifest.value("metadata", nlohmann::json::object())};
  if (!manifest.at("rbn").is_null()) {
    cp.rbn_alpha = manifest["rbn"].at("alpha").get<double>();
    std::vector<BnStats> globals;
    for (int k = 0; k < cp.net.num_bn_layers(); ++k) {
      const auto w = cp.net.bn(k).gamma.size();
      BnStats s{Vector(w), Vector(w)};
      reader.fill(span_of(s.mean));
      reader.fill(span_of(s.var));
      globals.push_back(std::move(s));
    }
    cp.rbn_globals = std::move(globals);
  }
  require(reader.exhausted(), "checkpoint: blob has trailing values");
  return cp;
}

}  // namespace ptta::nn
