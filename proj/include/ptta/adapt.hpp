#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ptta/common.hpp"
#include "ptta/cstu.hpp"
#include "ptta/nn.hpp"
#include "ptta/rbn.hpp"

namespace ptta {

/// exp(-age / capacity) / (1 + exp(-age / capacity))
double timeliness_weight(double age, int capacity);

inline constexpr double kLogClamp = 1e-12;

/// -(1/C) sum_c p_teacher(c) log max(p_student(c), 1e-12). With
/// `divide_by_classes` false the leading 1/C is dropped.
double consistency_loss(const Vector& teacher_probs, const Vector& student_probs,
                        bool divide_by_classes = true);

/// Mean over rows of weight_i * consistency_loss(teacher_i, softmax(student_logits_i)),
/// with its gradient w.r.t. the student logits.
nn::LossResult weighted_consistency(const Matrix& teacher_probs, const Matrix& student_logits,
                                    std::span<const double> weights, bool divide_by_classes = true);

/// Desk-scale strong view: per-feature Gaussian noise, feature dropout
/// (zeroed, not rescaled) and a per-sample uniform scale jitter.
struct StrongAugment {
  double noise_stddev = 0.25;
  double dropout = 0.1;
  double scale_min = 0.9;
  double scale_max = 1.1;

  Matrix apply(const Matrix& x, Rng& rng) const;
};

/// The weak view is the identity on feature vectors.
struct AugmentPair {
  StrongAugment strong;
  Matrix weak(const Matrix& x) const { return x; }
};

struct RobustLossResult {
  double value = 0.0;
  Matrix teacher_probs;
  nn::ForwardResult student;
  Matrix grad_logits;
};

/// Timeliness-weighted teacher/student consistency on a bank snapshot:
/// the teacher sees the weak views under `teacher_source` (which may update
/// the RBN globals), then the student sees the strong views under
/// `student_source`.
RobustLossResult robust_loss(const Matrix& weak_views, const Matrix& strong_views,
                             std::span<const double> ages, int capacity,
                             const nn::DenseNet& teacher, const nn::DenseNet& student,
                             const nn::StatsSource& teacher_source,
                             const nn::StatsSource& student_source, bool divide_by_classes = true);

enum class Method { Source, Bn, Pl, Tent, Rotta, RottaNoRbn, RottaNoCstu, RottaNoRt };

std::string_view to_string(Method method);
Method parse_method(std::string_view name);
bool is_rotta_family(Method method);

struct AdaptConfig {
  double lr = 1e-3;
  int capacity = 64;
  double alpha = kDefaultRbnAlpha;
  double nu = 0.001;
  double lambda_t = 1.0;
  double lambda_u = 1.0;
  StrongAugment strong;
  bool divide_by_classes = true;
  // RoTTA update cadence: one optimization step per this many incoming
  // samples; 0 means one step per incoming batch.
  int samples_per_update = 0;
  std::uint64_t seed = 0;
};

struct StepResult {
  std::vector<int> predictions;
  double loss = std::numeric_limits<double>::quiet_NaN();  // NaN when no update ran
  int updates = 0;
};

/// Diagnostics captured after a step, for per-batch traces.
struct AdapterProbe {
  int bank_size = 0;
  std::vector<int> occupancy;
  double mean_age = 0.0;
  double mean_uncertainty = 0.0;
  double rbn_drift = 0.0;
};

class Adapter {
 public:
  virtual ~Adapter() = default;
  /// Predicts the batch with the current model, then adapts on it.
  virtual StepResult step(const Matrix& x) = 0;
  virtual Method method() const = 0;
  virtual AdapterProbe probe() const { return {}; }
  /// The model whose outputs are reported.
  virtual const nn::DenseNet& predictor() const = 0;
};

/// Frozen source model with its running statistics.
class SourceAdapter final : public Adapter {
 public:
  explicit SourceAdapter(nn::DenseNet net) : net_(std::move(net)) {}
  StepResult step(const Matrix& x) override;
  Method method() const override { return Method::Source; }
  const nn::DenseNet& predictor() const override { return net_; }

 private:
  nn::DenseNet net_;
};

/// Test-batch statistics; optionally an affine-only gradient step per batch
/// on hard pseudo-labels (PL) or on mean prediction entropy (TENT).
class BatchStatsAdapter final : public Adapter {
 public:
  BatchStatsAdapter(Method method, nn::DenseNet net, const AdaptConfig& config);
  StepResult step(const Matrix& x) override;
  Method method() const override { return method_; }
  const nn::DenseNet& predictor() const override { return net_; }

 private:
  Method method_;
  nn::DenseNet net_;
  nn::AdamState adam_;
};

struct RottaOptions {
  bool use_rbn = true;
  bool use_cstu = true;
  bool robust_training = true;

  static RottaOptions for_method(Method method);
};

/// Robust BN + CSTU memory bank + timeliness-reweighted teacher/student.
class RottaAdapter final : public Adapter {
 public:
  RottaAdapter(const nn::DenseNet& pretrained, const AdaptConfig& config,
               RottaOptions options = {}, Method method = Method::Rotta);

  StepResult step(const Matrix& x) override;
  Method method() const override { return method_; }
  AdapterProbe probe() const override;
  const nn::DenseNet& predictor() const override {
    return options_.robust_training ? teacher_ : student_;
  }

  const nn::DenseNet& student() const { return student_; }
  const nn::DenseNet& teacher() const { return teacher_; }
  const nn::DenseNet& source() const { return source_; }
  const RbnState& rbn() const { return rbn_; }
  const MemoryBank& bank() const { return bank_; }
  const AdaptConfig& config() const { return config_; }

  /// Teacher affine parameters <- (1 - nu) teacher + nu student.
  void update_teacher();

 private:
  double optimize(const Matrix& train_x, std::span<const double> ages);

  Method method_;
  AdaptConfig config_;
  RottaOptions options_;
  nn::DenseNet source_;
  nn::DenseNet student_;
  nn::DenseNet teacher_;
  RbnState rbn_;
  MemoryBank bank_;
  nn::AdamState adam_;
  Rng rng_;
  std::int64_t pending_samples_ = 0;
};

std::unique_ptr<Adapter> make_adapter(Method method, const nn::DenseNet& pretrained,
                                      const AdaptConfig& config);

}  // namespace ptta
