#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "ptta/common.hpp"

namespace ptta {

/// Gaussian-blob classification task: class c draws x ~ N(center_c, stddev^2 I).
struct TaskSpec {
  int num_classes = 10;
  int feature_dim = 16;
  std::vector<Vector> class_centers;
  double within_class_stddev = 1.0;
  std::uint64_t seed = 0;
};

struct LabeledExample {
  Vector x;
  int y = 0;
};

enum class CorruptionKind {
  Identity,
  GaussianNoise,
  FeatureShift,
  Rotation2dPairs,
  FeatureScale,
  OcclusionMask,
};

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::Identity;
  double severity = 0.0;
  std::uint64_t seed = 0;
};

std::string_view to_string(CorruptionKind kind);
CorruptionKind parse_corruption_kind(std::string_view name);

// Severity maps. Noise and shift magnitudes are in units of the task's
// within-class stddev so corruptions stay comparable across tasks.
inline constexpr double kNoiseStddevPerUnit = 1.5;
inline constexpr double kShiftMagnitudePerUnit = 8.0;
inline constexpr double kMaxRotationDegrees = 90.0;
inline constexpr double kMaxScaleFactor = 2.0;

/// Centers drawn from N(0, I) with the given seed, then frozen.
TaskSpec make_task(int num_classes, int feature_dim, double within_class_stddev, std::uint64_t seed);

/// 10 classes, 16 features, stddev 0.7.
TaskSpec default_task(std::uint64_t seed);

/// Throws Error on non-finite or duplicated centers, non-positive stddev, or shape mismatch.
void validate(const TaskSpec& spec);

/// Class-major list of num_classes * n_per_class examples. `stream` selects an
/// independent draw for the same task (0 = source training set, 1 = holdout).
std::vector<LabeledExample> generate_examples(const TaskSpec& spec, int n_per_class,
                                              std::uint64_t stream);

/// `total` examples spread as evenly as possible over classes (lower class
/// indices take the remainder), class-major.
std::vector<LabeledExample> generate_balanced(const TaskSpec& spec, int total, std::uint64_t stream);

inline std::vector<LabeledExample> generate_source_set(const TaskSpec& spec, int n_per_class) {
  return generate_examples(spec, n_per_class, 0);
}
inline std::vector<LabeledExample> generate_holdout_set(const TaskSpec& spec, int n_per_class) {
  return generate_examples(spec, n_per_class, 1);
}

/// A corruption bound to a task. The fixed parts of the transform (shift
/// direction, rotation pairing, occlusion offset) are drawn once from the
/// spec's seed; per-sample randomness is keyed by `sample_key`.
class Corruptor {
 public:
  Corruptor(const CorruptionSpec& spec, const TaskSpec& task);

  LabeledExample apply(const LabeledExample& example, std::uint64_t sample_key) const;

  const CorruptionSpec& spec() const { return spec_; }
  double noise_stddev() const;
  double shift_magnitude() const;
  double scale_factor() const;
  int occluded_width() const;

 private:
  CorruptionSpec spec_;
  int dim_;
  double unit_;
  Vector shift_direction_;
  std::vector<int> pair_order_;
  int occlusion_start_ = 0;
};

LabeledExample apply_corruption(const LabeledExample& example, const CorruptionSpec& spec,
                                const TaskSpec& task, std::uint64_t sample_key);

// Line-oriented dataset format:
//   ptta-dataset classes=<C> dim=<d>
//   <y>\t<x_0>,<x_1>,...,<x_{d-1}>
void write_dataset(std::ostream& out, const std::vector<LabeledExample>& data, int num_classes,
                   int feature_dim);

struct Dataset {
  int num_classes = 0;
  int feature_dim = 0;
  std::vector<LabeledExample> examples;
};

Dataset read_dataset(std::istream& in);

}  // namespace ptta
