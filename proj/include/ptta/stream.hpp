#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ptta/common.hpp"
#include "ptta/synth_data.hpp"

namespace ptta {

/// Ordered corruption domains. Each segment replays the full test pool
/// under its own corruption.
struct SegmentSchedule {
  std::vector<CorruptionSpec> segments;
  int examples_per_segment = 0;
  bool allow_single_segment = false;
};

void validate(const SegmentSchedule& schedule);

/// Row-stochastic class-by-slot matrix; row c is Dirichlet(delta) over slots.
using PartitionMatrix = Matrix;

/// Symmetric Dirichlet(delta) draw on the T-simplex via normalized Gamma(delta, 1).
Vector dirichlet_sample(double delta, int slots, Rng& rng);
Vector dirichlet_sample(double delta, int slots, std::uint64_t seed);

PartitionMatrix draw_partition(int num_classes, int slots, double delta, Rng& rng);

/// Largest-remainder split of `total` items by `weights` (non-negative, sum 1).
/// Result sums to `total` exactly; remainder ties go to the lower slot.
std::vector<int> apportion(const Vector& weights, int total);

struct PoolRef {
  int cls = 0;
  int index = 0;  // position within the class's list
};

/// Correlated arrival order for pools of the given per-class sizes under an
/// explicit partition. Members of each class are shuffled, split across slots
/// by apportion(q.row(c)), and each slot holds contiguous per-class runs in a
/// shuffled class order.
std::vector<PoolRef> correlated_order(std::span<const int> class_sizes, const PartitionMatrix& q,
                                      std::uint64_t seed);
std::vector<PoolRef> correlated_order(std::span<const int> class_sizes, int slots, double delta,
                                      std::uint64_t seed);

std::vector<LabeledExample> build_correlated_segment(
    const std::vector<std::vector<LabeledExample>>& by_class, int slots, double delta,
    std::uint64_t seed);

struct StreamBatch {
  std::vector<LabeledExample> examples;
  std::vector<std::size_t> pool_indices;  // index of each example in the base pool
  std::vector<int> segments;              // segment of each example
  int segment_index = 0;                  // segment of the first example
  int global_step = 0;

  std::size_t size() const { return examples.size(); }
  Matrix features() const;
  std::vector<int> labels() const;
};

struct StreamOptions {
  double delta = 0.1;
  int batch_size = 64;
  int slots = 0;  // 0 selects ceil(examples_per_segment / batch_size)
  std::uint64_t seed = 0;
};

int default_slot_count(int examples_per_segment, int batch_size);

/// Corrupts the pool once per segment, orders each segment with a fresh
/// partition matrix and chunks the concatenation into batches.
std::vector<StreamBatch> build_ptta_stream(const SegmentSchedule& schedule, const TaskSpec& task,
                                           const std::vector<LabeledExample>& pool,
                                           const StreamOptions& options);

/// Shannon entropy (nats) of the empirical label distribution.
double label_entropy(std::span<const int> labels, int num_classes);
double majority_fraction(std::span<const int> labels, int num_classes);

struct StreamStatistics {
  double mean_label_entropy = 0.0;
  double fraction_majority_over_half = 0.0;
  std::size_t num_batches = 0;
};

StreamStatistics stream_statistics(const std::vector<StreamBatch>& stream, int num_classes);

/// Replay manifest: segment specs plus per-batch pool indices, no features.
nlohmann::json stream_manifest(const std::vector<StreamBatch>& stream,
                               const SegmentSchedule& schedule, const StreamOptions& options);
std::uint64_t manifest_hash(const nlohmann::json& manifest);

/// Rebuilds a stream from a manifest and the base pool it indexes.
std::vector<StreamBatch> replay_stream(const nlohmann::json& manifest, const TaskSpec& task,
                                       const std::vector<LabeledExample>& pool);

}  // namespace ptta
