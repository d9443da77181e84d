#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptta/adapt.hpp"
#include "ptta/nn.hpp"
#include "ptta/stream.hpp"
#include "ptta/synth_data.hpp"

namespace ptta {

/// Eight-segment benchmark: each corruption family appears at least once.
std::vector<CorruptionSpec> default_segments();

struct ExperimentConfig {
  // task
  int num_classes = 10;
  int feature_dim = 16;
  double within_class_stddev = 0.7;
  std::vector<int> hidden = {64, 64};
  // pretraining
  int source_per_class = 500;
  int pretrain_epochs = 20;
  double pretrain_lr = 5e-3;
  int pretrain_batch = 128;
  std::optional<std::string> checkpoint;
  // stream
  std::vector<CorruptionSpec> segments = default_segments();
  int examples_per_segment = 10240;
  double delta = 0.1;
  int batch_size = 64;
  // method
  Method method = Method::Rotta;
  int capacity = 64;
  double alpha = 0.05;
  double nu = 0.001;
  double lambda_t = 1.0;
  double lambda_u = 1.0;
  double lr = 1e-3;
  bool divide_by_classes = true;
  int samples_per_update = 0;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  // output
  std::optional<std::string> trace_dir;

  /// Every violated constraint, one message each; empty when valid.
  std::vector<std::string> validate() const;
  /// Throws Error listing every violation.
  void check() const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  /// FNV-1a of the canonical JSON, excluding seeds and output locations.
  std::uint64_t hash() const;

  AdaptConfig adapt_config(std::uint64_t seed) const;
  SegmentSchedule schedule(std::uint64_t seed) const;
  StreamOptions stream_options(std::uint64_t seed) const;
};

/// Source-trained model plus the clean test pool its holdout accuracy was
/// measured on. The pool is what every stream segment corrupts.
struct PretrainedModel {
  TaskSpec task;
  nn::DenseNet net;
  std::vector<LabeledExample> pool;
  double holdout_accuracy = 0.0;
  nn::PretrainReport report;
};

PretrainedModel prepare_model(const ExperimentConfig& config, std::uint64_t seed);

/// Thread-safe memo of prepare_model keyed by the task/pretraining fields.
class ModelCache {
 public:
  std::shared_ptr<const PretrainedModel> get(const ExperimentConfig& config, std::uint64_t seed);

 private:
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const PretrainedModel>> cache_;
};

void save_pretrained(const std::filesystem::path& stem, const PretrainedModel& model,
                     const ExperimentConfig& config, std::uint64_t seed);
PretrainedModel load_pretrained(const std::filesystem::path& stem);

struct SegmentResult {
  int segment = 0;
  CorruptionSpec corruption;
  int examples = 0;
  int errors = 0;
  double error_pct = 0.0;
};

struct RunReport {
  Method method = Method::Source;
  std::uint64_t seed = 0;
  std::vector<SegmentResult> segments;
  double avg_error_pct = 0.0;  // example-weighted over segments
  std::string trace_path;
  double wall_seconds = 0.0;
  std::uint64_t config_hash = 0;
  std::uint64_t stream_hash = 0;
};

/// Builds the seed's stream, adapts online and scores predictions made
/// before each batch's own update.
RunReport run_single(const ExperimentConfig& config, std::uint64_t seed, const PretrainedModel& model);

class Harness {
 public:
  explicit Harness(unsigned threads = 0);

  /// One report per seed, in seed order.
  std::vector<RunReport> run_experiment(const ExperimentConfig& config);
  /// Runs every (method, seed) cell with a shared stream per seed.
  std::vector<RunReport> compare(const ExperimentConfig& config, const std::vector<Method>& methods);
  /// Full RoTTA plus its three single-component ablations.
  std::vector<RunReport> ablation_suite(const ExperimentConfig& base);

  struct SweepRow {
    std::string axis;
    std::string value;
    Method method;
    std::uint64_t seed;
    double avg_error;
  };
  std::vector<SweepRow> sweep(const std::string& axis, const std::vector<std::string>& values,
                              const ExperimentConfig& base, const std::vector<Method>& methods);

  ModelCache& models() { return models_; }

 private:
  template <class Cell, class Result>
  std::vector<Result> run_cells(const std::vector<Cell>& cells,
                                const std::function<Result(const Cell&)>& fn);

  unsigned threads_;
  ModelCache models_;
};

/// Applies one sweep point to a copy of `base`. Axes: delta, batch_size,
/// alpha, nu, lambda_ratio ("t/u"). Batch-size points keep RoTTA's
/// back-propagated sample count at the base batch size per update.
ExperimentConfig apply_sweep_point(const ExperimentConfig& base, const std::string& axis,
                                   const std::string& value);

std::vector<std::string> default_sweep_values(const std::string& axis);

double mean_error(const std::vector<RunReport>& reports, Method method);

// Frozen CSV schemas.
inline constexpr const char* kSegmentCsvHeader = "method,seed,segment,kind,severity,examples,error_pct";
inline constexpr const char* kSummaryCsvHeader = "method,seed,avg_error,config_hash,stream_hash";
inline constexpr const char* kSweepCsvHeader = "axis,value,method,seed,avg_error";

void write_segment_csv(std::ostream& out, const std::vector<RunReport>& reports);
void write_summary_csv(std::ostream& out, const std::vector<RunReport>& reports);
void write_sweep_csv(std::ostream& out, const std::vector<Harness::SweepRow>& rows);

struct SummaryRow {
  std::string group;  // "axis=value" for sweeps, empty otherwise
  std::string method;
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;
};

/// Aggregates summary or sweep CSVs into per-(group, method) mean and stddev
/// of avg_error across seeds.
std::vector<SummaryRow> aggregate_csv(std::istream& in);
void write_report(std::ostream& out, const std::vector<SummaryRow>& rows);

}  // namespace ptta
