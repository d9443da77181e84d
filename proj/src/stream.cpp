#include "ptta/stream.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

namespace ptta {

void validate(const SegmentSchedule& schedule) {
  require(!schedule.segments.empty(), "schedule: no segments");
  require(schedule.segments.size() >= 2 || schedule.allow_single_segment,
          "schedule: at least 2 segments required (set allow_single_segment to override)");
  require(schedule.examples_per_segment >= 1, "schedule: examples_per_segment must be positive");
  for (const auto& seg : schedule.segments) {
    require(std::isfinite(seg.severity) && seg.severity >= 0.0 && seg.severity <= 1.0,
            "schedule: severity must lie in [0, 1]");
  }
}

Vector dirichlet_sample(double delta, int slots, Rng& rng) {
  require(std::isfinite(delta) && delta > 0.0, "dirichlet_sample: delta must be positive");
  require(slots >= 1, "dirichlet_sample: slot count must be positive");
  Vector out(slots);
  if (slots == 1) {
    out[0] = 1.0;
    return out;
  }
  if (delta >= 1.0) {
    std::gamma_distribution<double> gamma(delta, 1.0);
    for (int t = 0; t < slots; ++t) out[t] = gamma(rng);
    out /= out.sum();
    return out;
  }
  // Small shapes underflow Gamma(delta) draws to zero; work in log space with
  // Gamma(delta) = Gamma(delta + 1) * U^(1/delta).
  std::gamma_distribution<double> gamma(delta + 1.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Vector log_g(slots);
  for (int t = 0; t < slots; ++t) {
    const double u = 1.0 - uniform(rng);  // (0, 1]
    log_g[t] = std::log(gamma(rng)) + std::log(u) / delta;
  }
  const double peak = log_g.maxCoeff();
  for (int t = 0; t < slots; ++t) out[t] = std::exp(log_g[t] - peak);
  out /= out.sum();
  return out;
}

Vector dirichlet_sample(double delta, int slots, std::uint64_t seed) {
  Rng rng(seed);
  return dirichlet_sample(delta, slots, rng);
}

PartitionMatrix draw_partition(int num_classes, int slots, double delta, Rng& rng) {
  require(num_classes >= 1, "draw_partition: no classes");
  PartitionMatrix q(num_classes, slots);
  for (int c = 0; c < num_classes; ++c) q.row(c) = dirichlet_sample(delta, slots, rng).transpose();
  return q;
}

std::vector<int> apportion(const Vector& weights, int total) {
  require(total >= 0, "apportion: negative total");
  const auto n = static_cast<int>(weights.size());
  require(n >= 1, "apportion: empty weights");
  std::vector<int> counts(n);
  std::vector<double> remainder(n);
  int assigned = 0;
  for (int t = 0; t < n; ++t) {
    require(weights[t] >= 0.0, "apportion: negative weight");
    const double exact = weights[t] * total;
    counts[t] = static_cast<int>(std::floor(exact));
    remainder[t] = exact - counts[t];
    assigned += counts[t];
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return remainder[a] > remainder[b]; });
  // Rounding drift can leave assigned off by one either way.
  for (int k = 0; assigned < total; k = (k + 1) % n, ++assigned) ++counts[order[k]];
  for (int k = n - 1; assigned > total; --assigned) {
    while (counts[order[k]] == 0) k = (k + n - 1) % n;
    --counts[order[k]];
  }
  return counts;
}

std::vector<PoolRef> correlated_order(std::span<const int> class_sizes, const PartitionMatrix& q,
                                      std::uint64_t seed) {
  const auto num_classes = static_cast<int>(class_sizes.size());
  require(num_classes >= 1, "correlated_order: empty class list");
  require(q.rows() == num_classes, "correlated_order: partition row count mismatch");
  const auto slots = static_cast<int>(q.cols());
  require(slots >= 1, "correlated_order: slot count must be positive");
  for (int c = 0; c < num_classes; ++c) {
    require(class_sizes[c] >= 1, "correlated_order: class " + std::to_string(c) + " is empty");
    require(std::abs(q.row(c).sum() - 1.0) <= 1e-9 && (q.row(c).array() >= 0.0).all(),
            "correlated_order: partition rows must be stochastic");
  }

  Rng rng(mix_seed(seed, 0x5107));
  // slot_runs[t][c] = members of class c assigned to slot t
  std::vector<std::vector<std::vector<int>>> slot_runs(
      slots, std::vector<std::vector<int>>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    std::vector<int> members(class_sizes[c]);
    std::iota(members.begin(), members.end(), 0);
    std::shuffle(members.begin(), members.end(), rng);
    const auto counts = apportion(q.row(c).transpose(), class_sizes[c]);
    auto it = members.begin();
    for (int t = 0; t < slots; ++t) {
      slot_runs[t][c].assign(it, it + counts[t]);
      it += counts[t];
    }
  }

  std::vector<PoolRef> order;
  order.reserve(std::accumulate(class_sizes.begin(), class_sizes.end(), std::size_t{0}));
  std::vector<int> class_order(num_classes);
  for (int t = 0; t < slots; ++t) {
    std::iota(class_order.begin(), class_order.end(), 0);
    Rng slot_rng(mix_seed(seed, 0x10000 + static_cast<std::uint64_t>(t)));
    std::shuffle(class_order.begin(), class_order.end(), slot_rng);
    for (int c : class_order)
      for (int idx : slot_runs[t][c]) order.push_back({c, idx});
  }
  return order;
}

std::vector<PoolRef> correlated_order(std::span<const int> class_sizes, int slots, double delta,
                                      std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xd1a1));
  const auto q = draw_partition(static_cast<int>(class_sizes.size()), slots, delta, rng);
  return correlated_order(class_sizes, q, seed);
}

std::vector<LabeledExample> build_correlated_segment(
    const std::vector<std::vector<LabeledExample>>& by_class, int slots, double delta,
    std::uint64_t seed) {
  require(!by_class.empty(), "build_correlated_segment: empty class list");
  std::vector<int> sizes;
  for (const auto& members : by_class) sizes.push_back(static_cast<int>(members.size()));
  std::vector<LabeledExample> out;
  for (const auto& ref : correlated_order(sizes, slots, delta, seed))
    out.push_back(by_class[ref.cls][ref.index]);
  return out;
}

Matrix StreamBatch::features() const {
  require(!examples.empty(), "StreamBatch: empty batch");
  Matrix x(static_cast<Eigen::Index>(examples.size()), examples.front().x.size());
  for (std::size_t i = 0; i < examples.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = examples[i].x.transpose();
  return x;
}

std::vector<int> StreamBatch::labels() const {
  std::vector<int> y;
  y.reserve(examples.size());
  for (const auto& ex : examples) y.push_back(ex.y);
  return y;
}

int default_slot_count(int examples_per_segment, int batch_size) {
  require(batch_size >= 1, "batch_size must be >= 1");
  return std::max(1, (examples_per_segment + batch_size - 1) / batch_size);
}

namespace {

std::vector<StreamBatch> chunk(const std::vector<LabeledExample>& sequence,
                               const std::vector<std::size_t>& pool_indices,
                               const std::vector<int>& segments, int batch_size) {
  std::vector<StreamBatch> batches;
  for (std::size_t start = 0; start < sequence.size(); start += batch_size) {
    const std::size_t end = std::min(sequence.size(), start + static_cast<std::size_t>(batch_size));
    StreamBatch batch;
    batch.examples.assign(sequence.begin() + start, sequence.begin() + end);
    batch.pool_indices.assign(pool_indices.begin() + start, pool_indices.begin() + end);
    batch.segments.assign(segments.begin() + start, segments.begin() + end);
    batch.segment_index = batch.segments.front();
    batch.global_step = static_cast<int>(batches.size());
    batches.push_back(std::move(batch));
  }
  return batches;
}

std::vector<std::vector<std::size_t>> group_by_class(const std::vector<LabeledExample>& pool,
                                                     int num_classes) {
  std::vector<std::vector<std::size_t>> members(num_classes);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    require(pool[i].y >= 0 && pool[i].y < num_classes, "stream: pool label out of range");
    members[pool[i].y].push_back(i);
  }
  return members;
}

}  // namespace

std::vector<StreamBatch> build_ptta_stream(const SegmentSchedule& schedule, const TaskSpec& task,
                                           const std::vector<LabeledExample>& pool,
                                           const StreamOptions& options) {
  validate(schedule);
  require(options.batch_size >= 1, "stream: batch_size must be >= 1");
  require(std::isfinite(options.delta) && options.delta > 0.0, "stream: delta must be positive");
  require(static_cast<int>(pool.size()) == schedule.examples_per_segment,
          "stream: pool size must equal examples_per_segment");
  const auto members = group_by_class(pool, task.num_classes);
  std::vector<int> sizes;
  for (const auto& m : members) sizes.push_back(static_cast<int>(m.size()));
  const int slots = options.slots > 0
                        ? options.slots
                        : default_slot_count(schedule.examples_per_segment, options.batch_size);

  std::vector<LabeledExample> sequence;
  std::vector<std::size_t> indices;
  std::vector<int> segments;
  for (std::size_t s = 0; s < schedule.segments.size(); ++s) {
    const Corruptor corruptor(schedule.segments[s], task);
    const auto seg_seed = mix_seed(options.seed, 0x5e60 + s);
    for (const auto& ref : correlated_order(sizes, slots, options.delta, seg_seed)) {
      const std::size_t pool_index = members[ref.cls][ref.index];
      const std::uint64_t key = s * pool.size() + pool_index;
      sequence.push_back(corruptor.apply(pool[pool_index], key));
      indices.push_back(pool_index);
      segments.push_back(static_cast<int>(s));
    }
  }
  return chunk(sequence, indices, segments, options.batch_size);
}

double label_entropy(std::span<const int> labels, int num_classes) {
  require(!labels.empty(), "label_entropy: empty label set");
  std::vector<double> counts(num_classes, 0.0);
  for (int y : labels) counts.at(y) += 1.0;
  const double n = static_cast<double>(labels.size());
  double h = 0.0;
  for (double c : counts)
    if (c > 0.0) h -= (c / n) * std::log(c / n);
  return h;
}

double majority_fraction(std::span<const int> labels, int num_classes) {
  require(!labels.empty(), "majority_fraction: empty label set");
  std::vector<int> counts(num_classes, 0);
  for (int y : labels) ++counts.at(y);
  return static_cast<double>(*std::max_element(counts.begin(), counts.end())) /
         static_cast<double>(labels.size());
}

StreamStatistics stream_statistics(const std::vector<StreamBatch>& stream, int num_classes) {
  StreamStatistics stats;
  for (const auto& batch : stream) {
    const auto y = batch.labels();
    stats.mean_label_entropy += label_entropy(y, num_classes);
    if (majority_fraction(y, num_classes) > 0.5) stats.fraction_majority_over_half += 1.0;
  }
  stats.num_batches = stream.size();
  if (!stream.empty()) {
    stats.mean_label_entropy /= static_cast<double>(stream.size());
    stats.fraction_majority_over_half /= static_cast<double>(stream.size());
  }
  return stats;
}

nlohmann::json stream_manifest(const std::vector<StreamBatch>& stream,
                               const SegmentSchedule& schedule, const StreamOptions& options) {
  nlohmann::json m;
  m["format"] = "ptta-stream-manifest";
  m["version"] = 1;
  m["delta"] = options.delta;
  m["batch_size"] = options.batch_size;
  m["slots"] = options.slots;
  m["seed"] = options.seed;
  m["examples_per_segment"] = schedule.examples_per_segment;
  auto& segs = m["segments"] = nlohmann::json::array();
  for (const auto& seg : schedule.segments)
    segs.push_back({{"kind", to_string(seg.kind)}, {"severity", seg.severity}, {"seed", seg.seed}});
  auto& batches = m["batches"] = nlohmann::json::array();
  for (const auto& b : stream) {
    batches.push_back({{"step", b.global_step},
                       {"segment", b.segment_index},
                       {"segments", b.segments},
                       {"indices", b.pool_indices}});
  }
  return m;
}

std::uint64_t manifest_hash(const nlohmann::json& manifest) {
  // FNV-1a over the compact dump.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : manifest.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<StreamBatch> replay_stream(const nlohmann::json& manifest, const TaskSpec& task,
                                       const std::vector<LabeledExample>& pool) {
  require(manifest.value("format", "") == "ptta-stream-manifest", "replay: not a stream manifest");
  require(manifest.value("version", 0) == 1, "replay: unsupported manifest version");
  std::vector<Corruptor> corruptors;
  for (const auto& seg : manifest.at("segments")) {
    corruptors.emplace_back(CorruptionSpec{parse_corruption_kind(seg.at("kind").get<std::string>()),
                                           seg.at("severity").get<double>(),
                                           seg.at("seed").get<std::uint64_t>()},
                            task);
  }
  std::vector<StreamBatch> stream;
  for (const auto& rec : manifest.at("batches")) {
    StreamBatch b;
    b.global_step = rec.at("step").get<int>();
    b.segment_index = rec.at("segment").get<int>();
    b.segments = rec.at("segments").get<std::vector<int>>();
    b.pool_indices = rec.at("indices").get<std::vector<std::size_t>>();
    require(b.segments.size() == b.pool_indices.size(), "replay: malformed batch record");
    for (std::size_t i = 0; i < b.pool_indices.size(); ++i) {
      const auto idx = b.pool_indices[i];
      const auto seg = static_cast<std::size_t>(b.segments[i]);
      require(idx < pool.size() && seg < corruptors.size(), "replay: index out of range");
      b.examples.push_back(corruptors[seg].apply(pool[idx], seg * pool.size() + idx));
    }
    stream.push_back(std::move(b));
  }
  return stream;
}

}  // namespace ptta
