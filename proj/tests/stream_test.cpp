#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "ptta/stream.hpp"

using namespace ptta;

namespace {

SegmentSchedule two_segments(int examples) {
  SegmentSchedule s;
  s.examples_per_segment = examples;
  s.segments = {{CorruptionKind::GaussianNoise, 0.5, 1}, {CorruptionKind::FeatureShift, 0.5, 2}};
  return s;
}

}  // namespace

TEST(Dirichlet, SamplesLieOnSimplex) {
  Rng rng(1);
  for (double delta : {0.001, 0.01, 0.1, 1.0, 10.0}) {
    for (int rep = 0; rep < 50; ++rep) {
      const auto q = dirichlet_sample(delta, 17, rng);
      EXPECT_NEAR(q.sum(), 1.0, 1e-12);
      EXPECT_TRUE((q.array() >= 0.0).all());
      EXPECT_TRUE(q.allFinite());
    }
  }
}

TEST(Dirichlet, SingleSlotIsDegenerate) {
  const auto q = dirichlet_sample(0.1, 1, std::uint64_t{3});
  ASSERT_EQ(q.size(), 1);
  EXPECT_EQ(q[0], 1.0);
}

TEST(Dirichlet, ConcentrationControlsSpread) {
  // E[max_t q_t] is large for small delta and near 1/T scale for large delta.
  auto mean_max = [](double delta) {
    Rng rng(7);
    double total = 0.0;
    for (int rep = 0; rep < 400; ++rep) total += dirichlet_sample(delta, 10, rng).maxCoeff();
    return total / 400.0;
  };
  EXPECT_GT(mean_max(0.01), 0.9);
  EXPECT_LT(mean_max(100.0), 0.15);
  EXPECT_GT(mean_max(0.1), mean_max(1.0));
}

TEST(Dirichlet, MarginalMeanIsUniform) {
  // Symmetric Dirichlet has E[q_t] = 1/T; 3-sigma bound with Var = (T-1)/(T^2 (T delta + 1)).
  Rng rng(5);
  const int slots = 4;
  const double delta = 0.5;
  const int reps = 4000;
  Vector sum = Vector::Zero(slots);
  for (int i = 0; i < reps; ++i) sum += dirichlet_sample(delta, slots, rng);
  const double var = (slots - 1.0) / (slots * slots * (slots * delta + 1.0));
  for (int t = 0; t < slots; ++t) EXPECT_NEAR(sum[t] / reps, 1.0 / slots, 3.0 * std::sqrt(var / reps));
}

TEST(Dirichlet, RejectsBadArguments) {
  Rng rng(0);
  EXPECT_THROW(dirichlet_sample(0.0, 3, rng), Error);
  EXPECT_THROW(dirichlet_sample(-1.0, 3, rng), Error);
  EXPECT_THROW(dirichlet_sample(1.0, 0, rng), Error);
}

TEST(Apportion, WorkedExamples) {
  Vector w(3);
  w << 0.5, 0.25, 0.25;
  EXPECT_EQ(apportion(w, 10), (std::vector<int>{5, 3, 2}));  // tie on .5 goes to the lower slot
  w << 1.0 / 3, 1.0 / 3, 1.0 / 3;
  EXPECT_EQ(apportion(w, 10), (std::vector<int>{4, 3, 3}));
  w << 0.0, 1.0, 0.0;
  EXPECT_EQ(apportion(w, 7), (std::vector<int>{0, 7, 0}));
  EXPECT_EQ(apportion(w, 0), (std::vector<int>{0, 0, 0}));
}

TEST(Apportion, AlwaysSumsToTotalAndStaysWithinOneOfExact) {
  Rng rng(9);
  for (int rep = 0; rep < 500; ++rep) {
    const int slots = 1 + static_cast<int>(rng() % 40);
    const int total = static_cast<int>(rng() % 2000);
    const auto w = dirichlet_sample(0.05 + (rng() % 100) / 10.0, slots, rng);
    const auto counts = apportion(w, total);
    EXPECT_EQ(std::accumulate(counts.begin(), counts.end(), 0), total);
    for (int t = 0; t < slots; ++t) {
      EXPECT_GE(counts[t], 0);
      EXPECT_LT(std::abs(counts[t] - w[t] * total), 1.0 + 1e-9);
    }
  }
}

TEST(CorrelatedOrder, IsAPermutationOfThePool) {
  const std::vector<int> sizes = {5, 17, 1, 30};
  for (double delta : {0.01, 0.1, 1.0, 10.0}) {
    const auto order = correlated_order(sizes, 6, delta, 42);
    ASSERT_EQ(order.size(), 53u);
    std::map<std::pair<int, int>, int> seen;
    for (const auto& r : order) ++seen[{r.cls, r.index}];
    EXPECT_EQ(seen.size(), 53u);
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < sizes[c]; ++i) EXPECT_EQ((seen[{c, i}]), 1);
  }
}

TEST(CorrelatedOrder, ExplicitPartitionPlacesClassesInTheirSlots) {
  // Class 0 entirely in slot 1, class 1 entirely in slot 0: class 1 must come first.
  PartitionMatrix q(2, 2);
  q << 0.0, 1.0, 1.0, 0.0;
  const std::vector<int> sizes = {3, 4};
  const auto order = correlated_order(sizes, q, 0);
  ASSERT_EQ(order.size(), 7u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(order[i].cls, 1);
  for (int i = 4; i < 7; ++i) EXPECT_EQ(order[i].cls, 0);
}

TEST(CorrelatedOrder, RejectsMalformedInput) {
  PartitionMatrix q(2, 2);
  q << 0.5, 0.4, 0.5, 0.5;
  const std::vector<int> sizes = {3, 4};
  EXPECT_THROW(correlated_order(sizes, q, 0), Error);
  const std::vector<int> empty_class = {3, 0};
  EXPECT_THROW(correlated_order(empty_class, 2, 0.1, 0), Error);
}

TEST(BuildCorrelatedSegment, PreservesMultiset) {
  const auto task = default_task(0);
  std::vector<std::vector<LabeledExample>> by_class(task.num_classes);
  for (const auto& ex : generate_examples(task, 7, 1)) by_class[ex.y].push_back(ex);
  const auto seg = build_correlated_segment(by_class, 5, 0.1, 3);
  ASSERT_EQ(seg.size(), 70u);
  std::vector<int> counts(task.num_classes, 0);
  for (const auto& ex : seg) ++counts[ex.y];
  for (int c : counts) EXPECT_EQ(c, 7);
}

TEST(PttaStream, EverySegmentReplaysThePoolExactlyOnce) {
  const auto task = default_task(2);
  const auto pool = generate_balanced(task, 300, 1);
  const auto stream = build_ptta_stream(two_segments(300), task, pool, {0.1, 64, 0, 11});
  std::vector<std::vector<int>> hits(2, std::vector<int>(pool.size(), 0));
  std::size_t total = 0;
  for (const auto& b : stream) {
    EXPECT_LE(b.size(), 64u);
    for (std::size_t i = 0; i < b.size(); ++i) {
      ++hits[b.segments[i]][b.pool_indices[i]];
      EXPECT_EQ(b.examples[i].y, pool[b.pool_indices[i]].y);
    }
    total += b.size();
  }
  EXPECT_EQ(total, 600u);
  for (const auto& seg : hits)
    for (int h : seg) EXPECT_EQ(h, 1);
  // 600 = 9 * 64 + 24; the segment boundary falls inside batch 4.
  ASSERT_EQ(stream.size(), 10u);
  EXPECT_EQ(stream.back().size(), 24u);
  EXPECT_EQ(stream[4].segment_index, 0);
  EXPECT_EQ(stream[4].segments.back(), 1);
  for (std::size_t i = 0; i < stream.size(); ++i) EXPECT_EQ(stream[i].global_step, static_cast<int>(i));
}

TEST(PttaStream, CorruptionIsAppliedPerSegment) {
  const auto task = default_task(2);
  const auto pool = generate_balanced(task, 100, 1);
  const auto schedule = two_segments(100);
  const auto stream = build_ptta_stream(schedule, task, pool, {1.0, 10, 0, 0});
  for (const auto& b : stream) {
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto s = static_cast<std::size_t>(b.segments[i]);
      const auto expected = apply_corruption(pool[b.pool_indices[i]], schedule.segments[s], task,
                                             s * pool.size() + b.pool_indices[i]);
      EXPECT_EQ(b.examples[i].x, expected.x);
    }
  }
}

TEST(PttaStream, DeterministicAndSeedSensitive) {
  const auto task = default_task(2);
  const auto pool = generate_balanced(task, 200, 1);
  const auto schedule = two_segments(200);
  const StreamOptions opts{0.1, 32, 0, 5};
  const auto a = build_ptta_stream(schedule, task, pool, opts);
  const auto b = build_ptta_stream(schedule, task, pool, opts);
  auto other = opts;
  other.seed = 6;
  const auto c = build_ptta_stream(schedule, task, pool, other);
  EXPECT_EQ(manifest_hash(stream_manifest(a, schedule, opts)), manifest_hash(stream_manifest(b, schedule, opts)));
  EXPECT_NE(manifest_hash(stream_manifest(a, schedule, opts)), manifest_hash(stream_manifest(c, schedule, other)));
}

TEST(PttaStream, ManifestReplayReproducesFeatures) {
  const auto task = default_task(4);
  const auto pool = generate_balanced(task, 150, 1);
  const auto schedule = two_segments(150);
  const StreamOptions opts{0.1, 16, 0, 8};
  const auto stream = build_ptta_stream(schedule, task, pool, opts);
  const auto manifest = nlohmann::json::parse(stream_manifest(stream, schedule, opts).dump());
  const auto replayed = replay_stream(manifest, task, pool);
  ASSERT_EQ(replayed.size(), stream.size());
  for (std::size_t i = 0; i < stream.size(); ++i) {
    ASSERT_EQ(replayed[i].size(), stream[i].size());
    EXPECT_EQ(replayed[i].features(), stream[i].features());
    EXPECT_EQ(replayed[i].labels(), stream[i].labels());
  }
  auto bad = manifest;
  bad["version"] = 2;
  EXPECT_THROW(replay_stream(bad, task, pool), Error);
}

TEST(PttaStream, ValidatesInputs) {
  const auto task = default_task(0);
  const auto pool = generate_balanced(task, 100, 1);
  auto schedule = two_segments(100);
  EXPECT_THROW(build_ptta_stream(two_segments(99), task, pool, {}), Error);
  EXPECT_THROW(build_ptta_stream(schedule, task, pool, {0.0, 64, 0, 0}), Error);
  EXPECT_THROW(build_ptta_stream(schedule, task, pool, {0.1, 0, 0, 0}), Error);
  schedule.segments.pop_back();
  EXPECT_THROW(build_ptta_stream(schedule, task, pool, {}), Error);
  schedule.allow_single_segment = true;
  EXPECT_NO_THROW(build_ptta_stream(schedule, task, pool, {}));
  schedule.segments[0].severity = 2.0;
  EXPECT_THROW(validate(schedule), Error);
}

TEST(LabelStatistics, ClosedForms) {
  const std::vector<int> uniform = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  EXPECT_NEAR(label_entropy(uniform, 10), std::log(10.0), 1e-15);
  const std::vector<int> single(64, 3);
  EXPECT_EQ(label_entropy(single, 10), 0.0);
  EXPECT_EQ(majority_fraction(single, 10), 1.0);
  const std::vector<int> half = {1, 1, 2, 2};
  EXPECT_NEAR(label_entropy(half, 10), std::log(2.0), 1e-15);
  EXPECT_EQ(majority_fraction(half, 10), 0.5);
}

TEST(LabelStatistics, SmallDeltaLowersBatchEntropy) {
  const auto task = default_task(0);
  const auto pool = generate_balanced(task, 1024, 1);
  const auto schedule = two_segments(1024);
  const auto correlated = stream_statistics(build_ptta_stream(schedule, task, pool, {0.1, 64, 0, 1}), 10);
  const auto mixed = stream_statistics(build_ptta_stream(schedule, task, pool, {10.0, 64, 0, 1}), 10);
  EXPECT_LT(correlated.mean_label_entropy, mixed.mean_label_entropy);
  EXPECT_GT(correlated.fraction_majority_over_half, mixed.fraction_majority_over_half);
  EXPECT_EQ(correlated.num_batches, 32u);
}
