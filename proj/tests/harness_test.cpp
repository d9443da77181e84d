#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "ptta/harness.hpp"

using namespace ptta;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.num_classes = 4;
  c.feature_dim = 6;
  c.within_class_stddev = 0.5;
  c.hidden = {16};
  c.source_per_class = 100;
  c.pretrain_epochs = 6;
  c.segments = {{CorruptionKind::FeatureShift, 0.5, 1}, {CorruptionKind::GaussianNoise, 0.5, 2},
                {CorruptionKind::FeatureScale, 0.5, 3}};
  c.examples_per_segment = 256;
  c.batch_size = 16;
  c.capacity = 16;
  c.seeds = {0, 1};
  return c;
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("ptta_harness_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string to_csv(const std::vector<RunReport>& reports) {
  std::ostringstream out;
  write_segment_csv(out, reports);
  write_summary_csv(out, reports);
  return out.str();
}

}  // namespace

TEST(Config, DefaultsAreValid) {
  const ExperimentConfig c;
  EXPECT_TRUE(c.validate().empty());
  EXPECT_EQ(c.segments.size(), 8u);
  std::set<CorruptionKind> kinds;
  for (const auto& s : c.segments) kinds.insert(s.kind);
  EXPECT_EQ(kinds.size(), 5u);
  EXPECT_EQ(c.batch_size, 64);
  EXPECT_EQ(c.capacity, 64);
  EXPECT_EQ(c.lr, 1e-3);
}

TEST(Config, ValidateReportsEveryViolation) {
  auto c = small_config();
  c.delta = 0.0;
  c.alpha = 2.0;
  c.nu = -0.1;
  c.seeds.clear();
  const auto errors = c.validate();
  EXPECT_EQ(errors.size(), 4u);
  try {
    c.check();
    FAIL() << "expected Error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    for (const auto& err : errors) EXPECT_NE(msg.find(err), std::string::npos) << err;
  }
}

TEST(Config, JsonRoundTripAndUnknownFields) {
  auto c = small_config();
  c.method = Method::Tent;
  c.trace_dir = "traces";
  const auto back = ExperimentConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());

  auto j = c.to_json();
  j["learning_rate"] = 0.1;
  EXPECT_THROW(ExperimentConfig::from_json(j), Error);
  EXPECT_THROW(ExperimentConfig::from_json({{"method", "cotta"}}), Error);
  EXPECT_THROW(ExperimentConfig::from_json({{"segments", {{{"kind", "blur"}, {"severity", 0.5}}}}}), Error);
  // Missing fields keep their defaults.
  EXPECT_EQ(ExperimentConfig::from_json({{"delta", 1.0}}).capacity, 64);
}

TEST(Config, HashIgnoresSeedsAndOutputButNotSettings) {
  const auto base = small_config();
  auto other = base;
  other.seeds = {7, 8, 9};
  other.trace_dir = "elsewhere";
  EXPECT_EQ(other.hash(), base.hash());
  other.delta = 1.0;
  EXPECT_NE(other.hash(), base.hash());
}

TEST(Sweep, AxesApplyTheirPoints) {
  const auto base = small_config();
  EXPECT_EQ(apply_sweep_point(base, "delta", "0.01").delta, 0.01);
  EXPECT_EQ(apply_sweep_point(base, "alpha", "0.5").alpha, 0.5);
  EXPECT_EQ(apply_sweep_point(base, "nu", "0.05").nu, 0.05);
  const auto lam = apply_sweep_point(base, "lambda_ratio", "1.5/0.5");
  EXPECT_EQ(lam.lambda_t, 1.5);
  EXPECT_EQ(lam.lambda_u, 0.5);
  const auto big = apply_sweep_point(base, "batch_size", "128");
  EXPECT_EQ(big.batch_size, 128);
  EXPECT_EQ(big.samples_per_update, base.batch_size);
  EXPECT_THROW(apply_sweep_point(base, "depth", "3"), Error);
  EXPECT_THROW(apply_sweep_point(base, "batch_size", "12.5"), Error);
  EXPECT_THROW(apply_sweep_point(base, "lambda_ratio", "1.0"), Error);
  EXPECT_THROW(apply_sweep_point(base, "delta", "0.1x"), Error);
}

TEST(Sweep, DefaultGridsIncludeEndpoints) {
  EXPECT_EQ(default_sweep_values("delta"), (std::vector<std::string>{"10", "1", "0.1", "0.01"}));
  const auto lam = default_sweep_values("lambda_ratio");
  EXPECT_EQ(lam.front(), "0.0/2.0");
  EXPECT_EQ(lam.back(), "2.0/0.0");
  EXPECT_THROW(default_sweep_values("depth"), Error);
}

TEST(Sweep, SingleValueRejected) {
  Harness h(1);
  EXPECT_THROW(h.sweep("delta", {"0.1"}, small_config(), {Method::Bn}), Error);
}

TEST(Harness, SourceOnIdentityScheduleMatchesHoldoutError) {
  auto c = small_config();
  c.segments = {{CorruptionKind::Identity, 0.0, 1}, {CorruptionKind::Identity, 0.0, 2}};
  c.method = Method::Source;
  c.seeds = {3};
  const auto model = prepare_model(c, 3);
  const auto r = run_single(c, 3, model);
  EXPECT_NEAR(r.avg_error_pct, 100.0 * (1.0 - model.holdout_accuracy), 1e-9);
  for (const auto& s : r.segments) {
    EXPECT_EQ(s.examples, 256);
    EXPECT_NEAR(s.error_pct, r.avg_error_pct, 1e-9);
  }
}

TEST(Harness, MethodsShareOneStreamPerSeed) {
  Harness h(1);
  const auto reports = h.compare(small_config(), {Method::Source, Method::Bn, Method::Rotta});
  ASSERT_EQ(reports.size(), 6u);
  std::map<std::uint64_t, std::set<std::uint64_t>> hashes;
  for (const auto& r : reports) hashes[r.seed].insert(r.stream_hash);
  ASSERT_EQ(hashes.size(), 2u);
  EXPECT_EQ(hashes[0].size(), 1u);
  EXPECT_EQ(hashes[1].size(), 1u);
  EXPECT_NE(*hashes[0].begin(), *hashes[1].begin());
  // Method-major, seed order within each method.
  EXPECT_EQ(reports[0].method, Method::Source);
  EXPECT_EQ(reports[1].seed, 1u);
  EXPECT_EQ(reports[5].method, Method::Rotta);
}

TEST(Harness, AverageErrorIsExampleWeighted) {
  Harness h(1);
  auto c = small_config();
  c.method = Method::Bn;
  const auto reports = h.run_experiment(c);
  ASSERT_EQ(reports.size(), 2u);
  for (const auto& r : reports) {
    int total = 0, wrong = 0;
    for (const auto& s : r.segments) {
      total += s.examples;
      wrong += s.errors;
      EXPECT_NEAR(s.error_pct, 100.0 * s.errors / s.examples, 1e-12);
    }
    EXPECT_EQ(total, 3 * 256);
    EXPECT_NEAR(r.avg_error_pct, 100.0 * wrong / total, 1e-12);
  }
}

TEST(Harness, CsvOutputIsDeterministicAcrossRunsAndThreadCounts) {
  const auto c = small_config();
  const std::vector<Method> methods = {Method::Tent, Method::Rotta};
  Harness a(1), b(2);
  EXPECT_EQ(to_csv(a.compare(c, methods)), to_csv(b.compare(c, methods)));
}

TEST(Harness, AblationSuiteRunsFourVariants) {
  Harness h(1);
  auto c = small_config();
  c.seeds = {0};
  const auto reports = h.ablation_suite(c);
  std::vector<Method> got;
  for (const auto& r : reports) got.push_back(r.method);
  EXPECT_EQ(got, (std::vector<Method>{Method::Rotta, Method::RottaNoRbn, Method::RottaNoCstu, Method::RottaNoRt}));
  c.method = Method::Bn;
  EXPECT_THROW(h.ablation_suite(c), Error);
}

TEST(Harness, SweepRowsCoverEveryCell) {
  Harness h(1);
  auto c = small_config();
  c.seeds = {0};
  const auto rows = h.sweep("delta", {"10", "0.1"}, c, {Method::Source, Method::Bn});
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].value, "10");
  EXPECT_EQ(rows[3].value, "0.1");
  // Source does not adapt and sees the same examples, so its error is order invariant.
  EXPECT_NEAR(rows[0].avg_error, rows[2].avg_error, 1e-12);
}

TEST(Harness, PretrainedModelRoundTripsThroughCheckpoint) {
  const auto dir = scratch_dir("ckpt");
  auto c = small_config();
  const auto model = prepare_model(c, 0);
  save_pretrained(dir / "source", model, c, 0);
  const auto back = load_pretrained(dir / "source");
  EXPECT_EQ(back.holdout_accuracy, model.holdout_accuracy);
  ASSERT_EQ(back.pool.size(), model.pool.size());
  EXPECT_EQ(back.pool[17].x, model.pool[17].x);

  c.method = Method::Rotta;
  const auto fresh = run_single(c, 0, model);
  c.checkpoint = (dir / "source").string();
  const auto loaded = run_single(c, 0, prepare_model(c, 0));
  EXPECT_EQ(fresh.avg_error_pct, loaded.avg_error_pct);
  EXPECT_EQ(fresh.stream_hash, loaded.stream_hash);
}

TEST(Harness, RejectsMismatchedModel) {
  auto c = small_config();
  const auto model = prepare_model(c, 0);
  c.examples_per_segment = 128;
  EXPECT_THROW(run_single(c, 0, model), Error);
  c = small_config();
  c.num_classes = 5;
  EXPECT_THROW(run_single(c, 0, model), Error);
}

TEST(Harness, TraceHasOneRecordPerBatch) {
  const auto dir = scratch_dir("trace");
  auto c = small_config();
  c.trace_dir = dir.string();
  const auto model = prepare_model(c, 0);
  const auto r = run_single(c, 0, model);
  ASSERT_FALSE(r.trace_path.empty());
  std::ifstream in(r.trace_path);
  std::string line;
  int count = 0;
  int last_step = -1;
  while (std::getline(in, line)) {
    const auto rec = nlohmann::json::parse(line);
    for (const char* key : {"step", "segment", "method", "batch_error", "loss", "bank_size", "occupancy",
                            "mean_age", "mean_uncertainty", "rbn_drift"})
      EXPECT_TRUE(rec.contains(key)) << key;
    EXPECT_EQ(rec["method"], "rotta");
    EXPECT_GT(rec["step"].get<int>(), last_step);
    last_step = rec["step"].get<int>();
    EXPECT_LE(rec["bank_size"].get<int>(), 16);
    ++count;
  }
  EXPECT_EQ(count, 3 * 256 / 16);
}

TEST(Report, AggregatesSummaryAndSweepCsv) {
  std::istringstream summary(std::string(kSummaryCsvHeader) +
                             "\nbn,0,10.0,a,b\nbn,1,20.0,a,b\nrotta,0,5.0,a,b\n");
  const auto rows = aggregate_csv(summary);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].method, "bn");
  EXPECT_EQ(rows[0].count, 2u);
  EXPECT_DOUBLE_EQ(rows[0].mean, 15.0);
  EXPECT_NEAR(rows[0].stddev, std::sqrt(50.0), 1e-12);
  EXPECT_EQ(rows[1].stddev, 0.0);

  std::istringstream sweep(std::string(kSweepCsvHeader) + "\ndelta,0.1,bn,0,3\ndelta,1,bn,0,4\n");
  const auto srows = aggregate_csv(sweep);
  ASSERT_EQ(srows.size(), 2u);
  EXPECT_EQ(srows[0].group, "delta=0.1");

  std::istringstream ragged(std::string(kSummaryCsvHeader) + "\nbn,0\n");
  EXPECT_THROW(aggregate_csv(ragged), Error);
  std::istringstream wrong("a,b\n1,2\n");
  EXPECT_THROW(aggregate_csv(wrong), Error);

  std::ostringstream out;
  write_report(out, rows);
  EXPECT_EQ(out.str(), "group,method,seeds,mean_error,stddev_error\n,bn,2,15.000,7.071\n,rotta,1,5.000,0.000\n");
}

TEST(Report, CsvSchemasAreFrozen) {
  RunReport r;
  r.method = Method::Bn;
  r.seed = 2;
  r.avg_error_pct = 12.5;
  r.segments.push_back({0, {CorruptionKind::GaussianNoise, 0.5, 1}, 10, 1, 10.0});
  std::ostringstream seg, sum, sw;
  write_segment_csv(seg, {r});
  write_summary_csv(sum, {r});
  write_sweep_csv(sw, {{"delta", "0.1", Method::Rotta, 4, 3.25}});
  EXPECT_EQ(seg.str(), "method,seed,segment,kind,severity,examples,error_pct\nbn,2,0,gaussian_noise,0.500,10,10.000000\n");
  EXPECT_EQ(sum.str(), "method,seed,avg_error,config_hash,stream_hash\nbn,2,12.500000,0000000000000000,0000000000000000\n");
  EXPECT_EQ(sw.str(), "axis,value,method,seed,avg_error\ndelta,0.1,rotta,4,3.250000\n");
}

TEST(Harness, AblationFullRowMatchesStandaloneRun) {
  Harness h(1);
  auto c = small_config();
  c.seeds = {1};
  const auto suite = h.ablation_suite(c);
  const auto alone = h.run_experiment(c);
  ASSERT_EQ(alone.size(), 1u);
  EXPECT_EQ(suite[0].avg_error_pct, alone[0].avg_error_pct);
  EXPECT_EQ(suite[0].stream_hash, alone[0].stream_hash);

  auto variant = c;
  variant.method = Method::RottaNoRbn;
  std::vector<std::string> differing;
  const auto a = c.to_json(), b = variant.to_json();
  for (const auto& [key, value] : a.items())
    if (b.at(key) != value) differing.push_back(key);
  EXPECT_EQ(differing, std::vector<std::string>{"method"});
}
