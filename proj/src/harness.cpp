#include "ptta/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <thread>

namespace ptta {

namespace {

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string format_double(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_number(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw Error(what + ": cannot parse '" + text + "'");
  }
  require(used == text.size(), what + ": trailing characters in '" + text + "'");
  return v;
}

}  // namespace

std::vector<CorruptionSpec> default_segments() {
  return {
      {CorruptionKind::FeatureShift, 1.0, 1},     {CorruptionKind::GaussianNoise, 1.0, 2},
      {CorruptionKind::FeatureScale, 1.0, 3},     {CorruptionKind::Rotation2dPairs, 0.3, 4},
      {CorruptionKind::FeatureShift, 0.7, 5},     {CorruptionKind::OcclusionMask, 0.25, 6},
      {CorruptionKind::FeatureScale, 0.6, 7},     {CorruptionKind::GaussianNoise, 0.6, 8},
  };
}

std::vector<std::string> ExperimentConfig::validate() const {
  std::vector<std::string> errors;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };
  check(num_classes >= 2, "num_classes must be >= 2");
  check(feature_dim >= 1, "feature_dim must be >= 1");
  check(std::isfinite(within_class_stddev) && within_class_stddev > 0.0,
        "within_class_stddev must be positive");
  check(!hidden.empty(), "hidden must list at least one width");
  for (int h : hidden) check(h >= 1, "hidden widths must be positive");
  check(source_per_class >= 1, "source_per_class must be >= 1");
  check(pretrain_epochs >= 0, "pretrain_epochs must be >= 0");
  check(pretrain_lr > 0.0, "pretrain_lr must be positive");
  check(pretrain_batch >= 2, "pretrain_batch must be >= 2");
  check(segments.size() >= 2, "segments: at least 2 required");
  for (const auto& s : segments)
    check(std::isfinite(s.severity) && s.severity >= 0.0 && s.severity <= 1.0,
          "segments: severity must lie in [0, 1]");
  check(examples_per_segment >= num_classes, "examples_per_segment must be >= num_classes");
  check(std::isfinite(delta) && delta > 0.0, "delta must be positive");
  check(batch_size >= 1, "batch_size must be >= 1");
  check(capacity >= 1, "capacity must be >= 1");
  check(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
  check(nu >= 0.0 && nu <= 1.0, "nu must lie in [0, 1]");
  check(std::isfinite(lambda_t) && lambda_t >= 0.0, "lambda_t must be non-negative");
  check(std::isfinite(lambda_u) && lambda_u >= 0.0, "lambda_u must be non-negative");
  check(std::isfinite(lr) && lr > 0.0, "lr must be positive");
  check(samples_per_update >= 0, "samples_per_update must be >= 0");
  check(!seeds.empty(), "seeds must not be empty");
  return errors;
}

void ExperimentConfig::check() const {
  const auto errors = validate();
  if (errors.empty()) return;
  std::string msg = "invalid experiment configuration:";
  for (const auto& e : errors) msg += "\n  - " + e;
  throw Error(msg);
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["num_classes"] = num_classes;
  j["feature_dim"] = feature_dim;
  j["within_class_stddev"] = within_class_stddev;
  j["hidden"] = hidden;
  j["source_per_class"] = source_per_class;
  j["pretrain_epochs"] = pretrain_epochs;
  j["pretrain_lr"] = pretrain_lr;
  j["pretrain_batch"] = pretrain_batch;
  j["checkpoint"] = checkpoint ? nlohmann::json(*checkpoint) : nlohmann::json(nullptr);
  auto& segs = j["segments"] = nlohmann::json::array();
  for (const auto& s : segments)
    segs.push_back({{"kind", to_string(s.kind)}, {"severity", s.severity}, {"seed", s.seed}});
  j["examples_per_segment"] = examples_per_segment;
  j["delta"] = delta;
  j["batch_size"] = batch_size;
  j["method"] = to_string(method);
  j["capacity"] = capacity;
  j["alpha"] = alpha;
  j["nu"] = nu;
  j["lambda_t"] = lambda_t;
  j["lambda_u"] = lambda_u;
  j["lr"] = lr;
  j["divide_by_classes"] = divide_by_classes;
  j["samples_per_update"] = samples_per_update;
  j["seeds"] = seeds;
  j["trace_dir"] = trace_dir ? nlohmann::json(*trace_dir) : nlohmann::json(nullptr);
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  const std::vector<std::string> known = {
      "num_classes", "feature_dim", "within_class_stddev", "hidden", "source_per_class",
      "pretrain_epochs", "pretrain_lr", "pretrain_batch", "checkpoint", "segments",
      "examples_per_segment", "delta", "batch_size", "method", "capacity", "alpha", "nu",
      "lambda_t", "lambda_u", "lr", "divide_by_classes", "samples_per_update", "seeds", "trace_dir"};
  for (const auto& [key, _] : j.items())
    require(std::find(known.begin(), known.end(), key) != known.end(),
            "config: unknown field '" + key + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("num_classes", c.num_classes);
  get("feature_dim", c.feature_dim);
  get("within_class_stddev", c.within_class_stddev);
  get("hidden", c.hidden);
  get("source_per_class", c.source_per_class);
  get("pretrain_epochs", c.pretrain_epochs);
  get("pretrain_lr", c.pretrain_lr);
  get("pretrain_batch", c.pretrain_batch);
  if (j.contains("checkpoint") && !j["checkpoint"].is_null())
    c.checkpoint = j["checkpoint"].get<std::string>();
  if (j.contains("segments")) {
    c.segments.clear();
    for (const auto& s : j["segments"])
      c.segments.push_back({parse_corruption_kind(s.at("kind").get<std::string>()),
                            s.at("severity").get<double>(), s.value("seed", std::uint64_t{0})});
  }
  get("examples_per_segment", c.examples_per_segment);
  get("delta", c.delta);
  get("batch_size", c.batch_size);
  if (j.contains("method")) c.method = parse_method(j["method"].get<std::string>());
  get("capacity", c.capacity);
  get("alpha", c.alpha);
  get("nu", c.nu);
  get("lambda_t", c.lambda_t);
  get("lambda_u", c.lambda_u);
  get("lr", c.lr);
  get("divide_by_classes", c.divide_by_classes);
  get("samples_per_update", c.samples_per_update);
  get("seeds", c.seeds);
  if (j.contains("trace_dir") && !j["trace_dir"].is_null())
    c.trace_dir = j["trace_dir"].get<std::string>();
  return c;
}

std::uint64_t ExperimentConfig::hash() const {
  auto j = to_json();
  j.erase("seeds");
  j.erase("trace_dir");
  return fnv1a(j.dump());
}

AdaptConfig ExperimentConfig::adapt_config(std::uint64_t seed) const {
  AdaptConfig a;
  a.lr = lr;
  a.capacity = capacity;
  a.alpha = alpha;
  a.nu = nu;
  a.lambda_t = lambda_t;
  a.lambda_u = lambda_u;
  a.strong.noise_stddev = 0.5 * within_class_stddev;
  a.divide_by_classes = divide_by_classes;
  a.samples_per_update = samples_per_update;
  a.seed = mix_seed(seed, 0xada);
  return a;
}

SegmentSchedule ExperimentConfig::schedule(std::uint64_t seed) const {
  SegmentSchedule s;
  s.examples_per_segment = examples_per_segment;
  for (const auto& seg : segments) s.segments.push_back({seg.kind, seg.severity, mix_seed(seed, seg.seed)});
  return s;
}

StreamOptions ExperimentConfig::stream_options(std::uint64_t seed) const {
  return {delta, batch_size, 0, mix_seed(seed, 0x57e)};
}

PretrainedModel prepare_model(const ExperimentConfig& config, std::uint64_t seed) {
  if (config.checkpoint) return load_pretrained(*config.checkpoint);
  PretrainedModel m;
  m.task = make_task(config.num_classes, config.feature_dim, config.within_class_stddev, seed);
  m.pool = generate_balanced(m.task, config.examples_per_segment, 1);
  m.net = nn::DenseNet::mlp(config.feature_dim, config.hidden, config.num_classes, seed);
  const auto train = generate_source_set(m.task, config.source_per_class);
  m.report = nn::pretrain(m.net, train, m.pool,
                          {config.pretrain_epochs, config.pretrain_batch, config.pretrain_lr, seed});
  m.holdout_accuracy = m.report.holdout_accuracy;
  return m;
}

std::shared_ptr<const PretrainedModel> ModelCache::get(const ExperimentConfig& config,
                                                       std::uint64_t seed) {
  nlohmann::json key = {config.num_classes,   config.feature_dim,      config.within_class_stddev,
                        config.hidden,        config.source_per_class, config.pretrain_epochs,
                        config.pretrain_lr,   config.pretrain_batch,   config.examples_per_segment,
                        seed,                 config.checkpoint ? *config.checkpoint : ""};
  const auto k = key.dump();
  {
    std::lock_guard lock(mutex_);
    if (auto it = cache_.find(k); it != cache_.end()) return it->second;
  }
  auto model = std::make_shared<const PretrainedModel>(prepare_model(config, seed));
  std::lock_guard lock(mutex_);
  return cache_.emplace(k, std::move(model)).first->second;
}

void save_pretrained(const std::filesystem::path& stem, const PretrainedModel& model,
                     const ExperimentConfig& config, std::uint64_t seed) {
  nn::Checkpoint cp{model.net, std::nullopt, 0.0, nlohmann::json::object()};
  auto& meta = cp.metadata;
  meta["seed"] = seed;
  meta["holdout_accuracy"] = model.holdout_accuracy;
  meta["pretrain"] = {{"epochs", config.pretrain_epochs}, {"lr", config.pretrain_lr},
                      {"batch", config.pretrain_batch}, {"source_per_class", config.source_per_class}};
  auto& task = meta["task"];
  task["num_classes"] = model.task.num_classes;
  task["feature_dim"] = model.task.feature_dim;
  task["within_class_stddev"] = model.task.within_class_stddev;
  task["seed"] = model.task.seed;
  auto& centers = task["class_centers"] = nlohmann::json::array();
  for (const auto& c : model.task.class_centers)
    centers.push_back(std::vector<double>(c.data(), c.data() + c.size()));
  meta["pool_size"] = model.pool.size();
  nn::save_checkpoint(stem, cp);
}

PretrainedModel load_pretrained(const std::filesystem::path& stem) {
  auto cp = nn::load_checkpoint(stem);
  const auto& meta = cp.metadata;
  require(meta.contains("task") && meta.contains("pool_size"),
          "checkpoint: missing task metadata in " + stem.string());
  PretrainedModel m;
  const auto& t = meta["task"];
  m.task.num_classes = t.at("num_classes").get<int>();
  m.task.feature_dim = t.at("feature_dim").get<int>();
  m.task.within_class_stddev = t.at("within_class_stddev").get<double>();
  m.task.seed = t.at("seed").get<std::uint64_t>();
  for (const auto& c : t.at("class_centers")) {
    const auto v = c.get<std::vector<double>>();
    m.task.class_centers.emplace_back(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
  }
  validate(m.task);
  m.pool = generate_balanced(m.task, meta["pool_size"].get<int>(), 1);
  m.net = std::move(cp.net);
  m.holdout_accuracy = nn::accuracy(m.net, m.pool);
  m.report.holdout_accuracy = m.holdout_accuracy;
  return m;
}

RunReport run_single(const ExperimentConfig& config, std::uint64_t seed, const PretrainedModel& model) {
  config.check();
  require(model.task.num_classes == config.num_classes && model.task.feature_dim == config.feature_dim,
          "run: pretrained model does not match the configured task shape");
  require(static_cast<int>(model.pool.size()) == config.examples_per_segment,
          "run: test pool size does not match examples_per_segment");
  const auto start = std::chrono::steady_clock::now();
  const auto schedule = config.schedule(seed);
  const auto options = config.stream_options(seed);
  const auto stream = build_ptta_stream(schedule, model.task, model.pool, options);

  RunReport report;
  report.method = config.method;
  report.seed = seed;
  report.config_hash = config.hash();
  report.stream_hash = manifest_hash(stream_manifest(stream, schedule, options));
  for (std::size_t s = 0; s < schedule.segments.size(); ++s)
    report.segments.push_back({static_cast<int>(s), schedule.segments[s], 0, 0, 0.0});

  std::ofstream trace;
  if (config.trace_dir) {
    std::filesystem::create_directories(*config.trace_dir);
    report.trace_path = (std::filesystem::path(*config.trace_dir) /
                         (std::string(to_string(config.method)) + "_seed" + std::to_string(seed) + ".jsonl"))
                            .string();
    trace.open(report.trace_path);
    require(trace.good(), "run: cannot open trace file " + report.trace_path);
  }

  auto adapter = make_adapter(config.method, model.net, config.adapt_config(seed));
  for (const auto& batch : stream) {
    StepResult result;
    try {
      result = adapter->step(batch.features());
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string(e.what()) + " (method " + std::string(to_string(config.method)) +
                            ", seed " + std::to_string(seed) + ", step " +
                            std::to_string(batch.global_step) + ")");
    }
    int batch_errors = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto& seg = report.segments[static_cast<std::size_t>(batch.segments[i])];
      ++seg.examples;
      if (result.predictions[i] != batch.examples[i].y) {
        ++seg.errors;
        ++batch_errors;
      }
    }
    if (trace.is_open()) {
      const auto probe = adapter->probe();
      nlohmann::json rec;
      rec["step"] = batch.global_step;
      rec["segment"] = batch.segment_index;
      rec["method"] = to_string(config.method);
      rec["batch_error"] = static_cast<double>(batch_errors) / static_cast<double>(batch.size());
      rec["loss"] = std::isfinite(result.loss) ? nlohmann::json(result.loss) : nlohmann::json(nullptr);
      rec["bank_size"] = probe.bank_size;
      rec["occupancy"] = probe.occupancy;
      rec["mean_age"] = probe.mean_age;
      rec["mean_uncertainty"] = probe.mean_uncertainty;
      rec["rbn_drift"] = probe.rbn_drift;
      trace << rec.dump() << '\n';
    }
  }

  int total = 0;
  int wrong = 0;
  for (auto& seg : report.segments) {
    seg.error_pct = seg.examples ? 100.0 * seg.errors / seg.examples : 0.0;
    total += seg.examples;
    wrong += seg.errors;
  }
  report.avg_error_pct = total ? 100.0 * wrong / total : 0.0;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

Harness::Harness(unsigned threads)
    : threads_(threads ? threads : std::max(1u, std::thread::hardware_concurrency())) {}

template <class Cell, class Result>
std::vector<Result> Harness::run_cells(const std::vector<Cell>& cells,
                                       const std::function<Result(const Cell&)>& fn) {
  std::vector<std::optional<Result>> results(cells.size());
  std::vector<std::exception_ptr> failures(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        results[i] = fn(cells[i]);
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };
  const auto n = std::min<std::size_t>(threads_, cells.size());
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  }
  for (const auto& f : failures)
    if (f) std::rethrow_exception(f);
  std::vector<Result> out;
  out.reserve(results.size());
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

std::vector<RunReport> Harness::run_experiment(const ExperimentConfig& config) {
  return compare(config, {config.method});
}

std::vector<RunReport> Harness::compare(const ExperimentConfig& config, const std::vector<Method>& methods) {
  config.check();
  require(!methods.empty(), "compare: no methods");
  struct Cell {
    ExperimentConfig config;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (auto m : methods) {
    for (auto seed : config.seeds) {
      Cell c{config, seed};
      c.config.method = m;
      cells.push_back(std::move(c));
    }
  }
  // Pretrain up front so workers share cached models.
  for (auto seed : config.seeds) models_.get(config, seed);
  return run_cells<Cell, RunReport>(cells, [this](const Cell& c) {
    return run_single(c.config, c.seed, *models_.get(c.config, c.seed));
  });
}

std::vector<RunReport> Harness::ablation_suite(const ExperimentConfig& base) {
  require(base.method == Method::Rotta, "ablation: base method must be rotta");
  return compare(base, {Method::Rotta, Method::RottaNoRbn, Method::RottaNoCstu, Method::RottaNoRt});
}

ExperimentConfig apply_sweep_point(const ExperimentConfig& base, const std::string& axis,
                                   const std::string& value) {
  ExperimentConfig c = base;
  if (axis == "delta") {
    c.delta = parse_number(value, "delta");
  } else if (axis == "batch_size") {
    const double b = parse_number(value, "batch_size");
    require(b >= 1.0 && b == std::floor(b), "batch_size: must be a positive integer");
    c.batch_size = static_cast<int>(b);
    c.samples_per_update = base.samples_per_update > 0 ? base.samples_per_update : base.batch_size;
  } else if (axis == "alpha") {
    c.alpha = parse_number(value, "alpha");
  } else if (axis == "nu") {
    c.nu = parse_number(value, "nu");
  } else if (axis == "lambda_ratio") {
    const auto slash = value.find('/');
    require(slash != std::string::npos, "lambda_ratio: expected 't/u', got '" + value + "'");
    c.lambda_t = parse_number(value.substr(0, slash), "lambda_t");
    c.lambda_u = parse_number(value.substr(slash + 1), "lambda_u");
  } else {
    throw Error("sweep: unknown axis '" + axis + "' (expected delta, batch_size, alpha, nu, lambda_ratio)");
  }
  return c;
}

std::vector<std::string> default_sweep_values(const std::string& axis) {
  if (axis == "delta") return {"10", "1", "0.1", "0.01"};
  if (axis == "batch_size") return {"16", "32", "64", "128"};
  if (axis == "alpha") return {"0.5", "0.1", "0.05", "0.01", "0.005", "0.001"};
  if (axis == "nu") return {"0.05", "0.01", "0.005", "0.001", "0.0005", "0.0001"};
  if (axis == "lambda_ratio") return {"0.0/2.0", "0.5/1.5", "1.0/1.0", "1.5/0.5", "2.0/0.0"};
  throw Error("sweep: unknown axis '" + axis + "'");
}

std::vector<Harness::SweepRow> Harness::sweep(const std::string& axis,
                                              const std::vector<std::string>& values,
                                              const ExperimentConfig& base,
                                              const std::vector<Method>& methods) {
  require(values.size() >= 2, "sweep: at least two values are required for axis '" + axis + "'");
  std::vector<SweepRow> rows;
  for (const auto& v : values) {
    const auto config = apply_sweep_point(base, axis, v);
    for (const auto& r : compare(config, methods))
      rows.push_back({axis, v, r.method, r.seed, r.avg_error_pct});
  }
  return rows;
}

double mean_error(const std::vector<RunReport>& reports, Method method) {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : reports) {
    if (r.method != method) continue;
    sum += r.avg_error_pct;
    ++n;
  }
  require(n > 0, "mean_error: no reports for method " + std::string(to_string(method)));
  return sum / n;
}

void write_segment_csv(std::ostream& out, const std::vector<RunReport>& reports) {
  out << kSegmentCsvHeader << '\n';
  for (const auto& r : reports) {
    for (const auto& s : r.segments) {
      out << to_string(r.method) << ',' << r.seed << ',' << s.segment << ',' << to_string(s.corruption.kind)
          << ',' << format_double(s.corruption.severity, 3) << ',' << s.examples << ','
          << format_double(s.error_pct) << '\n';
    }
  }
}

void write_summary_csv(std::ostream& out, const std::vector<RunReport>& reports) {
  out << kSummaryCsvHeader << '\n';
  for (const auto& r : reports) {
    out << to_string(r.method) << ',' << r.seed << ',' << format_double(r.avg_error_pct) << ','
        << hex64(r.config_hash) << ',' << hex64(r.stream_hash) << '\n';
  }
}

void write_sweep_csv(std::ostream& out, const std::vector<Harness::SweepRow>& rows) {
  out << kSweepCsvHeader << '\n';
  for (const auto& r : rows) {
    out << r.axis << ',' << r.value << ',' << to_string(r.method) << ',' << r.seed << ','
        << format_double(r.avg_error) << '\n';
  }
}

std::vector<SummaryRow> aggregate_csv(std::istream& in) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "report: empty CSV");
  const auto header = split(line, ',');
  auto column = [&](const std::string& name) -> std::ptrdiff_t {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  };
  const auto method_col = column("method");
  const auto error_col = column("avg_error");
  require(method_col >= 0 && error_col >= 0,
          "report: CSV must have 'method' and 'avg_error' columns (summary or sweep schema)");
  const auto axis_col = column("axis");
  const auto value_col = column("value");

  struct Acc {
    std::size_t n = 0;
    double sum = 0.0;
    double sq = 0.0;
  };
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, Acc> groups;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    require(f.size() == header.size(), "report: ragged CSV row '" + line + "'");
    const std::string group = axis_col >= 0 && value_col >= 0 ? f[axis_col] + "=" + f[value_col] : "";
    const auto key = std::make_pair(group, f[method_col]);
    if (!groups.count(key)) order.push_back(key);
    auto& acc = groups[key];
    const double v = parse_number(f[error_col], "avg_error");
    ++acc.n;
    acc.sum += v;
    acc.sq += v * v;
  }
  std::vector<SummaryRow> rows;
  for (const auto& key : order) {
    const auto& acc = groups[key];
    const double mean = acc.sum / static_cast<double>(acc.n);
    const double var = acc.n > 1 ? std::max(0.0, (acc.sq - acc.n * mean * mean) / (acc.n - 1)) : 0.0;
    rows.push_back({key.first, key.second, acc.n, mean, std::sqrt(var)});
  }
  return rows;
}

void write_report(std::ostream& out, const std::vector<SummaryRow>& rows) {
  out << "group,method,seeds,mean_error,stddev_error\n";
  for (const auto& r : rows)
    out << r.group << ',' << r.method << ',' << r.count << ',' << format_double(r.mean, 3) << ','
        << format_double(r.stddev, 3) << '\n';
}

}  // namespace ptta
