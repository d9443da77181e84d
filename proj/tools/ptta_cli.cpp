// ptta: pretrain, run, ablate and sweep practical test-time adaptation
// experiments on the synthetic corruption benchmark.
//
//   ptta pretrain --seed 0 --out checkpoints/source_seed0
//   ptta run --methods source,bn,pl,tent,rotta --seeds 0,1,2,3,4
//   ptta ablate --seeds 0,1,2,3,4
//   ptta sweep --axis delta --values 10,1,0.1,0.01 --methods bn,rotta
//   ptta report results/sweep_delta.csv

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ptta/harness.hpp"

namespace {

using ptta::ExperimentConfig;

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<ptta::Method> parse_methods(const std::string& text) {
  std::vector<ptta::Method> out;
  for (const auto& m : split_list(text)) out.push_back(ptta::parse_method(m));
  return out;
}

// Flags mirroring ExperimentConfig. Values given on the command line
// override those from --config.
class ConfigFlags {
 public:
  void attach(CLI::App* app) {
    app->add_option("--config", config_path_, "JSON experiment configuration file");
    add(app, "--seeds", "Comma-separated seeds", [](ExperimentConfig& c, const std::string& v) {
      c.seeds.clear();
      for (const auto& s : split_list(v)) c.seeds.push_back(std::stoull(s));
    });
    add(app, "--method", "Adaptation method", [](ExperimentConfig& c, const std::string& v) {
      c.method = ptta::parse_method(v);
    });
    number(app, "--delta", "Dirichlet concentration", &ExperimentConfig::delta);
    integer(app, "--batch-size", "Test batch size", &ExperimentConfig::batch_size);
    integer(app, "--examples-per-segment", "Examples per segment", &ExperimentConfig::examples_per_segment);
    integer(app, "--capacity", "Memory bank capacity", &ExperimentConfig::capacity);
    number(app, "--alpha", "RBN EMA rate", &ExperimentConfig::alpha);
    number(app, "--nu", "Teacher EMA rate", &ExperimentConfig::nu);
    number(app, "--lambda-t", "Timeliness weight", &ExperimentConfig::lambda_t);
    number(app, "--lambda-u", "Uncertainty weight", &ExperimentConfig::lambda_u);
    number(app, "--lr", "Adaptation learning rate", &ExperimentConfig::lr);
    integer(app, "--samples-per-update", "RoTTA samples per optimization step (0: per batch)",
            &ExperimentConfig::samples_per_update);
    integer(app, "--pretrain-epochs", "Source training epochs", &ExperimentConfig::pretrain_epochs);
    number(app, "--stddev", "Within-class stddev of the synthetic task",
           &ExperimentConfig::within_class_stddev);
    add(app, "--consistency-scale", "Consistency loss scaling: 'classes' (1/C) or 'none'",
        [](ExperimentConfig& c, const std::string& v) {
          if (v != "classes" && v != "none") throw ptta::Error("--consistency-scale: expected classes|none");
          c.divide_by_classes = v == "classes";
        });
    add(app, "--checkpoint", "Pretrained checkpoint stem (skips pretraining)",
        [](ExperimentConfig& c, const std::string& v) { c.checkpoint = v; });
    add(app, "--trace-dir", "Write per-batch JSON-lines traces here",
        [](ExperimentConfig& c, const std::string& v) { c.trace_dir = v; });
  }

  ExperimentConfig build() const {
    ExperimentConfig config;
    if (!config_path_.empty()) {
      std::ifstream in(config_path_);
      if (!in) throw ptta::Error("cannot open config file " + config_path_);
      config = ExperimentConfig::from_json(nlohmann::json::parse(in));
    }
    for (const auto& o : overrides_)
      if (!o.value->empty()) o.apply(config, *o.value);
    config.check();
    return config;
  }

 private:
  struct Override {
    std::shared_ptr<std::string> value;
    std::function<void(ExperimentConfig&, const std::string&)> apply;
  };

  void add(CLI::App* app, const std::string& flag, const std::string& help,
           std::function<void(ExperimentConfig&, const std::string&)> apply) {
    auto value = std::make_shared<std::string>();
    app->add_option(flag, *value, help);
    overrides_.push_back({value, std::move(apply)});
  }
  void number(CLI::App* app, const std::string& flag, const std::string& help,
              double ExperimentConfig::*field) {
    add(app, flag, help, [field](ExperimentConfig& c, const std::string& v) { c.*field = std::stod(v); });
  }
  void integer(CLI::App* app, const std::string& flag, const std::string& help,
               int ExperimentConfig::*field) {
    add(app, flag, help, [field](ExperimentConfig& c, const std::string& v) { c.*field = std::stoi(v); });
  }

  std::string config_path_;
  std::vector<Override> overrides_;
};

std::filesystem::path ensure_dir(const std::string& dir) {
  std::filesystem::create_directories(dir);
  return dir;
}

void write_file(const std::filesystem::path& path, const std::function<void(std::ostream&)>& fn) {
  std::ofstream out(path);
  if (!out) throw ptta::Error("cannot write " + path.string());
  fn(out);
  std::cout << "wrote " << path.string() << '\n';
}

void print_means(const std::vector<ptta::RunReport>& reports, const std::vector<ptta::Method>& methods) {
  for (auto m : methods) {
    std::cout << "  " << ptta::to_string(m) << ": mean error " << ptta::mean_error(reports, m) << "%\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Practical test-time adaptation benchmark"};
  app.require_subcommand(1);
  unsigned threads = 0;
  app.add_option("--threads", threads, "Worker threads (0: hardware concurrency)");

  ConfigFlags pretrain_flags, run_flags, ablate_flags, sweep_flags;

  auto* pretrain_cmd = app.add_subcommand("pretrain", "Train a source model and write a checkpoint");
  pretrain_flags.attach(pretrain_cmd);
  std::uint64_t pretrain_seed = 0;
  std::string pretrain_out;
  pretrain_cmd->add_option("--seed", pretrain_seed, "Task and initialization seed");
  pretrain_cmd->add_option("--out", pretrain_out, "Checkpoint stem (default checkpoints/source_seed<seed>)");

  auto* run_cmd = app.add_subcommand("run", "Run one or more methods on shared streams");
  run_flags.attach(run_cmd);
  std::string run_methods;
  std::string run_name = "run";
  std::string run_out = "results";
  run_cmd->add_option("--methods", run_methods, "Comma-separated methods (default: --method)");
  run_cmd->add_option("--name", run_name, "Output file prefix");
  run_cmd->add_option("--out-dir", run_out, "Output directory");

  auto* ablate_cmd = app.add_subcommand("ablate", "RoTTA and its w/o RBN, w/o CSTU, w/o RT variants");
  ablate_flags.attach(ablate_cmd);
  std::string ablate_out = "results";
  ablate_cmd->add_option("--out-dir", ablate_out, "Output directory");

  auto* sweep_cmd = app.add_subcommand("sweep", "Sweep one hyperparameter axis");
  sweep_flags.attach(sweep_cmd);
  std::string axis;
  std::string sweep_values;
  std::string sweep_methods = "source,bn,pl,tent,rotta";
  std::string sweep_out = "results";
  sweep_cmd->add_option("--axis", axis, "delta | batch_size | alpha | nu | lambda_ratio")->required();
  sweep_cmd->add_option("--values", sweep_values, "Comma-separated values (default: the axis grid)");
  sweep_cmd->add_option("--methods", sweep_methods, "Comma-separated methods");
  sweep_cmd->add_option("--out-dir", sweep_out, "Output directory");

  auto* report_cmd = app.add_subcommand("report", "Aggregate summary or sweep CSVs over seeds");
  std::vector<std::string> report_inputs;
  report_cmd->add_option("csv", report_inputs, "CSV files")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    ptta::Harness harness(threads);
    if (*pretrain_cmd) {
      auto config = pretrain_flags.build();
      config.checkpoint.reset();
      const auto model = ptta::prepare_model(config, pretrain_seed);
      const std::filesystem::path stem =
          pretrain_out.empty() ? ensure_dir("checkpoints") / ("source_seed" + std::to_string(pretrain_seed))
                               : std::filesystem::path(pretrain_out);
      ptta::save_pretrained(stem, model, config, pretrain_seed);
      std::cout << "holdout accuracy " << model.holdout_accuracy << ", final loss "
                << model.report.final_loss << "\nwrote " << stem.string() << ".{json,bin}\n";
    } else if (*run_cmd) {
      const auto config = run_flags.build();
      const auto methods = run_methods.empty() ? std::vector<ptta::Method>{config.method}
                                               : parse_methods(run_methods);
      const auto reports = harness.compare(config, methods);
      const auto dir = ensure_dir(run_out);
      write_file(dir / (run_name + "_segments.csv"), [&](auto& o) { ptta::write_segment_csv(o, reports); });
      write_file(dir / (run_name + "_summary.csv"), [&](auto& o) { ptta::write_summary_csv(o, reports); });
      print_means(reports, methods);
    } else if (*ablate_cmd) {
      auto config = ablate_flags.build();
      config.method = ptta::Method::Rotta;
      const auto reports = harness.ablation_suite(config);
      const auto dir = ensure_dir(ablate_out);
      write_file(dir / "ablation_segments.csv", [&](auto& o) { ptta::write_segment_csv(o, reports); });
      write_file(dir / "ablation_summary.csv", [&](auto& o) { ptta::write_summary_csv(o, reports); });
      print_means(reports, {ptta::Method::Rotta, ptta::Method::RottaNoRbn, ptta::Method::RottaNoCstu,
                            ptta::Method::RottaNoRt});
    } else if (*sweep_cmd) {
      const auto config = sweep_flags.build();
      const auto values = sweep_values.empty() ? ptta::default_sweep_values(axis) : split_list(sweep_values);
      const auto rows = harness.sweep(axis, values, config, parse_methods(sweep_methods));
      const auto dir = ensure_dir(sweep_out);
      write_file(dir / ("sweep_" + axis + ".csv"), [&](auto& o) { ptta::write_sweep_csv(o, rows); });
    } else if (*report_cmd) {
      for (const auto& path : report_inputs) {
        std::ifstream in(path);
        if (!in) throw ptta::Error("cannot open " + path);
        std::cout << "# " << path << '\n';
        ptta::write_report(std::cout, ptta::aggregate_csv(in));
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
