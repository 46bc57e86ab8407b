// SPDX-License-Identifier: Apache-2.0
//
// ilens command-line front end. Subcommands run in the order given and share
// one config; each reads and writes only under the output directory.
//
// Exit codes: 0 success, 2 bad config or arguments, 3 missing or malformed
// files, 4 non-finite metrics, 1 anything else. Errors are one line on
// stderr: "ilens: error: <kind>: <message>".
#include <CLI11.hpp>

#include <charconv>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ilens/error.hpp"
#include "ilens/pipeline.hpp"

namespace {

using namespace ilens;

struct Failure {
  int code;
  const char* kind;
};

Failure classify(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return {2, "config"};
  if (dynamic_cast<const ArgumentError*>(&e)) return {2, "argument"};
  if (dynamic_cast<const UnsupportedError*>(&e)) return {2, "unsupported"};
  if (dynamic_cast<const IoError*>(&e)) return {3, "io"};
  if (dynamic_cast<const FormatError*>(&e)) return {3, "format"};
  if (dynamic_cast<const ConsistencyError*>(&e)) return {3, "consistency"};
  if (dynamic_cast<const NumericError*>(&e)) return {4, "numeric"};
  if (dynamic_cast<const DegenerateInputError*>(&e)) return {4, "degenerate"};
  return {1, "internal"};
}

int fail(const char* kind, std::string msg, int code) {
  for (char& c : msg)
    if (c == '\n' || c == '\r') c = ' ';
  std::cerr << "ilens: error: " << kind << ": " << msg << std::endl;
  return code;
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("ILENS_SEED");
  if (!s) return std::nullopt;
  const std::string_view v(s);
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc{} || p != v.data() + v.size()) {
    throw ArgumentError("ILENS_SEED must be an unsigned 64-bit integer, got '" + std::string(v) + "'");
  }
  return out;
}

std::vector<TrainStage> parse_stages(const std::vector<std::string>& names) {
  std::vector<TrainStage> out;
  for (const auto& n : names) {
    if (n == "pretrain") out.push_back(TrainStage::pretrain);
    else if (n == "finetune") out.push_back(TrainStage::finetune);
    else if (n == "scratch") out.push_back(TrainStage::scratch);
    else throw ArgumentError("--stage must be pretrain, finetune or scratch, got '" + n + "'");
  }
  return out;
}

void check_run(const std::string& run) {
  if (run != "finetune" && run != "scratch") {
    throw ArgumentError("--run must be finetune or scratch, got '" + run + "'");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ilens: layer-wise invariance analysis of finetuned vision models"};
  app.fallthrough();
  app.require_subcommand(1, 0);

  std::string config_path, output_dir;
  std::size_t jobs = 1;
  bool fast = false, quiet = false;
  app.add_option("--config", config_path, "Run config JSON")->required();
  app.add_option("--jobs", jobs, "Worker threads; outputs do not depend on it")->check(CLI::PositiveNumber);
  app.add_flag("--fast", fast, "CI protocol constants: n=64, k=1, 20 inversion iterations");
  app.add_option("--output-dir", output_dir, "Override the config's output_dir");
  app.add_flag("--quiet", quiet, "No progress log on stderr");

  app.add_subcommand("gen-data", "Generate or import the pretrain and finetune datasets");
  auto* train = app.add_subcommand("train", "Train one or more stages");
  std::vector<std::string> stages;
  train->add_option("--stage", stages, "pretrain, finetune or scratch; repeatable (default: pretrain finetune)");
  auto* metrics = app.add_subcommand("metrics", "Layer-wise forgetting, learning and CKA divergence");
  std::string metrics_run = "finetune", ft_ckpt, pt_ckpt, metrics_name = "custom";
  metrics->add_option("--run", metrics_run, "Run whose final and initial checkpoints are compared");
  auto* ft_opt = metrics->add_option("--ft", ft_ckpt, "Finetuned checkpoint directory");
  auto* pt_opt = metrics->add_option("--pt", pt_ckpt, "Pretrained checkpoint directory");
  ft_opt->needs(pt_opt);
  pt_opt->needs(ft_opt);
  metrics->add_option("--name", metrics_name, "Output name for --ft/--pt comparisons");
  std::string flow_run = "finetune", dyn_run = "finetune", corr_run = "finetune";
  app.add_subcommand("flow", "Invariance flow matrix")->add_option("--run", flow_run);
  app.add_subcommand("dynamics", "Per-epoch metrics and corrupted accuracy")->add_option("--run", dyn_run);
  app.add_subcommand("correlate", "Hypothesis grid against corrupted accuracy")->add_option("--run", corr_run);
  app.add_subcommand("report", "Markdown and HTML summary");
  app.add_subcommand("all", "gen-data, train all stages, metrics, flow, dynamics, correlate and report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    RunConfig cfg = load_run_config(config_path);
    if (auto s = env_seed()) cfg.seed = *s;
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    Pipeline p(std::move(cfg), {jobs, fast, quiet ? nullptr : &std::cerr});

    for (const auto* sub : app.get_subcommands()) {
      const std::string& name = sub->get_name();
      if (name == "gen-data") {
        p.gen_data();
      } else if (name == "train") {
        for (auto s : parse_stages(stages.empty() ? std::vector<std::string>{"pretrain", "finetune"} : stages))
          p.train(s);
      } else if (name == "metrics") {
        if (!ft_ckpt.empty()) {
          p.metrics(ft_ckpt, pt_ckpt, metrics_name);
        } else {
          check_run(metrics_run);
          p.metrics(metrics_run);
        }
      } else if (name == "flow") {
        check_run(flow_run);
        p.flow(flow_run);
      } else if (name == "dynamics") {
        check_run(dyn_run);
        p.dynamics(dyn_run);
      } else if (name == "correlate") {
        check_run(corr_run);
        p.correlate(corr_run);
      } else if (name == "report") {
        p.report();
      } else if (name == "all") {
        p.gen_data();
        for (auto s : {TrainStage::pretrain, TrainStage::finetune, TrainStage::scratch}) p.train(s);
        for (const std::string run : {"finetune", "scratch"}) {
          p.metrics(run);
          p.flow(run);
        }
        if (p.config().task == FinetuneTask::classification) {
          p.dynamics("finetune");
          p.correlate("finetune");
        }
        p.report();
      }
    }
    p.write_manifest();
  } catch (const std::exception& e) {
    const auto f = classify(e);
    return fail(f.kind, e.what(), f.code);
  }
  return 0;
}
