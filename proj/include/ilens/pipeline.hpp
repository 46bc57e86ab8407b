// SPDX-License-Identifier: Apache-2.0
//
// Config-driven experiment pipeline. Every stage reads and writes only under
// the run's output directory:
//
//   data/{pretrain,finetune}/{train,test}-{images,labels}.idx, metadata
//   runs/{pretrain,finetune,scratch}/checkpoints/epoch_NNN, epochs.csv, curve.svg
//   metrics/<run>/profile.csv, profile_detail.csv, profile.svg
//   flow/<run>/flow.csv, flow.svg
//   dynamics/<run>/*.csv, metrics.svg, accuracy.svg
//   analysis/<run>/grid_*.{csv,json}, prefix.csv, prefix.svg
//   report.md, report.html, manifest.json
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "ilens/data.hpp"
#include "ilens/dynamics.hpp"
#include "ilens/json_io.hpp"
#include "ilens/stir.hpp"
#include "ilens/train.hpp"

namespace ilens {

inline constexpr const char* kToolVersion = "0.1.0";

struct DatasetSource {
  bool generated = true;
  std::size_t classes = 3;
  std::size_t class_offset = 0;
  std::size_t train_size = 1000;
  std::size_t test_size = 200;
  ImageShape image{1, 16, 16};
  // IDX inputs when not generated.
  std::filesystem::path train_images, train_labels, test_images, test_labels;
};

enum class FinetuneTask { classification, reconstruction };
enum class FinetuneInit { pretrained, scratch };

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  DatasetSource pretrain_data, finetune_data;
  std::vector<CorruptionKind> corruption_kinds;
  std::vector<int> severities;
  std::size_t n_per_cell = 200;
  ModelConfig model;  // encoder template; input, classes and head are set per stage
  TrainConfig pretrain;
  TrainConfig finetune;
  FinetuneTask task = FinetuneTask::classification;
  FinetuneInit init = FinetuneInit::pretrained;
  ProtocolConfig metrics;
  Split metrics_split = Split::test;
  bool grid = true;
  std::vector<GridMode> grid_modes;
  double alpha = 0.05;
  Json source;  // the parsed document, for hashing
};

/// Strict parse: unknown keys and missing required fields are ConfigErrors
/// naming the field path. Relative IDX paths resolve against base_dir.
RunConfig parse_run_config(const Json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

enum class TrainStage { pretrain, finetune, scratch };
std::string to_string(TrainStage s);

struct PipelineOptions {
  std::size_t jobs = 1;
  bool fast = false;  // swap in ProtocolConfig::fast() constants
  std::ostream* log = nullptr;
};

class Pipeline {
 public:
  Pipeline(RunConfig cfg, PipelineOptions opts);

  const RunConfig& config() const { return cfg_; }
  const std::filesystem::path& dir() const { return cfg_.output_dir; }
  /// Protocol after --fast and --jobs.
  ProtocolConfig protocol() const;

  void gen_data();
  void train(TrainStage stage);
  MetricProfile metrics(const std::string& run);
  MetricProfile metrics(const std::filesystem::path& ft_checkpoint, const std::filesystem::path& pt_checkpoint,
                        const std::string& name);
  FlowMatrix flow(const std::string& run);
  DynamicsTrace dynamics(const std::string& run);
  GridResult correlate(const std::string& run);
  void report();

  /// Rewrites manifest.json with config hash, timings and file checksums.
  void write_manifest();

  Dataset load_dataset(const std::string& which, Split split) const;
  std::filesystem::path run_dir(const std::string& run) const;
  std::filesystem::path checkpoint(const std::string& run, std::size_t epoch) const;
  std::size_t final_epoch(const std::string& run) const;

 private:
  template <class F>
  auto timed(const std::string& stage, F&& f);
  void log(const std::string& line) const;
  ModelConfig stage_model(TrainStage stage) const;
  TrainConfig stage_train(TrainStage stage) const;

  RunConfig cfg_;
  PipelineOptions opts_;
  std::map<std::string, double> timings_;
};

// Run manifest -------------------------------------------------------------

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

struct ManifestFile {
  std::string path;  // relative to the run directory, '/' separated
  std::uintmax_t bytes = 0;
  std::string sha256;
  bool operator==(const ManifestFile&) const = default;
};

/// Every regular file under dir except manifest.json, sorted by path.
std::vector<ManifestFile> inventory(const std::filesystem::path& dir);

}  // namespace ilens
