// SPDX-License-Identifier: Apache-2.0
//
// Training-dynamics analysis: per-epoch metric traces, accuracy under
// corruption, and correlation of aggregate metrics with robustness.
#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ilens/data.hpp"
#include "ilens/json_io.hpp"
#include "ilens/rng.hpp"
#include "ilens/stir.hpp"
#include "ilens/zoo.hpp"

namespace ilens {

// ---- statistics ----------------------------------------------------------

inline constexpr double kMinPValue = 1e-300;

struct PearsonResult {
  double r = 0;
  double p = 1;  // two-sided, from Student-t with n-2 degrees of freedom
  std::size_t n = 0;
};

/// Sample Pearson correlation. Needs n >= 3 and two non-constant series.
PearsonResult pearson(std::span<const double> x, std::span<const double> y);

inline double bonferroni_threshold(double alpha, std::size_t m) { return alpha / static_cast<double>(m); }
/// True iff p < alpha / m.
bool bonferroni(double p, std::size_t m, double alpha = 0.05);

/// Entry k is r over x[0..k], y[0..k]. Entries 0 and 1 and constant prefixes are empty.
std::vector<std::optional<double>> prefix_correlation(std::span<const double> x, std::span<const double> y);

// ---- robustness ----------------------------------------------------------

struct CorruptionCell {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;
  std::string label() const;  // e.g. "box_blur_s3"
  bool operator==(const CorruptionCell&) const = default;
};

std::vector<CorruptionCell> corruption_cells(std::span<const CorruptionKind> kinds, std::span<const int> severities);

/// Fixed evaluation sets: one clean subset and its corrupted copies. Built
/// once so every epoch is scored on identical inputs.
struct RobustnessSuite {
  Dataset clean;
  std::vector<CorruptionCell> cells;
  std::vector<Dataset> corrupted;
};

RobustnessSuite make_robustness_suite(const Dataset& test, std::span<const CorruptionCell> cells,
                                      std::size_t n_per_cell, const Rng& rng);

struct RobustnessPoint {
  double clean = 0;
  std::vector<double> corrupted;  // aligned with the suite's cells
};

RobustnessPoint evaluate_robustness(const Model<float>& model, const RobustnessSuite& suite);

struct RobustnessCurve {
  std::vector<std::size_t> epochs;
  std::vector<CorruptionCell> cells;
  std::vector<double> clean;
  std::vector<std::vector<double>> corrupted;  // [epoch][cell]
};

/// Scores checkpoint_dir/epoch_NNN for each epoch. A missing checkpoint is
/// an IoError naming the epoch.
RobustnessCurve robustness_curve(const std::filesystem::path& checkpoint_dir, std::span<const std::size_t> epochs,
                                 const RobustnessSuite& suite, std::size_t jobs = 1);

// ---- traces --------------------------------------------------------------

struct DynamicsTrace {
  std::vector<std::size_t> epochs;
  std::vector<MetricProfile> profiles;
  std::vector<double> clean_acc;
  std::vector<CorruptionCell> cells;
  std::vector<std::vector<double>> corrupted_acc;  // [epoch][cell]

  std::size_t layer_count() const { return profiles.empty() ? 0 : profiles.front().layers.size(); }
  /// Mean corrupted accuracy per epoch over all cells.
  std::vector<double> mean_corrupted_acc() const;
  /// Throws ConsistencyError unless every series shares the epoch axis.
  void validate() const;
};

/// Writes accuracy.csv, forgetting.csv, learning.csv and cka_divergence.csv.
void write_trace(const DynamicsTrace& t, const std::filesystem::path& dir);
DynamicsTrace read_trace(const std::filesystem::path& dir);

// ---- hypothesis grid -----------------------------------------------------

enum class SelectionKind { first_n, last_n };

/// Contiguous layers [lo, hi], 0-based.
struct LayerSelection {
  SelectionKind kind = SelectionKind::first_n;
  std::size_t count = 1;
  std::size_t lo = 0, hi = 0;
  std::string label() const;  // "first 3", "last 11"
  bool operator==(const LayerSelection&) const = default;
};

/// first n and last n for n in 1..L-1; n = 1 covers the two end layers alone.
std::vector<LayerSelection> layer_selections(std::size_t layers);

enum class MetricOp { learning_only, forgetting_only, sum, difference, cka_divergence };
std::string to_string(MetricOp op);

enum class GridMode { learning_forgetting, cka };

struct HypothesisSpec {
  LayerSelection selection;
  MetricOp op = MetricOp::forgetting_only;
  AggregateOp aggregation = AggregateOp::mean;
  std::string label() const;
  bool operator==(const HypothesisSpec&) const = default;
};

std::vector<HypothesisSpec> enumerate_grid(std::size_t layers, GridMode mode);
/// Human-readable cardinality formula, e.g. "2*(L-1) selections x 4 ops x 4 aggregations = 352 (L=12)".
std::string grid_formula(std::size_t layers, GridMode mode);

/// Per-epoch value of the hypothesis: per-layer metric (difference = learning -
/// forgetting) aggregated over the selected layers.
std::vector<double> hypothesis_series(const DynamicsTrace& t, const HypothesisSpec& spec);

struct CorrelationReport {
  HypothesisSpec hypothesis;
  double r = 0;
  double p_value = 1;
  std::size_t n = 0;
  std::size_t m_hypotheses = 0;
  bool bonferroni_pass = false;
  std::string skip_reason;  // non-empty when the series was degenerate
  bool skipped() const { return !skip_reason.empty(); }
};

struct GridResult {
  GridMode mode = GridMode::learning_forgetting;
  std::string formula;
  double alpha = 0.05;
  std::size_t m_hypotheses = 0;
  std::vector<CorrelationReport> reports;  // ranked by |r|, skips last
};

GridResult hypothesis_grid(const DynamicsTrace& t, std::span<const double> target, GridMode mode,
                           double alpha = 0.05, std::size_t jobs = 1);

void write_grid_csv(const GridResult& g, const std::filesystem::path& path);
Json to_json(const GridResult& g);

}  // namespace ilens
