// SPDX-License-Identifier: Apache-2.0
#include "ilens/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "ilens/csv.hpp"
#include "ilens/parallel.hpp"
#include "ilens/train.hpp"

namespace ilens {

// ---- statistics ----------------------------------------------------------

PearsonResult pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw DimensionError("pearson: series lengths differ (" + std::to_string(x.size()) + " vs " +
                         std::to_string(y.size()) + ")");
  }
  const std::size_t n = x.size();
  if (n < 3) throw ArgumentError("pearson needs at least 3 points, got " + std::to_string(n));
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0) || !(syy > 0)) throw DegenerateInputError("undefined correlation: constant series");
  PearsonResult res;
  res.n = n;
  res.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double df = static_cast<double>(n - 2);
  const double one_minus = 1.0 - res.r * res.r;
  if (one_minus <= 0) {
    res.p = kMinPValue;
    return res;
  }
  const double t = std::abs(res.r) * std::sqrt(df / one_minus);
  const boost::math::students_t dist(df);
  res.p = std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, t)), kMinPValue, 1.0);
  return res;
}

bool bonferroni(double p, std::size_t m, double alpha) {
  if (m < 1) throw ArgumentError("bonferroni needs m >= 1");
  return p < bonferroni_threshold(alpha, m);
}

std::vector<std::optional<double>> prefix_correlation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("prefix_correlation: series lengths differ");
  if (x.size() < 3) throw ArgumentError("prefix_correlation needs at least 3 points");
  std::vector<std::optional<double>> out(x.size());
  for (std::size_t k = 2; k < x.size(); ++k) {
    try {
      out[k] = pearson(x.first(k + 1), y.first(k + 1)).r;
    } catch (const DegenerateInputError&) {
    }
  }
  return out;
}

// ---- robustness ----------------------------------------------------------

std::string CorruptionCell::label() const { return std::string(to_string(kind)) + "_s" + std::to_string(severity); }

std::vector<CorruptionCell> corruption_cells(std::span<const CorruptionKind> kinds, std::span<const int> severities) {
  std::vector<CorruptionCell> out;
  for (auto k : kinds)
    for (int s : severities) out.push_back({k, s});
  return out;
}

RobustnessSuite make_robustness_suite(const Dataset& test, std::span<const CorruptionCell> cells,
                                      std::size_t n_per_cell, const Rng& rng) {
  if (n_per_cell > test.size()) {
    throw ArgumentError("robustness needs " + std::to_string(n_per_cell) + " samples per cell, test set has " +
                        std::to_string(test.size()));
  }
  RobustnessSuite s;
  const auto idx = rng.derive("robustness_subset").sample_without_replacement(test.size(), n_per_cell);
  s.clean = test.subset(idx);
  s.cells.assign(cells.begin(), cells.end());
  for (const auto& c : cells) {
    s.corrupted.push_back(corrupt(s.clean, {c.kind, c.severity}, rng.derive("robustness_noise")));
  }
  return s;
}

RobustnessPoint evaluate_robustness(const Model<float>& model, const RobustnessSuite& suite) {
  RobustnessPoint p;
  p.clean = evaluate(model, suite.clean);
  for (const auto& ds : suite.corrupted) p.corrupted.push_back(evaluate(model, ds));
  return p;
}

RobustnessCurve robustness_curve(const std::filesystem::path& checkpoint_dir, std::span<const std::size_t> epochs,
                                 const RobustnessSuite& suite, std::size_t jobs) {
  for (auto e : epochs) {
    if (!std::filesystem::exists(checkpoint_dir / checkpoint_name(e) / "manifest.json")) {
      throw IoError("missing checkpoint for epoch " + std::to_string(e) + " in " + checkpoint_dir.string());
    }
  }
  RobustnessCurve c;
  c.epochs.assign(epochs.begin(), epochs.end());
  c.cells = suite.cells;
  std::vector<RobustnessPoint> points(epochs.size());
  parallel_for(epochs.size(), jobs, [&](std::size_t i) {
    points[i] = evaluate_robustness(load_checkpoint(checkpoint_dir / checkpoint_name(epochs[i])).model, suite);
  });
  for (auto& p : points) {
    c.clean.push_back(p.clean);
    c.corrupted.push_back(std::move(p.corrupted));
  }
  return c;
}

// ---- traces --------------------------------------------------------------

std::vector<double> DynamicsTrace::mean_corrupted_acc() const {
  std::vector<double> out;
  for (const auto& row : corrupted_acc) {
    if (row.empty()) throw ArgumentError("trace has no corrupted accuracy cells");
    out.push_back(std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size()));
  }
  return out;
}

void DynamicsTrace::validate() const {
  const std::size_t E = epochs.size();
  if (profiles.size() != E || clean_acc.size() != E || corrupted_acc.size() != E) {
    throw ConsistencyError("dynamics trace series do not share the epoch axis");
  }
  for (const auto& row : corrupted_acc) {
    if (row.size() != cells.size()) throw ConsistencyError("dynamics trace has a ragged corruption row");
  }
  for (const auto& p : profiles) {
    if (p.layers.size() != layer_count() || p.forgetting.size() != p.layers.size() ||
        p.learning.size() != p.layers.size() || p.cka_divergence.size() != p.layers.size()) {
      throw ConsistencyError("dynamics trace profiles disagree on the layer axis");
    }
  }
}

namespace {

using ProfileSeries = std::vector<double> MetricProfile::*;

struct SeriesFile {
  const char* file;
  ProfileSeries member;
};

constexpr SeriesFile kSeriesFiles[] = {
    {"forgetting.csv", &MetricProfile::forgetting},
    {"forgetting_std.csv", &MetricProfile::forgetting_std},
    {"learning.csv", &MetricProfile::learning},
    {"learning_std.csv", &MetricProfile::learning_std},
    {"cka_divergence.csv", &MetricProfile::cka_divergence},
};

CorruptionCell parse_cell(const std::string& label) {
  const auto pos = label.rfind("_s");
  if (pos == std::string::npos) throw FormatError("malformed corruption column '" + label + "'");
  return {parse_corruption_kind(label.substr(0, pos)),
          static_cast<int>(parse_double(label.substr(pos + 2), "corruption column " + label))};
}

}  // namespace

void write_trace(const DynamicsTrace& t, const std::filesystem::path& dir) {
  t.validate();
  const auto mean = t.mean_corrupted_acc();
  std::vector<std::string> header{"epoch", "clean", "mean_corrupted"};
  for (const auto& c : t.cells) header.push_back(c.label());
  CsvTable acc(header);
  for (std::size_t e = 0; e < t.epochs.size(); ++e) {
    std::vector<std::string> row{std::to_string(t.epochs[e]), format_double(t.clean_acc[e]), format_double(mean[e])};
    for (double v : t.corrupted_acc[e]) row.push_back(format_double(v));
    acc.add_row(std::move(row));
  }
  acc.write(dir / "accuracy.csv");

  for (const auto& sf : kSeriesFiles) {
    std::vector<std::string> h{"epoch"};
    for (std::size_t l = 0; l < t.layer_count(); ++l) h.push_back("layer_" + std::to_string(l + 1));
    CsvTable tab(h);
    for (std::size_t e = 0; e < t.epochs.size(); ++e) {
      std::vector<std::string> row{std::to_string(t.epochs[e])};
      for (double v : t.profiles[e].*sf.member) row.push_back(format_double(v));
      tab.add_row(std::move(row));
    }
    tab.write(dir / sf.file);
  }
}

DynamicsTrace read_trace(const std::filesystem::path& dir) {
  DynamicsTrace t;
  const auto acc = CsvTable::read(dir / "accuracy.csv");
  const std::string what = (dir / "accuracy.csv").string();
  if (acc.header().size() < 3) throw FormatError(what + " lacks accuracy columns");
  for (std::size_t c = 3; c < acc.header().size(); ++c) t.cells.push_back(parse_cell(acc.header()[c]));
  for (const auto& row : acc.rows()) {
    t.epochs.push_back(static_cast<std::size_t>(parse_double(row[0], what)));
    t.clean_acc.push_back(parse_double(row[1], what));
    std::vector<double> cells;
    for (std::size_t c = 3; c < row.size(); ++c) cells.push_back(parse_double(row[c], what));
    t.corrupted_acc.push_back(std::move(cells));
  }
  t.profiles.resize(t.epochs.size());
  for (const auto& sf : kSeriesFiles) {
    const auto path = dir / sf.file;
    const auto tab = CsvTable::read(path);
    if (tab.rows().size() != t.epochs.size()) throw ConsistencyError(path.string() + " has a different epoch count");
    for (std::size_t e = 0; e < tab.rows().size(); ++e) {
      const auto& row = tab.rows()[e];
      if (static_cast<std::size_t>(parse_double(row[0], path.string())) != t.epochs[e]) {
        throw ConsistencyError(path.string() + " epoch column disagrees with accuracy.csv");
      }
      auto& series = t.profiles[e].*sf.member;
      series.clear();
      for (std::size_t c = 1; c < row.size(); ++c) series.push_back(parse_double(row[c], path.string()));
      t.profiles[e].layers.resize(series.size());
      std::iota(t.profiles[e].layers.begin(), t.profiles[e].layers.end(), 0);
    }
  }
  t.validate();
  return t;
}

// ---- hypothesis grid -----------------------------------------------------

std::string LayerSelection::label() const {
  return (kind == SelectionKind::first_n ? "first " : "last ") + std::to_string(count);
}

std::vector<LayerSelection> layer_selections(std::size_t layers) {
  if (layers < 2) throw ArgumentError("hypothesis grid needs at least 2 layers");
  std::vector<LayerSelection> out;
  for (std::size_t n = 1; n < layers; ++n) out.push_back({SelectionKind::first_n, n, 0, n - 1});
  for (std::size_t n = 1; n < layers; ++n) out.push_back({SelectionKind::last_n, n, layers - n, layers - 1});
  return out;
}

std::string to_string(MetricOp op) {
  switch (op) {
    case MetricOp::learning_only: return "learning_only";
    case MetricOp::forgetting_only: return "forgetting_only";
    case MetricOp::sum: return "sum";
    case MetricOp::difference: return "difference";
    case MetricOp::cka_divergence: return "cka_divergence";
  }
  return "?";
}

std::string HypothesisSpec::label() const {
  return selection.label() + " / " + to_string(op) + " / " + to_string(aggregation);
}

namespace {
constexpr MetricOp kStirOps[] = {MetricOp::learning_only, MetricOp::forgetting_only, MetricOp::sum,
                                 MetricOp::difference};
}

std::vector<HypothesisSpec> enumerate_grid(std::size_t layers, GridMode mode) {
  std::vector<HypothesisSpec> out;
  for (const auto& sel : layer_selections(layers)) {
    if (mode == GridMode::cka) {
      for (auto agg : kAggregateOps) out.push_back({sel, MetricOp::cka_divergence, agg});
      continue;
    }
    for (auto op : kStirOps)
      for (auto agg : kAggregateOps) out.push_back({sel, op, agg});
  }
  return out;
}

std::string grid_formula(std::size_t layers, GridMode mode) {
  const std::size_t sel = layer_selections(layers).size();
  const std::size_t total = enumerate_grid(layers, mode).size();
  const std::string head = "2*(L-1) layer selections (first n, last n; n=1..L-1)";
  const std::string tail = " = " + std::to_string(total) + " (L=" + std::to_string(layers) + ", " +
                           std::to_string(sel) + " selections)";
  return mode == GridMode::cka ? head + " x 4 aggregations" + tail
                               : head + " x 4 metric ops x 4 aggregations" + tail;
}

std::vector<double> hypothesis_series(const DynamicsTrace& t, const HypothesisSpec& spec) {
  std::vector<double> out;
  for (const auto& p : t.profiles) {
    std::vector<double> v(p.layers.size());
    for (std::size_t l = 0; l < v.size(); ++l) {
      switch (spec.op) {
        case MetricOp::learning_only: v[l] = p.learning[l]; break;
        case MetricOp::forgetting_only: v[l] = p.forgetting[l]; break;
        case MetricOp::sum: v[l] = p.learning[l] + p.forgetting[l]; break;
        case MetricOp::difference: v[l] = p.learning[l] - p.forgetting[l]; break;
        case MetricOp::cka_divergence: v[l] = p.cka_divergence[l]; break;
      }
    }
    out.push_back(aggregate(v, spec.selection.lo, spec.selection.hi, spec.aggregation));
  }
  return out;
}

GridResult hypothesis_grid(const DynamicsTrace& t, std::span<const double> target, GridMode mode, double alpha,
                           std::size_t jobs) {
  t.validate();
  if (t.epochs.size() < 3) throw ArgumentError("hypothesis grid needs at least 3 epochs");
  if (target.size() != t.epochs.size()) throw DimensionError("target series does not match the trace epochs");
  GridResult g;
  g.mode = mode;
  g.alpha = alpha;
  g.formula = grid_formula(t.layer_count(), mode);
  const auto specs = enumerate_grid(t.layer_count(), mode);
  g.m_hypotheses = specs.size();
  g.reports.resize(specs.size());
  parallel_for(specs.size(), jobs, [&](std::size_t s) {
    auto& rep = g.reports[s];
    rep.hypothesis = specs[s];
    rep.m_hypotheses = specs.size();
    const auto series = hypothesis_series(t, specs[s]);
    rep.n = series.size();
    try {
      const auto pr = pearson(series, target);
      rep.r = pr.r;
      rep.p_value = pr.p;
      rep.bonferroni_pass = bonferroni(pr.p, specs.size(), alpha);
    } catch (const DegenerateInputError&) {
      rep.r = 0;
      rep.p_value = 1;
      rep.skip_reason = "constant aggregate series";
    }
  });
  std::stable_sort(g.reports.begin(), g.reports.end(), [](const CorrelationReport& a, const CorrelationReport& b) {
    if (a.skipped() != b.skipped()) return !a.skipped();
    return std::abs(a.r) > std::abs(b.r);
  });
  return g;
}

void write_grid_csv(const GridResult& g, const std::filesystem::path& path) {
  CsvTable t({"rank", "selection", "metric_op", "aggregation", "r", "p_value", "n", "m_hypotheses",
              "bonferroni_pass", "skip_reason"});
  for (std::size_t i = 0; i < g.reports.size(); ++i) {
    const auto& r = g.reports[i];
    t.add_row({std::to_string(i + 1), r.hypothesis.selection.label(), to_string(r.hypothesis.op),
               to_string(r.hypothesis.aggregation), r.skipped() ? "" : format_double(r.r),
               r.skipped() ? "" : format_double(r.p_value), std::to_string(r.n), std::to_string(r.m_hypotheses),
               r.bonferroni_pass ? "true" : "false", r.skip_reason});
  }
  t.write(path);
}

Json to_json(const GridResult& g) {
  Json reports = Json::array();
  for (const auto& r : g.reports) {
    Json j{{"selection", r.hypothesis.selection.label()},
           {"layers", {r.hypothesis.selection.lo + 1, r.hypothesis.selection.hi + 1}},
           {"metric_op", to_string(r.hypothesis.op)},
           {"aggregation", to_string(r.hypothesis.aggregation)},
           {"n", r.n},
           {"m_hypotheses", r.m_hypotheses},
           {"bonferroni_pass", r.bonferroni_pass}};
    if (r.skipped()) {
      j["skip_reason"] = r.skip_reason;
    } else {
      j["r"] = r.r;
      j["p_value"] = r.p_value;
    }
    reports.push_back(std::move(j));
  }
  return {{"mode", g.mode == GridMode::cka ? "cka" : "learning_forgetting"},
          {"grid_formula", g.formula},
          {"alpha", g.alpha},
          {"m_hypotheses", g.m_hypotheses},
          {"bonferroni_threshold", bonferroni_threshold(g.alpha, g.m_hypotheses)},
          {"reports", std::move(reports)}};
}

}  // namespace ilens
