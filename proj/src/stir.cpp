// SPDX-License-Identifier: Apache-2.0
#include "ilens/stir.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ilens/csv.hpp"
#include "ilens/parallel.hpp"
#include "ilens/sim.hpp"

namespace ilens {

namespace {

StirScore summarize(std::vector<double> per_rep, std::size_t n, double converged) {
  StirScore s;
  s.k = per_rep.size();
  s.n_samples = n;
  s.converged_fraction = converged;
  s.mean = aggregate(per_rep, 0, per_rep.size() - 1, AggregateOp::mean);
  s.std = aggregate(per_rep, 0, per_rep.size() - 1, AggregateOp::std);
  s.per_rep = std::move(per_rep);
  return s;
}

void check_layer(const Model<float>& m, int layer, const char* role) {
  if (layer < 0 || static_cast<std::size_t>(layer) >= m.layer_count()) {
    throw ArgumentError(std::string(role) + " layer " + std::to_string(layer) + " outside [0, " +
                        std::to_string(m.layer_count()) + ")");
  }
}

}  // namespace

void ProtocolConfig::validate() const {
  if (n < kCkaMinSamples) throw ConfigError("protocol n must be >= " + std::to_string(kCkaMinSamples));
  if (k < 1) throw ConfigError("protocol k must be >= 1");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  for (int l : layers)
    if (l < 0) throw ConfigError("protocol layers must be >= 0");
  inversion.validate();
}

std::vector<std::size_t> sample_indices(const Dataset& pool, std::size_t n, const Rng& rng, std::size_t rep) {
  if (n > pool.size()) {
    throw ArgumentError("cannot sample " + std::to_string(n) + " inputs from a pool of " +
                        std::to_string(pool.size()));
  }
  auto idx = rng.derive({kSampleStream, rep}).sample_without_replacement(pool.size(), n);
  return idx;
}

Tensor<float> sample_inputs(const Dataset& pool, std::size_t n, const Rng& rng, std::size_t rep) {
  const auto idx = sample_indices(pool, n, rng, rep);
  return pool.batch(idx);
}

InvertedSet inverted_set(const Model<float>& reference, int j, const Dataset& pool, const ProtocolConfig& cfg,
                         const Rng& rng, std::size_t rep) {
  check_layer(reference, j, "reference");
  InvertedSet s;
  s.x = sample_inputs(pool, cfg.n, rng, rep);
  const auto inv = invert(reference, j, s.x, cfg.inversion,
                          rng.derive({kInvertStream, static_cast<std::uint64_t>(j), rep}));
  s.x_prime = inv.x_prime;
  s.converged_fraction = inv.converged_fraction();
  s.mean_init_loss = InversionResult<float>::mean(inv.init_loss);
  s.mean_final_loss = InversionResult<float>::mean(inv.per_sample_loss);
  return s;
}

double stir_on(const Model<float>& target, int i, const InvertedSet& set) {
  check_layer(target, i, "target");
  NoGradGuard guard;
  return linear_cka(target.representation(set.x, i), target.representation(set.x_prime, i));
}

std::vector<Tensor<float>> all_representations(const Model<float>& model, const Tensor<float>& x) {
  NoGradGuard guard;
  std::vector<Tensor<float>> out;
  Tensor<float> h = model.embed(x);
  for (std::size_t b = 0; b < model.layer_count(); ++b) {
    h = model.apply_block(h, static_cast<int>(b));
    out.push_back(model.tap(h));
  }
  return out;
}

StirScore stir(const Model<float>& target, int i, const Model<float>& reference, int j, const Dataset& pool,
               const ProtocolConfig& cfg, const Rng& rng) {
  cfg.validate();
  if (!(target.config().input == reference.config().input)) {
    throw ArgumentError("target and reference models take different input shapes");
  }
  check_layer(target, i, "target");
  check_layer(reference, j, "reference");
  std::vector<double> per_rep(cfg.k), conv(cfg.k);
  parallel_for(cfg.k, cfg.jobs, [&](std::size_t r) {
    const auto set = inverted_set(reference, j, pool, cfg, rng, r);
    per_rep[r] = stir_on(target, i, set);
    conv[r] = set.converged_fraction;
  });
  return summarize(std::move(per_rep), cfg.n, aggregate(conv, 0, conv.size() - 1, AggregateOp::mean));
}

void check_comparable(const Model<float>& ft, const Model<float>& pt) {
  if (ft.layer_count() != pt.layer_count()) {
    throw ArgumentError("finetuned model has " + std::to_string(ft.layer_count()) + " layers, pretrained has " +
                        std::to_string(pt.layer_count()));
  }
  if (!(ft.config().input == pt.config().input)) {
    throw ArgumentError("finetuned and pretrained models take different input shapes");
  }
}

namespace {

/// first - second, where both STIR terms are evaluated on the inversion of
/// (conditioning, j). The first term is exactly 1 when i == j.
double coupled_difference(const Model<float>& conditioning, const Model<float>& other, int i, int j,
                          const Dataset& pool, const ProtocolConfig& cfg, const Rng& rng) {
  cfg.validate();
  check_comparable(conditioning, other);
  check_layer(conditioning, i, "evaluated");
  std::vector<double> first(cfg.k, 1.0), second(cfg.k);
  parallel_for(cfg.k, cfg.jobs, [&](std::size_t r) {
    const auto set = inverted_set(conditioning, j, pool, cfg, rng, r);
    if (i != j) first[r] = stir_on(conditioning, i, set);
    second[r] = stir_on(other, i, set);
  });
  const double a = i == j ? 1.0 : aggregate(first, 0, cfg.k - 1, AggregateOp::mean);
  return a - aggregate(second, 0, cfg.k - 1, AggregateOp::mean);
}

}  // namespace

double forgetting(const Model<float>& ft, const Model<float>& pt, int i, int j, const Dataset& pool,
                  const ProtocolConfig& cfg, const Rng& rng) {
  return coupled_difference(pt, ft, i, j, pool, cfg, rng);
}

double learning(const Model<float>& ft, const Model<float>& pt, int i, int j, const Dataset& pool,
                const ProtocolConfig& cfg, const Rng& rng) {
  return coupled_difference(ft, pt, i, j, pool, cfg, rng);
}

double cka_divergence(const Model<float>& ft, const Model<float>& pt, int i, const Dataset& pool,
                      const ProtocolConfig& cfg, const Rng& rng) {
  cfg.validate();
  check_comparable(ft, pt);
  check_layer(ft, i, "layer");
  std::vector<double> per_rep(cfg.k);
  NoGradGuard guard;
  for (std::size_t r = 0; r < cfg.k; ++r) {
    const auto x = sample_inputs(pool, cfg.n, rng, r);
    per_rep[r] = 1.0 - linear_cka(ft.representation(x, i), pt.representation(x, i));
  }
  return aggregate(per_rep, 0, cfg.k - 1, AggregateOp::mean);
}

MetricProfile compute_profile(const Model<float>& ft, const Model<float>& pt, const Dataset& pool,
                              const ProtocolConfig& cfg, const Rng& rng, ProfileContext context) {
  cfg.validate();
  check_comparable(ft, pt);
  std::vector<int> layers = cfg.layers;
  if (layers.empty()) {
    for (std::size_t l = 0; l < ft.layer_count(); ++l) layers.push_back(static_cast<int>(l));
  }
  for (int l : layers) check_layer(ft, l, "profile");
  const std::size_t L = layers.size(), K = cfg.k;

  // Task t = (layer slot, rep, role); role 0 inverts pt, role 1 inverts ft.
  struct Cell {
    double stir = 0, converged = 0;
  };
  std::vector<Cell> cells(L * K * 2);
  parallel_for(cells.size(), cfg.jobs, [&](std::size_t t) {
    const int layer = layers[t / (K * 2)];
    const std::size_t rep = (t / 2) % K;
    const bool invert_ft = t % 2 == 1;
    const auto& conditioning = invert_ft ? ft : pt;
    const auto& evaluated = invert_ft ? pt : ft;
    const auto set = inverted_set(conditioning, layer, pool, cfg, rng, rep);
    cells[t] = {stir_on(evaluated, layer, set), set.converged_fraction};
  });

  std::vector<std::vector<double>> divergence(L, std::vector<double>(K));
  for (std::size_t r = 0; r < K; ++r) {
    const auto x = sample_inputs(pool, cfg.n, rng, r);
    const auto a = all_representations(ft, x);
    const auto b = all_representations(pt, x);
    for (std::size_t l = 0; l < L; ++l) {
      const auto li = static_cast<std::size_t>(layers[l]);
      divergence[l][r] = 1.0 - linear_cka(a[li], b[li]);
    }
  }

  MetricProfile p;
  context.n = cfg.n;
  context.k = K;
  p.context = std::move(context);
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<double> s_pt(K), s_ft(K), c_pt(K), c_ft(K);
    for (std::size_t r = 0; r < K; ++r) {
      const auto& a = cells[(l * K + r) * 2];
      const auto& b = cells[(l * K + r) * 2 + 1];
      s_pt[r] = a.stir;
      c_pt[r] = a.converged;
      s_ft[r] = b.stir;
      c_ft[r] = b.converged;
    }
    const auto f = summarize(s_pt, cfg.n, 0), g = summarize(s_ft, cfg.n, 0);
    p.layers.push_back(layers[l]);
    p.stir_ft_given_pt.push_back(f.mean);
    p.stir_pt_given_ft.push_back(g.mean);
    p.forgetting.push_back(1.0 - f.mean);
    p.forgetting_std.push_back(f.std);
    p.learning.push_back(1.0 - g.mean);
    p.learning_std.push_back(g.std);
    p.cka_divergence.push_back(aggregate(divergence[l], 0, K - 1, AggregateOp::mean));
    p.pt_convergence.push_back(aggregate(c_pt, 0, K - 1, AggregateOp::mean));
    p.ft_convergence.push_back(aggregate(c_ft, 0, K - 1, AggregateOp::mean));
  }
  return p;
}

FlowMatrix flow_matrix(const Model<float>& ft, const Model<float>& pt, const Dataset& pool,
                       const ProtocolConfig& cfg, const Rng& rng) {
  cfg.validate();
  check_comparable(ft, pt);
  const std::size_t L = ft.layer_count(), K = cfg.k;
  // s[i][r][j] = STIR(ft^j | pt^i) for repetition r.
  std::vector<std::vector<std::vector<double>>> s(L, std::vector<std::vector<double>>(K));
  parallel_for(L * K, cfg.jobs, [&](std::size_t t) {
    const std::size_t i = t / K, r = t % K;
    const auto set = inverted_set(pt, static_cast<int>(i), pool, cfg, rng, r);
    const auto a = all_representations(ft, set.x);
    const auto b = all_representations(ft, set.x_prime);
    auto& row = s[i][r];
    row.resize(L);
    for (std::size_t j = 0; j < L; ++j) row[j] = linear_cka(a[j], b[j]);
  });
  FlowMatrix m;
  for (std::size_t i = 0; i < L; ++i) m.layers.push_back(static_cast<int>(i));
  m.values.assign(L, std::vector<double>(L));
  for (std::size_t i = 0; i < L; ++i) {
    std::vector<double> mean_j(L);
    for (std::size_t j = 0; j < L; ++j) {
      std::vector<double> reps(K);
      for (std::size_t r = 0; r < K; ++r) reps[r] = s[i][r][j];
      mean_j[j] = aggregate(reps, 0, K - 1, AggregateOp::mean);
    }
    for (std::size_t j = 0; j < L; ++j) m.values[i][j] = mean_j[j] - mean_j[i];
  }
  return m;
}

FlowRegion classify_region(std::size_t i, std::size_t j, double value) {
  if (i == j) return FlowRegion::diagonal;
  if (!(value > 0)) return FlowRegion::neutral;
  return j < i ? FlowRegion::compression : FlowRegion::expansion;
}

std::string to_string(FlowRegion r) {
  switch (r) {
    case FlowRegion::diagonal: return "diagonal";
    case FlowRegion::compression: return "compression";
    case FlowRegion::expansion: return "expansion";
    case FlowRegion::neutral: return "neutral";
  }
  return "?";
}

std::string to_string(AggregateOp op) {
  switch (op) {
    case AggregateOp::mean: return "mean";
    case AggregateOp::std: return "std";
    case AggregateOp::min: return "min";
    case AggregateOp::max: return "max";
  }
  return "?";
}

double aggregate(const std::vector<double>& values, std::size_t lo, std::size_t hi, AggregateOp op) {
  if (values.empty() || lo > hi) throw ArgumentError("aggregate over an empty layer range");
  if (hi >= values.size()) {
    throw ArgumentError("layer range [" + std::to_string(lo) + ", " + std::to_string(hi) + "] exceeds " +
                        std::to_string(values.size()) + " layers");
  }
  const auto first = values.begin() + static_cast<std::ptrdiff_t>(lo);
  const auto last = values.begin() + static_cast<std::ptrdiff_t>(hi) + 1;
  const double count = static_cast<double>(hi - lo + 1);
  switch (op) {
    case AggregateOp::min: return *std::min_element(first, last);
    case AggregateOp::max: return *std::max_element(first, last);
    case AggregateOp::mean:
    case AggregateOp::std: {
      double sum = 0;
      for (auto it = first; it != last; ++it) sum += *it;
      const double mean = sum / count;
      if (op == AggregateOp::mean) return mean;
      double ss = 0;
      for (auto it = first; it != last; ++it) ss += (*it - mean) * (*it - mean);
      return std::sqrt(ss / count);
    }
  }
  return std::numeric_limits<double>::quiet_NaN();
}

void write_profile_csv(const MetricProfile& p, const std::filesystem::path& path) {
  CsvTable t({"layer", "forgetting", "forgetting_std", "learning", "learning_std", "cka_divergence"});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    t.add_row({std::to_string(p.layers[l] + 1), format_double(p.forgetting[l]), format_double(p.forgetting_std[l]),
               format_double(p.learning[l]), format_double(p.learning_std[l]), format_double(p.cka_divergence[l])});
  }
  t.write(path);
}

MetricProfile read_profile_csv(const std::filesystem::path& path) {
  const auto t = CsvTable::read(path);
  const auto cl = t.column("layer"), cf = t.column("forgetting"), cfs = t.column("forgetting_std"),
             cle = t.column("learning"), cls = t.column("learning_std"), cd = t.column("cka_divergence");
  const std::string what = path.string();
  MetricProfile p;
  for (const auto& row : t.rows()) {
    p.layers.push_back(static_cast<int>(parse_double(row[cl], what)) - 1);
    p.forgetting.push_back(parse_double(row[cf], what));
    p.forgetting_std.push_back(parse_double(row[cfs], what));
    p.learning.push_back(parse_double(row[cle], what));
    p.learning_std.push_back(parse_double(row[cls], what));
    p.cka_divergence.push_back(parse_double(row[cd], what));
  }
  return p;
}

void write_flow_csv(const FlowMatrix& m, const std::filesystem::path& path) {
  std::vector<std::string> header{"pt_layer"};
  for (int l : m.layers) header.push_back("ft_" + std::to_string(l + 1));
  CsvTable t(std::move(header));
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    std::vector<std::string> row{std::to_string(m.layers[i] + 1)};
    for (double v : m.values[i]) row.push_back(format_double(v));
    t.add_row(std::move(row));
  }
  t.write(path);
}

FlowMatrix read_flow_csv(const std::filesystem::path& path) {
  const auto t = CsvTable::read(path);
  const std::string what = path.string();
  if (t.header().size() != t.rows().size() + 1) {
    throw FormatError("flow matrix in " + what + " is not square");
  }
  FlowMatrix m;
  for (const auto& row : t.rows()) {
    m.layers.push_back(static_cast<int>(parse_double(row[0], what)) - 1);
    std::vector<double> v;
    for (std::size_t c = 1; c < row.size(); ++c) v.push_back(parse_double(row[c], what));
    m.values.push_back(std::move(v));
  }
  return m;
}

}  // namespace ilens
