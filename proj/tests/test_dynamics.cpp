// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "ilens/csv.hpp"
#include "ilens/dynamics.hpp"
#include "ilens/train.hpp"
#include "oracles.hpp"

using namespace ilens;

namespace {

std::vector<double> random_series(Rng rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, 1.0);
  return v;
}

/// Synthetic trace with L layers whose metrics drift with the epoch.
DynamicsTrace synthetic_trace(std::size_t layers, std::size_t epochs, std::uint64_t seed) {
  Rng rng(seed);
  DynamicsTrace t;
  t.cells = {{CorruptionKind::gaussian_noise, 1}, {CorruptionKind::box_blur, 3}};
  for (std::size_t e = 0; e < epochs; ++e) {
    t.epochs.push_back(e);
    MetricProfile p;
    for (std::size_t l = 0; l < layers; ++l) {
      p.layers.push_back(static_cast<int>(l));
      const double drift = 0.01 * static_cast<double>(e * (l + 1));
      p.forgetting.push_back(drift + 0.01 * rng.uniform());
      p.learning.push_back(0.5 * drift + 0.01 * rng.uniform());
      p.forgetting_std.push_back(0.001 * rng.uniform());
      p.learning_std.push_back(0.0);
      p.cka_divergence.push_back(0.02 * static_cast<double>(e) + 0.005 * rng.uniform());
    }
    t.profiles.push_back(std::move(p));
    t.clean_acc.push_back(0.5 + 0.04 * static_cast<double>(e));
    t.corrupted_acc.push_back({0.4 + 0.03 * static_cast<double>(e) + 0.01 * rng.uniform(), 0.3 + 0.01 * rng.uniform()});
  }
  return t;
}

}  // namespace

TEST(Pearson, ExactLinearRelations) {
  const std::vector<double> x{1, 2, 3, 4, 5, 6};
  std::vector<double> y, z;
  for (double v : x) {
    y.push_back(2 * v + 1);
    z.push_back(-v);
  }
  const auto a = pearson(x, y);
  EXPECT_DOUBLE_EQ(a.r, 1.0);
  EXPECT_LE(a.p, 1e-12);
  EXPECT_GE(a.p, kMinPValue);
  EXPECT_DOUBLE_EQ(pearson(x, z).r, -1.0);
}

TEST(Pearson, HandSeriesMatchesOracle) {
  const std::vector<double> x{1, 2, 3, 4, 5}, y{2, 1, 4, 3, 6};
  const auto res = pearson(x, y);
  EXPECT_NEAR(res.r, 0.8219949365267865, 1e-12);
  EXPECT_NEAR(res.p, 0.0877066470080655, 1e-12);
  EXPECT_NEAR(res.r, oracle::pearson_r(x, y), 1e-12);
  EXPECT_NEAR(res.p, oracle::pearson_p(oracle::pearson_r(x, y), 5), 1e-12);
  EXPECT_EQ(res.n, 5u);
}

TEST(Pearson, RandomSeriesMatchOracle) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const std::size_t n = 3 + s;
    const auto x = random_series(Rng(100 + s), n);
    const auto y = random_series(Rng(200 + s), n);
    const auto res = pearson(x, y);
    const double r = oracle::pearson_r(x, y);
    EXPECT_NEAR(res.r, r, 1e-9);
    EXPECT_NEAR(res.p, oracle::pearson_p(r, n), 1e-9);
  }
}

TEST(Pearson, SymmetryAndAffineInvariance) {
  const auto x = random_series(Rng(1), 12);
  const auto y = random_series(Rng(2), 12);
  EXPECT_NEAR(pearson(x, y).r, pearson(y, x).r, 1e-12);
  std::vector<double> xs;
  for (double v : x) xs.push_back(3.5 * v - 7.0);
  EXPECT_NEAR(pearson(xs, y).r, pearson(x, y).r, 1e-9);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto a = random_series(Rng(300 + s), 8), b = random_series(Rng(400 + s), 8);
    const auto r = pearson(a, b);
    EXPECT_GE(r.r, -1.0);
    EXPECT_LE(r.r, 1.0);
    EXPECT_GE(r.p, 0.0);
    EXPECT_LE(r.p, 1.0);
  }
}

TEST(Pearson, Contracts) {
  EXPECT_THROW(pearson(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), DegenerateInputError);
  EXPECT_THROW(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2}), ArgumentError);
  EXPECT_THROW(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2}), DimensionError);
}

TEST(Bonferroni, Examples) {
  EXPECT_EQ(bonferroni_threshold(0.05, 352), 0.05 / 352);
  EXPECT_NEAR(bonferroni_threshold(0.05, 352), 1.4205e-4, 1e-8);
  EXPECT_TRUE(bonferroni(3.52e-18, 352));
  EXPECT_FALSE(bonferroni(0.01, 352));
  EXPECT_FALSE(bonferroni(0.05 / 352, 352));
  EXPECT_TRUE(bonferroni(0.04, 1));
  EXPECT_THROW(bonferroni(0.01, 0), ArgumentError);
}

TEST(PrefixCorrelation, DefinitionAndOracle) {
  const std::vector<double> x{0.3, 1.2, 0.7, 2.5, 1.9, 3.1}, y{1.0, 0.4, 1.5, 2.0, 2.8, 2.2};
  const auto pc = prefix_correlation(x, y);
  ASSERT_EQ(pc.size(), 6u);
  EXPECT_FALSE(pc[0].has_value());
  EXPECT_FALSE(pc[1].has_value());
  for (std::size_t k = 2; k < 6; ++k) {
    const std::vector<double> xs(x.begin(), x.begin() + k + 1), ys(y.begin(), y.begin() + k + 1);
    ASSERT_TRUE(pc[k].has_value());
    EXPECT_NEAR(*pc[k], oracle::pearson_r(xs, ys), 1e-9);
  }
  EXPECT_EQ(*pc.back(), pearson(x, y).r);

  const std::vector<double> lin{1, 2, 3, 4, 5};
  for (std::size_t k = 2; k < 5; ++k) EXPECT_DOUBLE_EQ(*prefix_correlation(lin, lin)[k], 1.0);

  const std::vector<double> flat_start{1, 1, 1, 2, 3}, other{4, 2, 5, 1, 3};
  const auto pf = prefix_correlation(flat_start, other);
  EXPECT_FALSE(pf[2].has_value());
  EXPECT_TRUE(pf[3].has_value());
}

TEST(Grid, CardinalitiesForTwelveLayers) {
  EXPECT_EQ(layer_selections(12).size(), 22u);
  EXPECT_EQ(enumerate_grid(12, GridMode::learning_forgetting).size(), 352u);
  EXPECT_EQ(enumerate_grid(12, GridMode::cka).size(), 88u);
  EXPECT_EQ(enumerate_grid(4, GridMode::learning_forgetting).size(), 96u);
  EXPECT_NE(grid_formula(12, GridMode::learning_forgetting).find("= 352"), std::string::npos);
  EXPECT_NE(grid_formula(12, GridMode::cka).find("= 88"), std::string::npos);
}

TEST(Grid, ContainsStdOfForgettingOverLayersTwoToTwelve) {
  const auto grid = enumerate_grid(12, GridMode::learning_forgetting);
  const HypothesisSpec wanted{{SelectionKind::last_n, 11, 1, 11}, MetricOp::forgetting_only, AggregateOp::std};
  EXPECT_EQ(std::count(grid.begin(), grid.end(), wanted), 1);
  EXPECT_EQ(wanted.label(), "last 11 / forgetting_only / std");
}

TEST(Grid, SeriesAggregateSelectedLayers) {
  const auto t = synthetic_trace(4, 5, 1);
  const HypothesisSpec spec{{SelectionKind::last_n, 2, 2, 3}, MetricOp::difference, AggregateOp::max};
  const auto s = hypothesis_series(t, spec);
  ASSERT_EQ(s.size(), 5u);
  for (std::size_t e = 0; e < 5; ++e) {
    const auto& p = t.profiles[e];
    EXPECT_EQ(s[e], std::max(p.learning[2] - p.forgetting[2], p.learning[3] - p.forgetting[3]));
  }
}

TEST(Grid, RankedReportsCarryExecutedGridSize) {
  const auto t = synthetic_trace(12, 8, 2);
  const auto target = t.mean_corrupted_acc();
  const auto g = hypothesis_grid(t, target, GridMode::learning_forgetting);
  ASSERT_EQ(g.reports.size(), 352u);
  EXPECT_EQ(g.m_hypotheses, 352u);
  bool seen_skip = false;
  for (std::size_t i = 0; i < g.reports.size(); ++i) {
    const auto& r = g.reports[i];
    EXPECT_EQ(r.m_hypotheses, 352u);
    EXPECT_EQ(r.n, 8u);
    if (r.skipped()) {
      seen_skip = true;
      continue;
    }
    EXPECT_FALSE(seen_skip) << "skips must rank last";
    if (i > 0 && !g.reports[i - 1].skipped()) {
      EXPECT_GE(std::abs(g.reports[i - 1].r), std::abs(r.r));
    }
    EXPECT_EQ(r.bonferroni_pass, r.p_value < 0.05 / 352);
    const auto pr = pearson(hypothesis_series(t, r.hypothesis), target);
    EXPECT_EQ(r.r, pr.r);
  }
  // std over a single layer is constant, so those specs are skipped with a reason.
  EXPECT_TRUE(seen_skip);
  const auto cka = hypothesis_grid(t, target, GridMode::cka);
  EXPECT_EQ(cka.reports.size(), 88u);
  for (const auto& r : cka.reports) EXPECT_EQ(r.m_hypotheses, 88u);

  const auto par = hypothesis_grid(t, target, GridMode::learning_forgetting, 0.05, 4);
  for (std::size_t i = 0; i < par.reports.size(); ++i) EXPECT_EQ(par.reports[i].hypothesis, g.reports[i].hypothesis);
}

TEST(Grid, Contracts) {
  auto t = synthetic_trace(4, 2, 3);
  EXPECT_THROW(hypothesis_grid(t, t.mean_corrupted_acc(), GridMode::cka), ArgumentError);
  t = synthetic_trace(4, 5, 3);
  EXPECT_THROW(hypothesis_grid(t, std::vector<double>{1, 2, 3}, GridMode::cka), DimensionError);
  t.clean_acc.pop_back();
  EXPECT_THROW(t.validate(), ConsistencyError);
}

TEST(Trace, CsvRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "ilens_test_trace";
  std::filesystem::remove_all(dir);
  const auto t = synthetic_trace(3, 4, 5);
  write_trace(t, dir);
  const auto u = read_trace(dir);
  EXPECT_EQ(u.epochs, t.epochs);
  EXPECT_EQ(u.cells, t.cells);
  ASSERT_EQ(u.profiles.size(), 4u);
  for (std::size_t e = 0; e < 4; ++e) {
    for (std::size_t l = 0; l < 3; ++l) {
      EXPECT_NEAR(u.profiles[e].forgetting[l], t.profiles[e].forgetting[l], 1e-9);
      EXPECT_NEAR(u.profiles[e].learning[l], t.profiles[e].learning[l], 1e-9);
      EXPECT_NEAR(u.profiles[e].cka_divergence[l], t.profiles[e].cka_divergence[l], 1e-9);
    }
    EXPECT_NEAR(u.clean_acc[e], t.clean_acc[e], 1e-9);
  }
  const auto head = read_text(dir / "accuracy.csv").substr(0, 60);
  EXPECT_EQ(head.substr(0, head.find('\n')), "epoch,clean,mean_corrupted,gaussian_noise_s1,box_blur_s3");
  std::filesystem::remove_all(dir);
}

TEST(Robustness, ConstantClassifierOnOneClassIsPerfect) {
  ModelConfig c;
  c.kind = ModelKind::mlp;
  c.input = {1, 8, 8};
  c.mlp_widths = {4};
  c.num_classes = 2;
  auto m = build_model<float>(c, Rng(1)).clone();
  for (auto& p : m.params()) {
    auto d = p.value.mutable_data();
    std::fill(d.begin(), d.end(), 0.0f);
  }
  m.param("head.b").mutable_data()[0] = 1.0f;
  auto ds = gen_shapes(40, 2, {1, 8, 8}, Rng(2), 0, Split::test);
  std::fill(ds.labels.begin(), ds.labels.end(), 0);
  const int sev[] = {1, 3, 5};
  const auto suite = make_robustness_suite(ds, corruption_cells(kCorruptionKinds, sev), 30, Rng(3));
  const auto pt = evaluate_robustness(m, suite);
  EXPECT_EQ(pt.clean, 1.0);
  ASSERT_EQ(pt.corrupted.size(), 12u);
  for (double a : pt.corrupted) EXPECT_EQ(a, 1.0);
}

TEST(Robustness, UntrainedModelIsNearChance) {
  ModelConfig c;
  c.kind = ModelKind::tiny_vit;
  c.input = {1, 16, 16};
  c.num_classes = 4;
  const auto m = build_model<float>(c, Rng(8));
  const auto ds = gen_shapes(800, 4, {1, 16, 16}, Rng(9), 0, Split::test);
  const int sev[] = {1, 5};
  const auto suite = make_robustness_suite(ds, corruption_cells(kCorruptionKinds, sev), 800, Rng(3));
  const auto pt = evaluate_robustness(m, suite);
  double mean = pt.clean;
  for (double a : pt.corrupted) mean += a;
  mean /= static_cast<double>(pt.corrupted.size() + 1);
  EXPECT_NEAR(mean, 0.25, 0.05);
}

TEST(Robustness, CurveFromCheckpointsAndSeverityOrdering) {
  const auto dir = std::filesystem::temp_directory_path() / "ilens_test_robust";
  std::filesystem::remove_all(dir);
  ModelConfig c;
  c.kind = ModelKind::tiny_vit;
  c.input = {1, 16, 16};
  c.num_classes = 3;
  const auto tr = gen_shapes(600, 3, {1, 16, 16}, Rng(11));
  const auto te = gen_shapes(300, 3, {1, 16, 16}, Rng(12), 0, Split::test);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.optimizer = OptimizerKind::adam;
  TrainOptions opts;
  opts.checkpoint_dir = dir;
  train(build_model<float>(c, Rng(3)), tr, te, cfg, opts);

  const int sev[] = {1, 5};
  const auto suite = make_robustness_suite(te, corruption_cells(kCorruptionKinds, sev), 300, Rng(4));
  const std::size_t epochs[] = {0, 1, 2, 3};
  const auto curve = robustness_curve(dir, epochs, suite, 2);
  ASSERT_EQ(curve.clean.size(), 4u);
  EXPECT_EQ(curve.corrupted[3].size(), 8u);
  // Cells alternate severity 1, 5 per kind.
  double s1 = 0, s5 = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    s1 += curve.corrupted[3][2 * k];
    s5 += curve.corrupted[3][2 * k + 1];
  }
  EXPECT_LE(s5 / 4, s1 / 4 + 0.02);
  EXPECT_GT(curve.clean[3], curve.clean[0]);

  const std::size_t missing[] = {0, 7};
  try {
    robustness_curve(dir, missing, suite);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 7"), std::string::npos);
  }
  std::filesystem::remove_all(dir);
}
