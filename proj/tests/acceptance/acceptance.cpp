// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion. Tolerances are fixed
// here. Pass criterion ids as arguments to run a subset.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grad_cases.hpp"
#include "ilens/csv.hpp"
#include "ilens/dynamics.hpp"
#include "ilens/pipeline.hpp"
#include "ilens/sim.hpp"
#include "ilens/stir.hpp"
#include "ilens/train.hpp"
#include "oracles.hpp"

using namespace ilens;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kCkaTolerance = 1e-6;
constexpr double kGradTolerance = 1e-4;
constexpr double kSelfStirFloor = 0.90;
constexpr double kConvergedLayerFraction = 0.5;
constexpr double kStatsTolerance = 1e-9;
constexpr int kDirectionalSeeds = 3;
constexpr int kDirectionalWins = 2;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o.precision(prec);
  o << v;
  return o.str();
}

fs::path work_root() {
  static const fs::path root = [] {
    const auto p = fs::temp_directory_path() / "ilens_acceptance";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

// ---- 1: CKA against the brute-force centered-Gram oracle -----------------

Verdict cka_oracle() {
  Rng rng(2024);
  const std::size_t n = 40;
  double worst = 0;
  for (int pair = 0; pair < 50; ++pair) {
    const std::size_t d1 = 2 + rng.below(15), d2 = 2 + rng.below(15);
    oracle::Matrix x(n, std::vector<double>(d1)), y(n, std::vector<double>(d2));
    std::vector<double> fx, fy;
    for (auto& row : x)
      for (auto& v : row) fx.push_back(v = rng.normal());
    for (auto& row : y)
      for (auto& v : row) fy.push_back(v = rng.normal());
    const Tensor<double> tx({n, d1}, fx), ty({n, d2}, fy);
    const double want = oracle::linear_cka(x, y);
    for (auto path : {CkaPath::automatic, CkaPath::feature, CkaPath::gram}) {
      worst = std::max(worst, std::abs(linear_cka(tx, ty, path) - want));
    }
  }
  return {worst < kCkaTolerance, "50 pairs, n=40, max |diff| " + fmt(worst) + " (tol " + fmt(kCkaTolerance) + ")"};
}

// ---- 2: gradient integrity ----------------------------------------------

Verdict gradients() {
  auto errors = grad_cases::op_errors();
  const auto model = grad_cases::model_errors();
  errors.insert(errors.end(), model.begin(), model.end());
  const auto worst = std::max_element(errors.begin(), errors.end(),
                                      [](const auto& a, const auto& b) { return a.second < b.second; });
  return {worst->second < kGradTolerance, std::to_string(errors.size()) + " checks, worst " + worst->first + " " +
                                              fmt(worst->second) + " (tol " + fmt(kGradTolerance) + ")"};
}

// ---- 3 and 4: trained tiny_vit, self-STIR and exact identities ----------

ModelConfig vit(std::size_t classes) {
  ModelConfig c;
  c.kind = ModelKind::tiny_vit;
  c.input = {1, 16, 16};
  c.vit = {4, 32, 4, 4, 2.0};
  c.num_classes = classes;
  return c;
}

TrainConfig adam(std::size_t epochs, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 32;
  t.optimizer = OptimizerKind::adam;
  t.lr = 0.002;
  t.seed = seed;
  return t;
}

const Model<float>& trained_vit() {
  static const Model<float> m = [] {
    const auto tr = gen_shapes(1500, 5, {1, 16, 16}, Rng(1));
    const auto te = gen_shapes(300, 5, {1, 16, 16}, Rng(2), 0, Split::test);
    return train(build_model<float>(vit(5), Rng(4)), tr, te, adam(4, 3)).model.frozen();
  }();
  return m;
}

const Dataset& probe_pool() {
  static const Dataset ds = gen_shapes(300, 5, {1, 16, 16}, Rng(6), 0, Split::test);
  return ds;
}

ProtocolConfig protocol_50() {
  ProtocolConfig p;
  p.n = 64;
  p.k = 1;
  p.inversion.iterations = 50;
  return p;
}

Verdict self_stir() {
  const auto& m = trained_vit();
  bool ok = true;
  std::size_t checked = 0;
  std::string detail;
  for (int l = 0; l < static_cast<int>(m.layer_count()); ++l) {
    const auto s = stir(m, l, m, l, probe_pool(), protocol_50(), Rng(5));
    const bool converged = s.converged_fraction >= kConvergedLayerFraction;
    if (converged) {
      ++checked;
      ok = ok && s.mean >= kSelfStirFloor;
    }
    detail += "L" + std::to_string(l + 1) + " " + fmt(s.mean) + " conv " + fmt(s.converged_fraction, 2) +
              (converged ? "" : " [reported]") + "; ";
  }
  return {ok, detail + std::to_string(checked) + " layer(s) gated at >= " + fmt(kSelfStirFloor)};
}

Verdict identities() {
  const auto& pt = trained_vit();
  const auto tr = gen_shapes(600, 3, {1, 16, 16}, Rng(21), 5);
  const auto te = gen_shapes(90, 3, {1, 16, 16}, Rng(22), 5, Split::test);
  const auto ft = train(rehead(pt, vit(3), Rng(23)), tr, te, adam(2, 24)).model.frozen();
  const auto cfg = protocol_50();
  const auto p = compute_profile(ft, pt, probe_pool(), cfg, Rng(9));
  std::size_t bad = 0;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const int i = p.layers[l];
    bad += p.forgetting[l] + p.stir_ft_given_pt[l] != 1.0;
    bad += p.learning[l] + p.stir_pt_given_ft[l] != 1.0;
    // Shared evaluation: the profile's terms are the standalone STIR values.
    bad += p.stir_ft_given_pt[l] != stir(ft, i, pt, i, probe_pool(), cfg, Rng(9)).mean;
    bad += p.stir_pt_given_ft[l] != stir(pt, i, ft, i, probe_pool(), cfg, Rng(9)).mean;
  }
  const auto f = flow_matrix(ft, pt, probe_pool(), cfg, Rng(9));
  std::size_t nonzero_diag = 0, off_diag_nonzero = 0;
  for (std::size_t i = 0; i < f.values.size(); ++i) {
    for (std::size_t j = 0; j < f.values.size(); ++j) {
      if (i == j) nonzero_diag += f.values[i][j] != 0.0;
      else off_diag_nonzero += f.values[i][j] != 0.0;
    }
  }
  return {bad == 0 && nonzero_diag == 0,
          std::to_string(4 * p.layers.size()) + " identity checks, " + std::to_string(bad) + " inexact; flow diagonal " +
              std::to_string(nonzero_diag) + " nonzero, off-diagonal " + std::to_string(off_diag_nonzero) +
              " nonzero"};
}

// ---- 5 and 6: directional analogs through the pipeline ------------------

Json demo_json() { return Json::parse(read_text(ILENS_DEMO_CONFIG)); }

double mean_over(const std::vector<double>& a, const std::vector<double>& b, std::size_t count) {
  double s = 0;
  for (std::size_t l = 0; l < count; ++l) s += a[l] + (b.empty() ? 0.0 : b[l]);
  return s / static_cast<double>(count);
}

struct SeedRuns {
  MetricProfile pretrained, scratch;
  fs::path dir;
};

const SeedRuns& seed_runs(int seed) {
  static std::map<int, SeedRuns> cache;
  auto it = cache.find(seed);
  if (it != cache.end()) return it->second;
  auto j = demo_json();
  j["seed"] = seed;
  j["output_dir"] = (work_root() / ("seed_" + std::to_string(seed) + "_cls")).string();
  Pipeline p(parse_run_config(j), {1, true, nullptr});
  p.gen_data();
  for (auto s : {TrainStage::pretrain, TrainStage::finetune, TrainStage::scratch}) p.train(s);
  SeedRuns r{p.metrics("finetune"), p.metrics("scratch"), p.dir()};
  return cache.emplace(seed, std::move(r)).first->second;
}

Verdict pretraining_effect() {
  int wins = 0;
  std::string detail;
  for (int seed = 1; seed <= kDirectionalSeeds; ++seed) {
    const auto& r = seed_runs(seed);
    const std::size_t half = r.pretrained.layers.size() / 2;
    const double pre = mean_over(r.pretrained.forgetting, r.pretrained.learning, half);
    const double scr = mean_over(r.scratch.forgetting, r.scratch.learning, half);
    wins += pre < scr;
    detail += "seed " + std::to_string(seed) + ": pretrained " + fmt(pre) + " vs scratch " + fmt(scr) + "; ";
  }
  return {wins >= kDirectionalWins, detail + std::to_string(wins) + "/" + std::to_string(kDirectionalSeeds) +
                                        " seeds lower for pretrained init (first half of layers)"};
}

Verdict task_effect() {
  int wins = 0;
  std::string detail;
  for (int seed = 1; seed <= kDirectionalSeeds; ++seed) {
    const auto& cls = seed_runs(seed);
    auto j = demo_json();
    j["seed"] = seed;
    j["finetune"]["task"] = "reconstruction";
    j["output_dir"] = (work_root() / ("seed_" + std::to_string(seed) + "_rec")).string();
    Pipeline p(parse_run_config(j), {1, true, nullptr});
    // Same data and the same pretrained encoder as the classification run.
    fs::create_directories(p.dir() / "runs");
    fs::copy(cls.dir / "data", p.dir() / "data", fs::copy_options::recursive);
    fs::copy(cls.dir / "runs" / "pretrain", p.run_dir("pretrain"), fs::copy_options::recursive);
    p.train(TrainStage::finetune);
    const auto rec = p.metrics("finetune");
    const std::size_t L = rec.layers.size();
    const double lr = mean_over(rec.learning, {}, L), lc = mean_over(cls.pretrained.learning, {}, L);
    wins += lr >= lc;
    detail += "seed " + std::to_string(seed) + ": reconstruction " + fmt(lr) + " vs classification " + fmt(lc) + "; ";
  }
  return {wins >= kDirectionalWins, detail + std::to_string(wins) + "/" + std::to_string(kDirectionalSeeds) +
                                        " seeds with reconstruction learning >= classification"};
}

// ---- 7: statistics oracle -------------------------------------------------

Verdict statistics() {
  Rng rng(77);
  double worst_r = 0, worst_p = 0, worst_prefix = 0;
  for (int s = 0; s < 20; ++s) {
    const std::size_t n = 5 + rng.below(20);
    std::vector<double> x(n), y(n);
    const double coupling = rng.uniform(-1, 1);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = coupling * x[i] + rng.normal();
    }
    const auto got = pearson(x, y);
    const double r = oracle::pearson_r(x, y);
    worst_r = std::max(worst_r, std::abs(got.r - r));
    worst_p = std::max(worst_p, std::abs(got.p - std::max(oracle::pearson_p(r, n), kMinPValue)));
    const auto pc = prefix_correlation(x, y);
    for (std::size_t k = 2; k < n; ++k) {
      const std::vector<double> px(x.begin(), x.begin() + k + 1), py(y.begin(), y.begin() + k + 1);
      worst_prefix = std::max(worst_prefix, pc[k] ? std::abs(*pc[k] - oracle::pearson_r(px, py)) : 1.0);
    }
  }
  const bool threshold = bonferroni_threshold(0.05, 352) == 0.05 / 352 && !bonferroni(0.05 / 352, 352) &&
                         bonferroni(std::nextafter(0.05 / 352, 0.0), 352);
  const std::size_t lf = enumerate_grid(12, GridMode::learning_forgetting).size();
  const std::size_t cka = enumerate_grid(12, GridMode::cka).size();
  const bool ok = worst_r < kStatsTolerance && worst_p < kStatsTolerance && worst_prefix < kStatsTolerance &&
                  threshold && lf == 352 && cka == 88;
  return {ok, "max |dr| " + fmt(worst_r) + ", |dp| " + fmt(worst_p) + ", prefix " + fmt(worst_prefix) +
                  "; alpha/m exact " + (threshold ? "yes" : "no") + "; grid " + std::to_string(lf) + " and " +
                  std::to_string(cka) + " for 12 layers"};
}

// ---- 8: reproducibility of the bundled demo ------------------------------

int run_demo(const fs::path& out) {
  const std::string cmd = std::string(ILENS_BIN) + " --quiet --config " + ILENS_DEMO_CONFIG + " --output-dir " +
                          out.string() + " all";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Verdict reproducibility() {
  const auto a = work_root() / "demo_a", b = work_root() / "demo_b";
  const int ca = run_demo(a), cb = run_demo(b);
  if (ca != 0 || cb != 0) return {false, "demo exited with " + std::to_string(ca) + " / " + std::to_string(cb)};
  std::size_t csvs = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
    ++csvs;
    const auto other = b / fs::relative(e.path(), a);
    differing += !fs::exists(other) || read_text(e.path()) != read_text(other);
  }
  const auto ma = Json::parse(read_text(a / "manifest.json")), mb = Json::parse(read_text(b / "manifest.json"));
  const bool files = ma.at("files") == mb.at("files") && ma.at("config_hash") == mb.at("config_hash");
  std::size_t verified = 0;
  for (const auto& f : mb.at("files")) verified += sha256_file(b / f.at("path").get<std::string>()) == f.at("sha256");
  const bool ok = csvs > 0 && differing == 0 && files && verified == mb.at("files").size();
  return {ok, std::to_string(csvs) + " CSVs, " + std::to_string(differing) + " differ; manifest inventories " +
                  (files ? "match" : "differ") + " (" + std::to_string(ma.at("files").size()) + " files, " +
                  std::to_string(verified) + " checksums re-verified)"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"CKA matches brute-force oracle", cka_oracle},
      {"gradient integrity at 64-bit", gradients},
      {"STIR self-identity on converged layers", self_stir},
      {"exact algebraic identities", identities},
      {"pretraining lowers early-layer forgetting+learning", pretraining_effect},
      {"reconstruction learns at least as much as classification", task_effect},
      {"statistics oracle and grid cardinality", statistics},
      {"demo pipeline reproducibility", reproducibility},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[k].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !v.pass;
    std::printf("CRITERION %d %s  %s  [%s] (%.1f s)\n", id, v.pass ? "PASS" : "FAIL", criteria[k].first.c_str(),
                v.detail.c_str(), s);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
