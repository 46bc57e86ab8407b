// SPDX-License-Identifier: Apache-2.0
//
// STIR and the metrics built on it. A finetuned model `ft` is compared with
// its pretrained initialization `pt`, layer by layer.
//
// Layer indices are 0-based in the API. CSV files label layers 1-based.
//
// RNG streams: repetition r samples X from rng.derive({kSampleStream, r}).
// Inverting (reference, j) for repetition r uses
// rng.derive({kInvertStream, j, r}). Terms subtracted from one another
// therefore always share X and X'.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ilens/data.hpp"
#include "ilens/invert.hpp"
#include "ilens/rng.hpp"
#include "ilens/zoo.hpp"

namespace ilens {

inline constexpr std::uint64_t kSampleStream = 0x5a3d1e;
inline constexpr std::uint64_t kInvertStream = 0x1a7e57;

struct ProtocolConfig {
  std::size_t n = 500;  // samples per repetition
  std::size_t k = 3;    // repetitions
  InversionConfig inversion;
  std::size_t jobs = 1;
  /// 0-based layers for compute_profile; empty means all.
  std::vector<int> layers;

  /// CI profile: n=64, k=1, 20 inversion iterations.
  static ProtocolConfig fast() {
    ProtocolConfig p;
    p.n = 64;
    p.k = 1;
    p.inversion.iterations = 20;
    return p;
  }
  void validate() const;
  bool operator==(const ProtocolConfig&) const = default;
};

struct StirScore {
  double mean = 0;
  double std = 0;  // population std over repetitions
  std::size_t k = 0;
  std::vector<double> per_rep;
  std::size_t n_samples = 0;
  double converged_fraction = 0;  // inversion convergence averaged over repetitions
};

/// One repetition's clean samples and their inversion against (reference, j).
struct InvertedSet {
  Tensor<float> x;
  Tensor<float> x_prime;
  double converged_fraction = 0;
  double mean_init_loss = 0;
  double mean_final_loss = 0;
};

std::vector<std::size_t> sample_indices(const Dataset& pool, std::size_t n, const Rng& rng, std::size_t rep);
Tensor<float> sample_inputs(const Dataset& pool, std::size_t n, const Rng& rng, std::size_t rep);
InvertedSet inverted_set(const Model<float>& reference, int j, const Dataset& pool, const ProtocolConfig& cfg,
                         const Rng& rng, std::size_t rep);

/// CKA between target layer i on X and on X'.
double stir_on(const Model<float>& target, int i, const InvertedSet& set);

/// Representations of every layer, in order, from one forward pass.
std::vector<Tensor<float>> all_representations(const Model<float>& model, const Tensor<float>& x);

/// STIR(target^i | reference^j): X' is found by inverting the reference.
StirScore stir(const Model<float>& target, int i, const Model<float>& reference, int j, const Dataset& pool,
               const ProtocolConfig& cfg, const Rng& rng);

/// STIR(pt^i|pt^j) - STIR(ft^i|pt^j). For i == j the first term is exactly 1.
double forgetting(const Model<float>& ft, const Model<float>& pt, int i, int j, const Dataset& pool,
                  const ProtocolConfig& cfg, const Rng& rng);
/// STIR(ft^i|ft^j) - STIR(pt^i|ft^j). For i == j the first term is exactly 1.
double learning(const Model<float>& ft, const Model<float>& pt, int i, int j, const Dataset& pool,
                const ProtocolConfig& cfg, const Rng& rng);
/// 1 - CKA(ft_i(X), pt_i(X)) on clean samples, averaged over repetitions.
double cka_divergence(const Model<float>& ft, const Model<float>& pt, int i, const Dataset& pool,
                      const ProtocolConfig& cfg, const Rng& rng);

struct ProfileContext {
  std::string ft_checkpoint;
  std::string pt_checkpoint;
  std::string dataset;
  std::size_t n = 0;
  std::size_t k = 0;
  std::uint64_t seed = 0;
};

/// Per-layer i=j metrics. Vectors are aligned with `layers`.
struct MetricProfile {
  std::vector<int> layers;
  std::vector<double> forgetting, forgetting_std;
  std::vector<double> learning, learning_std;
  std::vector<double> cka_divergence;
  // The STIR terms the two metrics were reduced from, and inversion health.
  std::vector<double> stir_ft_given_pt, stir_pt_given_ft;
  std::vector<double> pt_convergence, ft_convergence;
  ProfileContext context;
};

void check_comparable(const Model<float>& ft, const Model<float>& pt);

MetricProfile compute_profile(const Model<float>& ft, const Model<float>& pt, const Dataset& pool,
                              const ProtocolConfig& cfg, const Rng& rng, ProfileContext context = {});

struct FlowMatrix {
  std::vector<int> layers;
  std::vector<std::vector<double>> values;  // values[i][j] = STIR(ft^j|pt^i) - STIR(ft^i|pt^i)
};

FlowMatrix flow_matrix(const Model<float>& ft, const Model<float>& pt, const Dataset& pool,
                       const ProtocolConfig& cfg, const Rng& rng);

enum class FlowRegion { diagonal, compression, expansion, neutral };
/// Positive entries below the diagonal compress, above it expand.
FlowRegion classify_region(std::size_t i, std::size_t j, double value);
std::string to_string(FlowRegion r);

enum class AggregateOp { mean, std, min, max };
inline constexpr AggregateOp kAggregateOps[] = {AggregateOp::mean, AggregateOp::std, AggregateOp::min,
                                                AggregateOp::max};
std::string to_string(AggregateOp op);

/// Aggregates values[lo..hi] (inclusive). std is the population std.
double aggregate(const std::vector<double>& values, std::size_t lo, std::size_t hi, AggregateOp op);

void write_profile_csv(const MetricProfile& p, const std::filesystem::path& path);
MetricProfile read_profile_csv(const std::filesystem::path& path);
void write_flow_csv(const FlowMatrix& m, const std::filesystem::path& path);
FlowMatrix read_flow_csv(const std::filesystem::path& path);

}  // namespace ilens
