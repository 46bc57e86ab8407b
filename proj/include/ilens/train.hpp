// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "ilens/data.hpp"
#include "ilens/json_io.hpp"
#include "ilens/rng.hpp"
#include "ilens/zoo.hpp"

namespace ilens {

enum class OptimizerKind { sgd, adam };
enum class ScheduleKind { cosine, constant };
enum class LossKind { cross_entropy, l1_reconstruction };

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  ScheduleKind schedule = ScheduleKind::cosine;
  LossKind loss = LossKind::cross_entropy;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0)) throw ConfigError("lr must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  }
  bool operator==(const TrainConfig&) const = default;
};

/// lr(t) for step t of T. Cosine: lr * 0.5 * (1 + cos(pi t / T)).
inline double learning_rate(const TrainConfig& c, std::size_t t, std::size_t total) {
  if (t > total) {
    throw ScheduleError("step " + std::to_string(t) + " is past the schedule end " + std::to_string(total));
  }
  if (c.schedule == ScheduleKind::constant || total == 0) return c.lr;
  return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

/// SGD with momentum and coupled weight decay, or Adam with L2 decay folded
/// into the gradient. State is laid out in parameter order.
template <class T>
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const std::vector<NamedParam<T>>& params) : cfg_(cfg) {
    for (const auto& p : params) {
      first_.emplace_back(p.value.numel(), 0.0);
      if (cfg_.optimizer == OptimizerKind::adam) second_.emplace_back(p.value.numel(), 0.0);
    }
  }

  /// Applies one update from the accumulated gradients at step t of total.
  void step(std::vector<NamedParam<T>>& params, std::size_t t, std::size_t total) {
    if (params.size() != first_.size()) throw ContractError("optimizer state does not match parameter set");
    const double lr = learning_rate(cfg_, t, total);
    ++steps_;
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k].value;
      const auto g = p.grad();
      auto theta = p.mutable_data();
      auto& v = first_[k];
      if (cfg_.optimizer == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < theta.size(); ++i) {
          v[i] = cfg_.momentum * v[i] + g[i] + cfg_.weight_decay * theta[i];
          theta[i] = static_cast<T>(theta[i] - lr * v[i]);
        }
      } else {
        auto& s = second_[k];
        const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(steps_));
        for (std::size_t i = 0; i < theta.size(); ++i) {
          const double gi = g[i] + cfg_.weight_decay * theta[i];
          v[i] = kAdamBeta1 * v[i] + (1 - kAdamBeta1) * gi;
          s[i] = kAdamBeta2 * s[i] + (1 - kAdamBeta2) * gi * gi;
          theta[i] = static_cast<T>(theta[i] - lr * (v[i] / c1) / (std::sqrt(s[i] / c2) + kAdamEps));
        }
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<double>> first_, second_;
  std::size_t steps_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double test_metric = 0;  // accuracy, or mean L1 for reconstruction
  std::string checkpoint_path;
  bool operator==(const EpochRecord&) const = default;
};

using EpochHook = std::function<void(const EpochRecord&, const Model<float>&)>;

struct TrainOptions {
  /// When set, epoch_000 (initial weights) and epoch_NNN are written here.
  std::optional<std::filesystem::path> checkpoint_dir;
  EpochHook hook;
  std::size_t eval_batch_size = 256;
};

struct TrainResult {
  Model<float> model;
  std::vector<EpochRecord> records;
};

/// Accuracy for classification heads; mean absolute pixel error for reconstruction.
double evaluate(const Model<float>& model, const Dataset& ds, std::size_t batch_size = 256);

/// Trains a deep copy; `initial` is left untouched.
TrainResult train(const Model<float>& initial, const Dataset& train_ds, const Dataset& test_ds,
                  const TrainConfig& cfg, const TrainOptions& opts = {});

// Checkpoints: directory {manifest.json, weights.bin}.
struct Checkpoint {
  Model<float> model;
  std::size_t epoch = 0;
  Rng::State rng_state{};
};

std::string checkpoint_name(std::size_t epoch);
void save_checkpoint(const Model<float>& model, const std::filesystem::path& dir, std::size_t epoch,
                     const Rng::State& rng_state);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

void write_epoch_csv(const std::vector<EpochRecord>& records, const std::filesystem::path& path);
std::vector<EpochRecord> read_epoch_csv(const std::filesystem::path& path);

Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(ObjectReader r);
Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(ObjectReader r);

}  // namespace ilens
