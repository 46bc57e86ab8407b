// SPDX-License-Identifier: Apache-2.0
//
// Representation inversion: find X' in [0,1] whose layer-j representation
// under a frozen reference model matches that of X.
//
// Each sample owns its RNG stream and its Adam state, and its loss gradient
// only touches its own pixels, so x'[k] is independent of chunking and of
// the number of worker threads.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ilens/ops.hpp"
#include "ilens/parallel.hpp"
#include "ilens/rng.hpp"
#include "ilens/tensor.hpp"
#include "ilens/zoo.hpp"

namespace ilens {

enum class InversionInit { uniform_noise, data_jitter };

struct InversionConfig {
  std::size_t iterations = 50;
  double step_size = 0.05;
  InversionInit init = InversionInit::uniform_noise;
  double jitter_sigma = 0.1;
  /// Converged when ||r' - r||^2 / ||r||^2 falls below this.
  double match_tolerance = 1e-2;
  std::size_t chunk_size = 64;

  void validate() const {
    if (!(step_size > 0)) throw ConfigError("inversion step_size must be > 0");
    if (!(match_tolerance > 0)) throw ConfigError("inversion match_tolerance must be > 0");
    if (chunk_size == 0) throw ConfigError("inversion chunk_size must be >= 1");
    if (!(jitter_sigma >= 0)) throw ConfigError("inversion jitter_sigma must be >= 0");
  }
  bool operator==(const InversionConfig&) const = default;
};

template <class T>
struct InversionResult {
  Tensor<T> x_prime;
  std::vector<double> init_loss;        // per-sample representation MSE at init
  std::vector<double> per_sample_loss;  // per-sample representation MSE at the end
  std::vector<double> relative_error;   // ||r' - r||^2 / ||r||^2 at the end
  std::vector<bool> converged;

  std::size_t converged_count() const { return static_cast<std::size_t>(std::count(converged.begin(), converged.end(), true)); }
  double converged_fraction() const {
    return converged.empty() ? 0.0 : static_cast<double>(converged_count()) / static_cast<double>(converged.size());
  }
  static double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }
};

namespace detail {

struct MatchStats {
  std::vector<double> mse, relative;
};

template <class T>
MatchStats match_stats(const Tensor<T>& rep, const Tensor<T>& target) {
  const std::size_t n = rep.dim(0), d = rep.dim(1);
  MatchStats s{std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    double err = 0, norm = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double a = rep[i * d + j], b = target[i * d + j];
      err += (a - b) * (a - b);
      norm += b * b;
    }
    s.mse[i] = err / static_cast<double>(d);
    s.relative[i] = norm > 0 ? err / norm : (err > 0 ? INFINITY : 0.0);
  }
  return s;
}

template <class T>
Tensor<T> rows_of(const Tensor<T>& x, std::size_t first, std::size_t count) {
  Shape s = x.shape();
  const std::size_t per = x.numel() / s[0];
  s[0] = count;
  return Tensor<T>(s, std::vector<T>(x.data().begin() + static_cast<std::ptrdiff_t>(first * per),
                                     x.data().begin() + static_cast<std::ptrdiff_t>((first + count) * per)));
}

/// Index of the first row whose forward pass is not finite, if any.
template <class T>
std::optional<std::size_t> first_bad_row(const Model<T>& ref, int layer, const Tensor<T>& x) {
  NoGradGuard guard;
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    try {
      ref.representation(rows_of(x, i, 1), layer);
    } catch (const NumericError&) {
      return i;
    }
  }
  return std::nullopt;
}

template <class T>
struct ChunkResult {
  Tensor<T> x_prime;
  MatchStats init, final;
};

/// Inverts rows [first, first + xs.dim(0)). Sample k draws its init from rng.derive(k).
template <class T>
ChunkResult<T> invert_chunk(const Model<T>& ref, int layer, const Tensor<T>& xs, std::size_t first,
                            const InversionConfig& cfg, const Rng& rng) {
  const std::size_t count = xs.dim(0), per = xs.numel() / count;
  Tensor<T> target;
  {
    NoGradGuard guard;
    target = ref.representation(xs, layer);
  }
  std::vector<T> init(count * per);
  for (std::size_t i = 0; i < count; ++i) {
    Rng r = rng.derive(first + i);
    for (std::size_t p = 0; p < per; ++p) {
      const double v = cfg.init == InversionInit::uniform_noise
                           ? r.uniform()
                           : std::clamp(static_cast<double>(xs[i * per + p]) + r.normal(0.0, cfg.jitter_sigma), 0.0, 1.0);
      init[i * per + p] = static_cast<T>(v);
    }
  }
  ChunkResult<T> out;
  Tensor<T> xp(xs.shape(), std::move(init));
  xp.set_requires_grad(true);
  {
    NoGradGuard guard;
    out.init = match_stats(ref.representation(xp, layer), target);
  }
  const T inv_d = T(1) / static_cast<T>(target.dim(1));
  std::vector<double> m(count * per, 0.0), v(count * per, 0.0);
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    xp.zero_grad();
    // Sum over samples of per-sample MSE: each sample's gradient is its own.
    backward(scale(sum(square(sub(ref.representation(xp, layer), target))), inv_d));
    const auto g = xp.grad();
    auto px = xp.mutable_data();
    const double c1 = 1.0 - std::pow(0.9, static_cast<double>(it));
    const double c2 = 1.0 - std::pow(0.999, static_cast<double>(it));
    for (std::size_t k = 0; k < px.size(); ++k) {
      m[k] = 0.9 * m[k] + 0.1 * g[k];
      v[k] = 0.999 * v[k] + 0.001 * static_cast<double>(g[k]) * g[k];
      const double step = cfg.step_size * (m[k] / c1) / (std::sqrt(v[k] / c2) + 1e-8);
      px[k] = static_cast<T>(std::clamp(static_cast<double>(px[k]) - step, 0.0, 1.0));
    }
  }
  NoGradGuard guard;
  out.final = match_stats(ref.representation(xp, layer), target);
  out.x_prime = xp.detach();
  return out;
}

}  // namespace detail

/// Inverts `reference` at `layer` for the batch x. `reference` is never
/// modified; gradients flow only into x'.
template <class T>
InversionResult<T> invert(const Model<T>& reference, int layer, const Tensor<T>& x, const InversionConfig& cfg,
                          const Rng& rng, std::size_t jobs = 1) {
  cfg.validate();
  if (layer < 0 || static_cast<std::size_t>(layer) >= reference.layer_count()) {
    throw IndexError("inversion layer " + std::to_string(layer) + " outside [0, " +
                     std::to_string(reference.layer_count()) + ")");
  }
  const Model<T> ref = reference.frozen();
  const std::size_t n = x.dim(0);
  const std::size_t per = x.numel() / std::max<std::size_t>(n, 1);
  const std::size_t chunks = (n + cfg.chunk_size - 1) / cfg.chunk_size;

  std::vector<T> out(x.numel());
  InversionResult<T> res;
  res.init_loss.resize(n);
  res.per_sample_loss.resize(n);
  res.relative_error.resize(n);
  std::vector<char> conv(n, 0);

  parallel_for(chunks, jobs, [&](std::size_t c) {
    const std::size_t first = c * cfg.chunk_size;
    const std::size_t count = std::min(cfg.chunk_size, n - first);
    const Tensor<T> xs = detail::rows_of(x, first, count);
    detail::ChunkResult<T> r;
    try {
      r = detail::invert_chunk(ref, layer, xs, first, cfg, rng);
    } catch (const NumericError& e) {
      const auto bad = detail::first_bad_row(ref, layer, xs);
      throw NumericError("inversion diverged at sample " + std::to_string(first + bad.value_or(0)) + ": " +
                         e.what());
    }
    for (std::size_t i = 0; i < count; ++i) {
      res.init_loss[first + i] = r.init.mse[i];
      res.per_sample_loss[first + i] = r.final.mse[i];
      res.relative_error[first + i] = r.final.relative[i];
      conv[first + i] = r.final.relative[i] < cfg.match_tolerance;
    }
    std::copy(r.x_prime.data().begin(), r.x_prime.data().end(),
              out.begin() + static_cast<std::ptrdiff_t>(first * per));
  });

  res.x_prime = Tensor<T>(x.shape(), std::move(out));
  res.converged.assign(conv.begin(), conv.end());
  return res;
}

}  // namespace ilens
