// SPDX-License-Identifier: Apache-2.0
//
// Linear centered kernel alignment with the biased HSIC estimator:
//   CKA(X, Y) = ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F)
// where Xc, Yc are column-centered. Always accumulated in double.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ilens/error.hpp"
#include "ilens/ops.hpp"
#include "ilens/tensor.hpp"

namespace ilens {

enum class CkaPath { automatic, feature, gram };

inline constexpr std::size_t kCkaMinSamples = 4;
/// Centered energy below this fraction of raw energy counts as constant rows.
inline constexpr double kCkaDegenerateRatio = 1e-12;

namespace detail {

struct Centered {
  std::vector<double> values;  // n x d, column-centered
  std::size_t n = 0, d = 0;
};

template <class T>
Centered center_columns(const Tensor<T>& x, const char* which) {
  if (x.rank() != 2) throw DimensionError(std::string("cka: ") + which + " must be 2-D, got " + to_string(x.shape()));
  Centered c;
  c.n = x.dim(0);
  c.d = x.dim(1);
  c.values.assign(x.data().begin(), x.data().end());
  std::vector<double> mean(c.d, 0.0);
  double raw = 0;
  for (std::size_t i = 0; i < c.n; ++i)
    for (std::size_t j = 0; j < c.d; ++j) {
      const double v = c.values[i * c.d + j];
      mean[j] += v;
      raw += v * v;
    }
  for (double& m : mean) m /= static_cast<double>(c.n);
  double centered = 0;
  for (std::size_t i = 0; i < c.n; ++i)
    for (std::size_t j = 0; j < c.d; ++j) {
      double& v = c.values[i * c.d + j];
      v -= mean[j];
      centered += v * v;
    }
  if (centered == 0.0 || centered <= kCkaDegenerateRatio * raw) {
    throw DegenerateInputError(std::string("cka: ") + which + " has zero variance across samples");
  }
  return c;
}

inline double frob2(const std::vector<double>& m) {
  double s = 0;
  for (double v : m) s += v * v;
  return s;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double cka_feature(const Centered& x, const Centered& y) {
  std::vector<double> xx(x.d * x.d), yy(y.d * y.d), yx(y.d * x.d);
  gemm(true, false, x.d, x.d, x.n, x.values.data(), x.values.data(), xx.data(), false);
  gemm(true, false, y.d, y.d, y.n, y.values.data(), y.values.data(), yy.data(), false);
  gemm(true, false, y.d, x.d, x.n, y.values.data(), x.values.data(), yx.data(), false);
  return frob2(yx) / (std::sqrt(frob2(xx)) * std::sqrt(frob2(yy)));
}

inline double cka_gram(const Centered& x, const Centered& y) {
  // Column-centering makes Xc Xc^T already double-centered.
  std::vector<double> kx(x.n * x.n), ky(y.n * y.n);
  gemm(false, true, x.n, x.n, x.d, x.values.data(), x.values.data(), kx.data(), false);
  gemm(false, true, y.n, y.n, y.d, y.values.data(), y.values.data(), ky.data(), false);
  return dot(kx, ky) / (std::sqrt(frob2(kx)) * std::sqrt(frob2(ky)));
}

}  // namespace detail

/// Linear CKA in [0, 1]. Rows are samples; column counts may differ.
template <class T>
double linear_cka(const Tensor<T>& x, const Tensor<T>& y, CkaPath path = CkaPath::automatic) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0)) {
    throw DimensionError("cka: sample counts differ, " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  }
  if (x.dim(0) < kCkaMinSamples) {
    throw ArgumentError("cka needs at least 4 samples, got " + std::to_string(x.dim(0)));
  }
  const auto cx = detail::center_columns(x, "x");
  const auto cy = detail::center_columns(y, "y");
  if (path == CkaPath::automatic) {
    const double n = static_cast<double>(cx.n);
    const double d1 = static_cast<double>(cx.d), d2 = static_cast<double>(cy.d);
    const double feature_cost = n * (d1 * d1 + d2 * d2 + d1 * d2);
    const double gram_cost = n * n * (d1 + d2);
    path = feature_cost <= gram_cost ? CkaPath::feature : CkaPath::gram;
  }
  const double v = path == CkaPath::feature ? detail::cka_feature(cx, cy) : detail::cka_gram(cx, cy);
  return std::clamp(v, 0.0, 1.0);
}

}  // namespace ilens
