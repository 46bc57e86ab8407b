// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "ilens/tensor.hpp"

namespace ilens {

/// Worst coordinate-wise disagreement between the autodiff gradient of a
/// scalar function and central differences, with x perturbed in place.
/// Error per coordinate is |auto - numeric| / max(1, |auto|, |numeric|).
template <class T>
double grad_check_inplace(const std::function<Tensor<T>()>& f, Tensor<T> x, double eps) {
  const bool had = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  backward(f());
  const std::vector<T> analytic = x.grad();
  x.zero_grad();

  double worst = 0.0;
  auto values = x.mutable_data();
  {
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T orig = values[i];
      values[i] = orig + static_cast<T>(eps);
      const double up = static_cast<double>(f().item());
      values[i] = orig - static_cast<T>(eps);
      const double down = static_cast<double>(f().item());
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  x.set_requires_grad(had);
  return worst;
}

/// grad_check for a map of one tensor argument.
template <class T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, double eps) {
  Tensor<T> probe = x.detach();
  return grad_check_inplace<T>([&] { return f(probe); }, probe, eps);
}

}  // namespace ilens
