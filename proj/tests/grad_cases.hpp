// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient checks over every differentiable op and both
// model families at 64-bit. Shared by the unit and acceptance suites.
#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ilens/grad_check.hpp"
#include "ilens/ops.hpp"
#include "ilens/rng.hpp"
#include "ilens/zoo.hpp"

namespace grad_cases {

using namespace ilens;
using Td = Tensor<double>;
using Errors = std::vector<std::pair<std::string, double>>;

inline Td random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Td(std::move(shape), std::move(v));
}

// Values bounded away from zero so kinks (relu, l1) stay out of the stencil.
inline Td away_from_zero(Shape shape, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return Td(std::move(shape), std::move(v));
}

// Random weighting turns any tensor into a scalar with a non-trivial gradient.
inline Td weighted_sum(const Td& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

/// Max relative error per op against central differences.
inline Errors op_errors(std::uint64_t seed = 10, double eps = 1e-6) {
  Rng rng(seed);
  using F = std::function<Td(const Td&)>;
  const Td other34 = random_tensor({3, 4}, rng), row4 = random_tensor({4}, rng);
  const Td w45 = random_tensor({4, 5}, rng), bias5 = random_tensor({5}, rng);
  const Td bmm_a = random_tensor({2, 3, 4}, rng), bmm_b = random_tensor({2, 4, 3}, rng);
  const Td bmm_bt = random_tensor({2, 3, 4}, rng);
  const Td token = random_tensor({4}, rng);
  const std::vector<int> labels{1, 3, 0};

  const std::vector<std::pair<const char*, std::pair<F, Shape>>> cases = {
      {"matmul_lhs", {[&](const Td& x) { return weighted_sum(matmul(x, w45), 1); }, {3, 4}}},
      {"matmul_rhs", {[&](const Td& x) { return weighted_sum(matmul(other34, x), 2); }, {4, 5}}},
      {"bmm", {[&](const Td& x) { return weighted_sum(bmm(x, bmm_b), 3); }, {2, 3, 4}}},
      {"bmm_rhs", {[&](const Td& x) { return weighted_sum(bmm(bmm_a, x), 4); }, {2, 4, 3}}},
      {"bmm_trans", {[&](const Td& x) { return weighted_sum(bmm(x, bmm_bt, true), 5); }, {2, 3, 4}}},
      {"bmm_trans_rhs", {[&](const Td& x) { return weighted_sum(bmm(bmm_bt, x, true), 6); }, {2, 3, 4}}},
      {"add", {[&](const Td& x) { return weighted_sum(add(x, other34), 7); }, {3, 4}}},
      {"add_broadcast", {[&](const Td& x) { return weighted_sum(add(other34, x), 8); }, {4}}},
      {"sub", {[&](const Td& x) { return weighted_sum(sub(other34, x), 9); }, {3, 4}}},
      {"mul", {[&](const Td& x) { return weighted_sum(mul(x, row4), 10); }, {3, 4}}},
      {"mul_broadcast", {[&](const Td& x) { return weighted_sum(mul(other34, x), 11); }, {4}}},
      {"scale", {[&](const Td& x) { return weighted_sum(scale(x, -1.7), 12); }, {3, 4}}},
      {"gelu", {[&](const Td& x) { return weighted_sum(gelu(x), 13); }, {3, 4}}},
      {"sigmoid", {[&](const Td& x) { return weighted_sum(sigmoid(x), 14); }, {3, 4}}},
      {"square", {[&](const Td& x) { return weighted_sum(square(x), 15); }, {3, 4}}},
      {"mean", {[&](const Td& x) { return mean(square(x)); }, {3, 4}}},
      {"softmax", {[&](const Td& x) { return weighted_sum(softmax_lastdim(x), 16); }, {3, 4}}},
      {"layernorm", {[&](const Td& x) { return weighted_sum(layernorm_lastdim(x), 17); }, {3, 4}}},
      {"cross_entropy", {[&](const Td& x) { return cross_entropy(x, labels); }, {3, 4}}},
      {"reshape", {[&](const Td& x) { return weighted_sum(reshape(x, {2, 6}), 18); }, {3, 4}}},
      {"swap_axes_12", {[&](const Td& x) { return weighted_sum(swap_axes_12(x), 19); }, {2, 3, 2, 2}}},
      {"patchify", {[&](const Td& x) { return weighted_sum(patchify(x, 2), 20); }, {2, 2, 4, 4}}},
      {"unpatchify", {[&](const Td& x) { return weighted_sum(unpatchify(x, 2, 4, 4, 2), 21); }, {2, 4, 8}}},
      {"prepend_token", {[&](const Td& x) { return weighted_sum(prepend_token(x, token), 22); }, {2, 3, 4}}},
      {"prepend_token_tok",
       {[&](const Td& x) { return weighted_sum(prepend_token(reshape(other34, {1, 3, 4}), x), 23); }, {4}}},
      {"slice_tokens", {[&](const Td& x) { return weighted_sum(slice_tokens(x, 1, 2), 24); }, {2, 4, 3}}},
      {"mean_tokens", {[&](const Td& x) { return weighted_sum(mean_tokens(x), 25); }, {2, 4, 3}}},
      {"linear", {[&](const Td& x) { return weighted_sum(linear(x, w45, bias5), 26); }, {2, 3, 4}}},
      {"sum", {[&](const Td& x) { return sum(mul(x, x)); }, {3, 4}}},
  };
  Errors out;
  for (const auto& [name, c] : cases) out.emplace_back(name, grad_check<double>(c.first, random_tensor(c.second, rng), eps));
  // Ops with kinks, evaluated away from the kink.
  out.emplace_back("relu", grad_check<double>([](const Td& x) { return weighted_sum(relu(x), 27); },
                                              away_from_zero({3, 4}, rng), eps));
  out.emplace_back("l1_lhs", grad_check<double>([&](const Td& x) { return l1(x, Td::zeros({3, 4})); },
                                                away_from_zero({3, 4}, rng), eps));
  out.emplace_back("l1_rhs", grad_check<double>([&](const Td& x) { return l1(Td::zeros({3, 4}), x); },
                                                away_from_zero({3, 4}, rng), eps));
  return out;
}

inline Td random_images(std::size_t n, const ImageShape& s, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n * s.numel());
  for (auto& x : v) x = rng.uniform();
  return Td({n, s.channels, s.height, s.width}, std::move(v));
}

/// Errors w.r.t. every parameter and the input, for both model families and
/// the reconstruction head.
inline Errors model_errors(double eps = 1e-6) {
  Errors out;
  for (ModelKind kind : {ModelKind::mlp, ModelKind::tiny_vit}) {
    const std::string family = kind == ModelKind::mlp ? "mlp" : "tiny_vit";
    ModelConfig c;
    c.kind = kind;
    c.input = {1, 8, 8};
    c.mlp_widths = {6, 5};
    c.vit = {4, 8, 2, 2, 2.0};
    c.num_classes = 3;
    auto m = build_model<double>(c, Rng(11));
    const auto x = random_images(3, c.input, 12);
    const std::vector<int> labels{0, 2, 1};
    const auto loss = [&] { return cross_entropy(m.forward(x), labels); };
    for (auto& p : m.params()) out.emplace_back(family + "/" + p.name, grad_check_inplace<double>(loss, p.value, eps));
    Td probe = x.detach();
    out.emplace_back(family + "/input",
                     grad_check_inplace<double>([&] { return sum(square(m.representation(probe, 1))); }, probe, eps));
  }
  ModelConfig r;
  r.input = {1, 8, 8};
  r.vit = {4, 8, 2, 2, 2.0};
  r.head = HeadKind::reconstruction;
  auto m = build_model<double>(r, Rng(13));
  const auto x = random_images(2, r.input, 14);
  const auto target = random_images(2, r.input, 15);
  for (auto& p : m.params()) {
    out.emplace_back("reconstruction/" + p.name,
                     grad_check_inplace<double>([&] { return sum(square(sub(m.forward(x), target))); }, p.value, eps));
  }
  return out;
}

}  // namespace grad_cases
