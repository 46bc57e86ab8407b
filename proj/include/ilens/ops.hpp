// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Broadcasting is limited to "b's shape is a
// suffix of a's shape", which covers biases, positional embeddings and
// per-feature scales.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ilens/tensor.hpp"

namespace ilens {

namespace detail {

/// C[M x N] (+)= op(A) * op(B), row-major. op(A) is M x K, op(B) is K x N.
/// Each output row depends only on the matching row of op(A), so results for
/// a sample do not depend on which other samples share the batch.
/// C[M x N] += A[M x K] * B[K x N], all row-major and non-overlapping.
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A, const T* __restrict B,
             T* __restrict C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* __restrict c = C + i * N;
    const T* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      if (av == T(0)) continue;
      const T* __restrict b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

template <class T>
std::vector<T> transposed(const T* X, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = X[r * cols + c];
  return out;
}

/// C[M x N] (+)= op(A) * op(B), row-major. op(A) is M x K, op(B) is K x N.
/// Each output row depends only on the matching row of op(A), so results for
/// a sample do not depend on which other samples share the batch.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K,
          const T* A, const T* B, T* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  if (M == 0 || N == 0 || K == 0) return;
  std::vector<T> bt;
  if (trans_b) {
    bt = transposed(B, N, K);
    B = bt.data();
  }
  if (!trans_a) {
    gemm_nn(M, N, K, A, B, C);
    return;
  }
  for (std::size_t k = 0; k < K; ++k) {
    const T* a = A + k * M;
    const T* __restrict b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T av = a[i];
      if (av == T(0)) continue;
      T* __restrict c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + " differ");
  }
}

template <class T>
std::size_t last_dim(const char* op, const Tensor<T>& x) {
  if (x.rank() == 0 || x.numel() == 0) throw DimensionError(std::string(op) + ": empty tensor");
  return x.shape().back();
}

/// Elementwise map with derivative expressed in terms of (x, y).
template <class T, class F, class D>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, D dfdx) {
  std::vector<T> y(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xs[i]);
  return make_result<T>(op, x.shape(), std::move(y), {&x}, [dfdx](const TensorNode<T>& out) {
    auto* g = grad_of(out.parents[0]);
    if (!g) return;
    const auto& xv = out.parents[0]->data;
    for (std::size_t i = 0; i < out.data.size(); ++i) (*g)[i] += out.grad[i] * dfdx(xv[i], out.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

/// Matrix product of a [n x k] and b [k x m].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<T> c(n * m);
  detail::gemm(false, false, n, m, k, a.data().data(), b.data().data(), c.data(), false);
  return detail::make_result<T>("matmul", {n, m}, std::move(c), {&a, &b},
                                [n, k, m](const TensorNode<T>& out) {
                                  const auto& A = out.parents[0];
                                  const auto& B = out.parents[1];
                                  if (auto* ga = detail::grad_of(A))
                                    detail::gemm(false, true, n, k, m, out.grad.data(), B->data.data(),
                                                 ga->data(), true);
                                  if (auto* gb = detail::grad_of(B))
                                    detail::gemm(true, false, k, m, n, A->data.data(), out.grad.data(),
                                                 gb->data(), true);
                                });
}

/// Batched product: a [B x n x k] times b [B x k x m], or b [B x m x k] when
/// trans_b is set.
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (trans_b ? b.dim(2) : b.dim(1))) {
    throw DimensionError("bmm: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + (trans_b ? " (b transposed)" : ""));
  }
  const std::size_t batch = a.dim(0), n = a.dim(1), k = a.dim(2);
  const std::size_t m = trans_b ? b.dim(1) : b.dim(2);
  std::vector<T> c(batch * n * m);
  for (std::size_t s = 0; s < batch; ++s) {
    detail::gemm(false, trans_b, n, m, k, a.data().data() + s * n * k, b.data().data() + s * k * m,
                 c.data() + s * n * m, false);
  }
  return detail::make_result<T>(
      "bmm", {batch, n, m}, std::move(c), {&a, &b}, [=](const TensorNode<T>& out) {
        const auto& A = out.parents[0];
        const auto& B = out.parents[1];
        auto* ga = detail::grad_of(A);
        auto* gb = detail::grad_of(B);
        for (std::size_t s = 0; s < batch; ++s) {
          const T* g = out.grad.data() + s * n * m;
          const T* av = A->data.data() + s * n * k;
          const T* bv = B->data.data() + s * k * m;
          if (ga) detail::gemm(false, !trans_b, n, k, m, g, bv, ga->data() + s * n * k, true);
          if (gb) {
            if (trans_b) {
              detail::gemm(true, false, m, k, n, g, av, gb->data() + s * k * m, true);
            } else {
              detail::gemm(true, false, k, m, n, av, g, gb->data() + s * k * m, true);
            }
          }
        }
      });
}

// ---------------------------------------------------------------- arithmetic

/// a + b, with b broadcast over the leading dimensions of a.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(b.shape(), a.shape())) {
    if (detail::is_suffix(a.shape(), b.shape())) return add(b, a);
    throw DimensionError("add: cannot broadcast " + to_string(b.shape()) + " onto " +
                         to_string(a.shape()));
  }
  const std::size_t inner = b.numel(), outer = a.numel() / inner;
  std::vector<T> y(a.numel());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < inner; ++j) y[o * inner + j] = av[o * inner + j] + bv[j];
  return detail::make_result<T>("add", a.shape(), std::move(y), {&a, &b},
                                [inner, outer](const TensorNode<T>& out) {
                                  if (auto* ga = detail::grad_of(out.parents[0]))
                                    for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[i] += out.grad[i];
                                  if (auto* gb = detail::grad_of(out.parents[1]))
                                    for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t j = 0; j < inner; ++j)
                                        (*gb)[j] += out.grad[o * inner + j];
                                });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  return detail::make_result<T>("sub", a.shape(), std::move(y), {&a, &b}, [](const TensorNode<T>& out) {
    if (auto* ga = detail::grad_of(out.parents[0]))
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[i] += out.grad[i];
    if (auto* gb = detail::grad_of(out.parents[1]))
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*gb)[i] -= out.grad[i];
  });
}

/// a * b elementwise, with b broadcast over the leading dimensions of a.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(b.shape(), a.shape())) {
    if (detail::is_suffix(a.shape(), b.shape())) return mul(b, a);
    throw DimensionError("mul: cannot broadcast " + to_string(b.shape()) + " onto " +
                         to_string(a.shape()));
  }
  const std::size_t inner = b.numel(), outer = a.numel() / inner;
  std::vector<T> y(a.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < inner; ++j) y[o * inner + j] = a[o * inner + j] * b[j];
  return detail::make_result<T>("mul", a.shape(), std::move(y), {&a, &b},
                                [inner, outer](const TensorNode<T>& out) {
                                  const auto& av = out.parents[0]->data;
                                  const auto& bv = out.parents[1]->data;
                                  if (auto* ga = detail::grad_of(out.parents[0]))
                                    for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t j = 0; j < inner; ++j)
                                        (*ga)[o * inner + j] += out.grad[o * inner + j] * bv[j];
                                  if (auto* gb = detail::grad_of(out.parents[1]))
                                    for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t j = 0; j < inner; ++j)
                                        (*gb)[j] += out.grad[o * inner + j] * av[o * inner + j];
                                });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * s;
  return detail::make_result<T>("scale", a.shape(), std::move(y), {&a}, [s](const TensorNode<T>& out) {
    if (auto* ga = detail::grad_of(out.parents[0]))
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[i] += out.grad[i] * s;
  });
}

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  return detail::make_result<T>("sum", {1}, {s}, {&x}, [](const TensorNode<T>& out) {
    if (auto* g = detail::grad_of(out.parents[0]))
      for (auto& v : *g) v += out.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  T s = T(0);
  for (T v : x.data()) s += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  return detail::make_result<T>("mean", {1}, {s * inv}, {&x}, [inv](const TensorNode<T>& out) {
    if (auto* g = detail::grad_of(out.parents[0]))
      for (auto& v : *g) v += out.grad[0] * inv;
  });
}

/// Mean absolute difference over all elements.
template <class T>
Tensor<T> l1(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same_shape("l1", pred, target);
  if (pred.numel() == 0) throw DimensionError("l1: empty tensor");
  T s = T(0);
  for (std::size_t i = 0; i < pred.numel(); ++i) s += std::abs(pred[i] - target[i]);
  const T inv = T(1) / static_cast<T>(pred.numel());
  return detail::make_result<T>("l1", {1}, {s * inv}, {&pred, &target}, [inv](const TensorNode<T>& out) {
    const auto& p = out.parents[0]->data;
    const auto& t = out.parents[1]->data;
    auto* gp = detail::grad_of(out.parents[0]);
    auto* gt = detail::grad_of(out.parents[1]);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T d = p[i] - t[i];
      const T sgn = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
      if (gp) (*gp)[i] += out.grad[0] * inv * sgn;
      if (gt) (*gt)[i] -= out.grad[0] * inv * sgn;
    }
  });
}

/// Mean cross-entropy of integer labels under softmax(logits), logits [n x C].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [n x C], got " + to_string(logits.shape()));
  const std::size_t n = logits.dim(0), C = logits.dim(1);
  if (C < 2) throw ArgumentError("cross_entropy: need at least 2 classes");
  if (labels.size() != n) throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  std::vector<T> prob(n * C);
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C) {
      throw ArgumentError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(C) + ")");
    }
    const T* row = logits.data().data() + i * C;
    const T mx = *std::max_element(row, row + C);
    T z = T(0);
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < C; ++c) prob[i * C + c] = std::exp(row[c] - mx) / z;
    total += std::log(z) + mx - row[labels[i]];
  }
  const T inv = T(1) / static_cast<T>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result<T>(
      "cross_entropy", {1}, {total * inv}, {&logits},
      [prob = std::move(prob), lab = std::move(lab), n, C, inv](const TensorNode<T>& out) {
        auto* g = detail::grad_of(out.parents[0]);
        if (!g) return;
        const T s = out.grad[0] * inv;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < C; ++c)
            (*g)[i * C + c] += s * (prob[i * C + c] - (static_cast<int>(c) == lab[i] ? T(1) : T(0)));
      });
}

// ---------------------------------------------------------------- last-dim normalizers

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::size_t d = detail::last_dim("softmax_lastdim", x), rows = x.numel() / d;
  std::vector<T> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * d;
    T* o = y.data() + r * d;
    const T mx = *std::max_element(in, in + d);
    T z = T(0);
    for (std::size_t j = 0; j < d; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < d; ++j) o[j] /= z;
  }
  return detail::make_result<T>("softmax_lastdim", x.shape(), std::move(y), {&x},
                                [d, rows](const TensorNode<T>& out) {
                                  auto* g = detail::grad_of(out.parents[0]);
                                  if (!g) return;
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* yv = out.data.data() + r * d;
                                    const T* gy = out.grad.data() + r * d;
                                    T dot = T(0);
                                    for (std::size_t j = 0; j < d; ++j) dot += gy[j] * yv[j];
                                    for (std::size_t j = 0; j < d; ++j) (*g)[r * d + j] += yv[j] * (gy[j] - dot);
                                  }
                                });
}

/// (x - mean) / sqrt(var + eps) over the last dimension; no affine part.
template <class T>
Tensor<T> layernorm_lastdim(const Tensor<T>& x, T eps = T(1e-5)) {
  const std::size_t d = detail::last_dim("layernorm_lastdim", x), rows = x.numel() / d;
  std::vector<T> y(x.numel());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = (in[j] - mu) * inv_std[r];
  }
  return detail::make_result<T>(
      "layernorm_lastdim", x.shape(), std::move(y), {&x},
      [d, rows, inv_std = std::move(inv_std)](const TensorNode<T>& out) {
        auto* g = detail::grad_of(out.parents[0]);
        if (!g) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* yv = out.data.data() + r * d;
          const T* gy = out.grad.data() + r * d;
          T mg = T(0), mgy = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            mg += gy[j];
            mgy += gy[j] * yv[j];
          }
          mg /= static_cast<T>(d);
          mgy /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) (*g)[r * d + j] += inv_std[r] * (gy[j] - mg - yv[j] * mgy);
        }
      });
}

// ---------------------------------------------------------------- layout

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " to " + to_string(shape));
  }
  std::vector<T> y(x.data().begin(), x.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(y), {&x}, [](const TensorNode<T>& out) {
    if (auto* g = detail::grad_of(out.parents[0]))
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*g)[i] += out.grad[i];
  });
}

/// [A, B, C, D] -> [A, C, B, D]. Splits or merges attention heads.
template <class T>
Tensor<T> swap_axes_12(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("swap_axes_12: need rank 4, got " + to_string(x.shape()));
  const std::size_t A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
  std::vector<T> y(x.numel());
  const auto xs = x.data();
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        std::copy_n(xs.data() + ((a * B + b) * C + c) * D, D, y.data() + ((a * C + c) * B + b) * D);
  return detail::make_result<T>("swap_axes_12", {A, C, B, D}, std::move(y), {&x},
                                [A, B, C, D](const TensorNode<T>& out) {
                                  auto* g = detail::grad_of(out.parents[0]);
                                  if (!g) return;
                                  for (std::size_t a = 0; a < A; ++a)
                                    for (std::size_t b = 0; b < B; ++b)
                                      for (std::size_t c = 0; c < C; ++c) {
                                        const T* src = out.grad.data() + ((a * C + c) * B + b) * D;
                                        T* dst = g->data() + ((a * B + b) * C + c) * D;
                                        for (std::size_t e = 0; e < D; ++e) dst[e] += src[e];
                                      }
                                });
}

namespace detail {
// Index of pixel (c, y, x) inside patch-row layout [P, C*p*p].
struct PatchLayout {
  std::size_t C, H, W, p;
  std::size_t grid_w() const { return W / p; }
  std::size_t patches() const { return (H / p) * (W / p); }
  std::size_t patch_dim() const { return C * p * p; }
  template <class F>
  void for_each(F&& f) const {  // f(image_offset, patch_offset)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t patch = (y / p) * grid_w() + x / p;
          const std::size_t within = (c * p + y % p) * p + x % p;
          f((c * H + y) * W + x, patch * patch_dim() + within);
        }
  }
};
}  // namespace detail

/// [B, C, H, W] -> [B, P, C*p*p] with patches in row-major grid order.
template <class T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t p) {
  if (x.rank() != 4) throw DimensionError("patchify: need [B,C,H,W], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0);
  const detail::PatchLayout L{x.dim(1), x.dim(2), x.dim(3), p};
  if (p == 0 || L.H % p || L.W % p) throw DimensionError("patchify: image not divisible by patch size");
  const std::size_t per = L.C * L.H * L.W;
  std::vector<T> y(x.numel());
  const auto xs = x.data();
  for (std::size_t b = 0; b < B; ++b)
    L.for_each([&](std::size_t img, std::size_t pat) { y[b * per + pat] = xs[b * per + img]; });
  return detail::make_result<T>("patchify", {B, L.patches(), L.patch_dim()}, std::move(y), {&x},
                                [L, B, per](const TensorNode<T>& out) {
                                  auto* g = detail::grad_of(out.parents[0]);
                                  if (!g) return;
                                  for (std::size_t b = 0; b < B; ++b)
                                    L.for_each([&](std::size_t img, std::size_t pat) {
                                      (*g)[b * per + img] += out.grad[b * per + pat];
                                    });
                                });
}

/// Inverse of patchify: [B, P, C*p*p] -> [B, C, H, W].
template <class T>
Tensor<T> unpatchify(const Tensor<T>& x, std::size_t C, std::size_t H, std::size_t W, std::size_t p) {
  const detail::PatchLayout L{C, H, W, p};
  if (x.rank() != 3 || x.dim(1) != L.patches() || x.dim(2) != L.patch_dim()) {
    throw DimensionError("unpatchify: shape " + to_string(x.shape()) + " does not match image " +
                         to_string({C, H, W}) + " with patch " + std::to_string(p));
  }
  const std::size_t B = x.dim(0), per = C * H * W;
  std::vector<T> y(x.numel());
  const auto xs = x.data();
  for (std::size_t b = 0; b < B; ++b)
    L.for_each([&](std::size_t img, std::size_t pat) { y[b * per + img] = xs[b * per + pat]; });
  return detail::make_result<T>("unpatchify", {B, C, H, W}, std::move(y), {&x},
                                [L, B, per](const TensorNode<T>& out) {
                                  auto* g = detail::grad_of(out.parents[0]);
                                  if (!g) return;
                                  for (std::size_t b = 0; b < B; ++b)
                                    L.for_each([&](std::size_t img, std::size_t pat) {
                                      (*g)[b * per + pat] += out.grad[b * per + img];
                                    });
                                });
}

/// [B, T, D] with token [D] -> [B, T+1, D], the token placed first.
template <class T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token) {
  if (x.rank() != 3 || token.numel() != x.dim(2)) {
    throw DimensionError("prepend_token: " + to_string(x.shape()) + " with token " + to_string(token.shape()));
  }
  const std::size_t B = x.dim(0), Tn = x.dim(1), D = x.dim(2);
  std::vector<T> y(B * (Tn + 1) * D);
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(token.data().data(), D, y.data() + b * (Tn + 1) * D);
    std::copy_n(x.data().data() + b * Tn * D, Tn * D, y.data() + b * (Tn + 1) * D + D);
  }
  return detail::make_result<T>("prepend_token", {B, Tn + 1, D}, std::move(y), {&x, &token},
                                [B, Tn, D](const TensorNode<T>& out) {
                                  auto* gx = detail::grad_of(out.parents[0]);
                                  auto* gt = detail::grad_of(out.parents[1]);
                                  for (std::size_t b = 0; b < B; ++b) {
                                    const T* src = out.grad.data() + b * (Tn + 1) * D;
                                    if (gt)
                                      for (std::size_t e = 0; e < D; ++e) (*gt)[e] += src[e];
                                    if (gx)
                                      for (std::size_t e = 0; e < Tn * D; ++e) (*gx)[b * Tn * D + e] += src[D + e];
                                  }
                                });
}

/// Tokens [first, first+count) of [B, T, D].
template <class T>
Tensor<T> slice_tokens(const Tensor<T>& x, std::size_t first, std::size_t count) {
  if (x.rank() != 3 || first + count > x.dim(1) || count == 0) {
    throw DimensionError("slice_tokens: range [" + std::to_string(first) + ", " + std::to_string(first + count) +
                         ") of " + to_string(x.shape()));
  }
  const std::size_t B = x.dim(0), Tn = x.dim(1), D = x.dim(2);
  std::vector<T> y(B * count * D);
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(x.data().data() + (b * Tn + first) * D, count * D, y.data() + b * count * D);
  return detail::make_result<T>("slice_tokens", {B, count, D}, std::move(y), {&x},
                                [B, Tn, D, first, count](const TensorNode<T>& out) {
                                  auto* g = detail::grad_of(out.parents[0]);
                                  if (!g) return;
                                  for (std::size_t b = 0; b < B; ++b)
                                    for (std::size_t e = 0; e < count * D; ++e)
                                      (*g)[(b * Tn + first) * D + e] += out.grad[b * count * D + e];
                                });
}

/// [B, T, D] -> [B, D], averaging over tokens.
template <class T>
Tensor<T> mean_tokens(const Tensor<T>& x) {
  if (x.rank() != 3) throw DimensionError("mean_tokens: need [B,T,D], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), Tn = x.dim(1), D = x.dim(2);
  const T inv = T(1) / static_cast<T>(Tn);
  std::vector<T> y(B * D, T(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < Tn; ++t)
      for (std::size_t e = 0; e < D; ++e) y[b * D + e] += x[(b * Tn + t) * D + e] * inv;
  return detail::make_result<T>("mean_tokens", {B, D}, std::move(y), {&x}, [B, Tn, D, inv](const TensorNode<T>& out) {
    auto* g = detail::grad_of(out.parents[0]);
    if (!g) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < Tn; ++t)
        for (std::size_t e = 0; e < D; ++e) (*g)[(b * Tn + t) * D + e] += out.grad[b * D + e] * inv;
  });
}

/// x [.., in] @ w [in x out] + bias [out]; leading dims are flattened.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  const std::size_t in = detail::last_dim("linear", x);
  Shape out_shape = x.shape();
  out_shape.back() = w.rank() == 2 ? w.dim(1) : 0;
  const Tensor<T> flat = x.rank() == 2 ? x : reshape(x, {x.numel() / in, in});
  Tensor<T> y = add(matmul(flat, w), bias);
  return x.rank() == 2 ? y : reshape(y, out_shape);
}

}  // namespace ilens
