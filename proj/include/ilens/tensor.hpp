// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with tape-style reverse-mode autodiff.
//
// Every op that consumes a tensor requiring gradients records a node holding
// its parents and a backward closure. The graph is rebuilt on every forward
// pass and is confined to the thread that built it.
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ilens/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ilens {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local int no_grad_depth = 0;

#if defined(__GLIBC__)
// Tensor buffers are short-lived and often exceed the default mmap threshold;
// keeping them on the heap avoids a page-fault storm on every op.
inline const bool allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif
}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const TensorNode&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() : node_(std::make_shared<Node>()) {}

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node>()) {
    if (ilens::numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = ilens::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }
  static Tensor full(Shape shape, T value) {
    const std::size_t n = ilens::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor scalar(T value) { return Tensor({1}, {value}); }
  static Tensor from_node(std::shared_ptr<Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (!node_->is_leaf) throw ContractError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return node_->is_leaf; }

  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  /// Gradient values; zeros when nothing has accumulated yet.
  std::vector<T> grad() const {
    if (has_grad()) return node_->grad;
    return std::vector<T>(node_->data.size(), T(0));
  }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values as a new leaf with no graph links.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  const std::shared_ptr<Node>& node() const { return node_; }
  const char* op_name() const { return node_->op; }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
/// interior gradients are recomputed each call.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  using Node = TensorNode<T>;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf) n->grad.assign(n->data.size(), T(0));
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

namespace detail {

template <class T>
void check_finite(const char* op, const std::vector<T>& v) {
  // A value is NaN or infinite exactly when its exponent bits are all ones.
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exp_mask = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
  Bits bad = 0;
  for (const T& x : v) bad |= static_cast<Bits>((std::bit_cast<Bits>(x) & exp_mask) == exp_mask);
  if (bad) throw NumericError(std::string("non-finite value produced by ") + op);
}

/// Wraps forward values into a tensor and, when any input needs gradients,
/// records the backward closure.
template <class T, class Fn>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs, Fn&& backward_fn) {
  check_finite(op, values);
  Tensor<T> out(std::move(shape), std::move(values));
  auto& node = *out.node();
  node.op = op;
  node.is_leaf = false;
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor<T>* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  node.requires_grad = true;
  for (const Tensor<T>* in : inputs) node.parents.push_back(in->node());
  node.backward = std::forward<Fn>(backward_fn);
  return out;
}

/// Gradient buffer of a parent, or nullptr when it does not need one.
template <class T>
std::vector<T>* grad_of(const std::shared_ptr<TensorNode<T>>& n) {
  return n->requires_grad ? &n->grad_buffer() : nullptr;
}

}  // namespace detail

}  // namespace ilens
