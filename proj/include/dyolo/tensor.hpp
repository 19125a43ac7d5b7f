#pragma once

// Minimal reverse-mode automatic differentiation over dense NCHW tensors.
//
// Every tensor is four dimensional; scalars are 1x1x1x1. A Tensor is a
// shared handle to a Node. Operations executed while grad mode is enabled
// record their inputs and a backward closure on the result node, forming a
// tape that Tensor::backward() replays in reverse topological order.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dyolo/errors.hpp"

namespace dyolo {

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  constexpr std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  constexpr std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }

// Disables tape recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) { return full(shape, T(0)); }

  static Tensor full(Shape shape, T v) {
    check_shape(shape);
    auto node = std::make_shared<Node<T>>();
    node->shape = shape;
    node->value.assign(shape.numel(), v);
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    check_shape(shape);
    if (values.size() != shape.numel()) {
      detail::raise<InvalidArgument>("Tensor::from", "value count " +
                                                         std::to_string(values.size()) +
                                                         " does not match shape " + shape.str());
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = shape;
    node->value = std::move(values);
    return Tensor(std::move(node));
  }

  static Tensor scalar(T v) { return full(Shape{}, v); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  const T* ptr() const { return node_->value.data(); }

  T item() const {
    if (numel() != 1) detail::raise<InvalidArgument>("Tensor::item", "tensor is " + shape().str());
    return node_->value[0];
  }

  T at(int n, int c, int h, int w) const {
    const Shape& s = shape();
    return node_->value[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  // Empty span when no gradient has reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // New leaf sharing no history with this tensor.
  Tensor detach() const { return from(shape(), node_->value); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& handle() const { return node_; }

  // Seeds d(self)/d(self) = 1 and propagates through the recorded tape.
  void backward() const {
    if (numel() != 1) {
      detail::raise<InvalidArgument>("Tensor::backward", "only scalar roots are supported");
    }
    if (!node_->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [cur, next] = stack.back();
      if (next < cur->inputs.size()) {
        Node<T>* child = cur->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(cur);
        stack.pop_back();
      }
    }

    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

 private:
  static void check_shape(const Shape& s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
      detail::raise<InvalidArgument>("Tensor", "non-positive dimension in " + s.str());
    }
  }

  std::shared_ptr<Node<T>> node_;
};

// Allocates the output node of an operation. When grad mode is on and any
// input requires a gradient, the inputs and backward closure are attached.
// The closure receives the output node; its grad is guaranteed allocated.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(value);
  if (grad_mode_enabled()) {
    bool any = false;
    for (const Tensor<T>* in : inputs) any = any || (in->defined() && in->requires_grad());
    if (any) {
      node->requires_grad = true;
      for (const Tensor<T>* in : inputs) {
        if (in->defined()) node->inputs.push_back(in->handle());
      }
      node->backward = std::move(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

// Accumulation target for an input's gradient, or nullptr if it needs none.
template <typename T>
T* grad_target(const std::shared_ptr<Node<T>>& in) {
  if (!in || !in->requires_grad) return nullptr;
  return in->grad_buffer().data();
}

}  // namespace dyolo
