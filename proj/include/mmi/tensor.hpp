#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mmi/errors.hpp"
#include "mmi/rng.hpp"

namespace mmi {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Thread-local switch for graph recording. Forward passes under a
/// NoGradGuard build no backward closures.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Row-major dense array with an optional reverse-mode gradient.
///
/// Tensor is a shared handle: copies alias the same storage and graph node,
/// the way parameters are referenced from several places at once. Use
/// clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor from(Shape shape, std::vector<T> values);
  static Tensor scalar(T value) { return from({1}, {value}); }
  static Tensor randn(Shape shape, Philox& rng, double sigma = 1.0);
  static Tensor uniform(Shape shape, Philox& rng, double lo, double hi);

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  /// Extent of axis `axis`; negative values count from the back.
  [[nodiscard]] std::int64_t dim(std::int64_t axis) const;
  [[nodiscard]] std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  [[nodiscard]] std::span<const T> data() const { return node_->value; }
  /// Mutable access to values. Only meaningful on leaves: mutating an
  /// interior node does not re-run the graph.
  [[nodiscard]] std::span<T> data_mut() { return node_->value; }
  [[nodiscard]] T item() const;
  [[nodiscard]] T operator[](std::int64_t i) const { return node_->value[static_cast<std::size_t>(i)]; }

  [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient values; zeros if nothing has been accumulated yet.
  [[nodiscard]] std::vector<T> grad() const;
  [[nodiscard]] std::span<T> grad_mut() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  /// Reverse-mode sweep from this scalar. Gradients accumulate additively
  /// into every reachable tensor that requires grad.
  void backward() const;

  /// Same values, no history, requires_grad off.
  [[nodiscard]] Tensor detach() const;
  [[nodiscard]] Tensor clone() const { return detach(); }
  template <typename U>
  [[nodiscard]] Tensor<U> cast() const;

  [[nodiscard]] const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds the output node of a differentiable primitive. Records parents and
/// the backward closure only when grad mode is on and some parent requires
/// grad. Throws NumericError if any output value is non-finite.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> parents, std::function<void(detail::Node<T>&)> backward_fn);

/// Accumulation target of parent `i` inside a backward closure, or nullptr if
/// that parent does not take gradients.
template <typename T>
inline T* parent_grad(detail::Node<T>& self, std::size_t i) {
  auto& parent = *self.parents[i];
  if (!parent.requires_grad) return nullptr;
  return parent.ensure_grad().data();
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace mmi
