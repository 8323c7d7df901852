#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace levit {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into the parents' grads.
  std::function<void(Node& self)> backward;

  std::vector<float>& grad_buffer();
};

}  // namespace detail

/// Dense row-major float tensor with reverse-mode autodiff.
///
/// A Tensor is a shared handle: copies alias the same storage. Values produced
/// by ops are never modified afterwards; only leaf parameters and buffers are
/// written in place (by the optimizer and by batch-norm running statistics).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor parameter(Shape shape, std::vector<float> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  /// Negative indices count from the back.
  int dim(int axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  float item() const;
  float at(std::initializer_list<int> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  /// Gradient after backward(); empty span when nothing flowed here.
  std::span<const float> grad() const;
  void zero_grad();

  /// Seeds d(this)/d(this) = 1 and propagates to every reachable leaf.
  void backward() const;

  /// Same values, cut from the graph.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_op_result(Shape, std::vector<float>, std::span<const Tensor>,
                               std::function<void(detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Wraps freshly computed op output. The backward closure is attached only
/// when recording is on and some input requires grad.
Tensor make_op_result(Shape shape, std::vector<float> data, std::span<const Tensor> inputs,
                      std::function<void(detail::Node&)> backward);

inline Tensor make_op_result(Shape shape, std::vector<float> data, std::initializer_list<Tensor> inputs,
                             std::function<void(detail::Node&)> backward) {
  return make_op_result(std::move(shape), std::move(data),
                        std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(backward));
}

}  // namespace levit
