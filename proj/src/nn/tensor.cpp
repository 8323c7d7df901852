#include "levit_unet/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "levit_unet/errors.hpp"

namespace levit {
namespace {

thread_local bool t_grad_enabled = true;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ConfigError("negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<float>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

Tensor::Tensor(Shape shape, float fill) : node_(std::make_shared<detail::Node>()) {
  const std::size_t n = shape_numel(shape);
  node_->shape = std::move(shape);
  node_->data.assign(n, fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : node_(std::make_shared<detail::Node>()) {
  if (shape_numel(shape) != values.size()) {
    throw ConfigError("tensor shape " + shape_str(shape) + " does not match " +
                      std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

Tensor Tensor::parameter(Shape shape, std::vector<float> values) {
  Tensor t(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

int Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ConfigError("axis out of range for shape " + shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(axis)];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const float> Tensor::data() const { return node_->data; }

std::span<float> Tensor::mutable_data() { return node_->data; }

float Tensor::item() const {
  if (numel() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

float Tensor::at(std::initializer_list<int> index) const {
  if (index.size() != shape().size()) throw ConfigError("index rank mismatch");
  std::size_t off = 0;
  std::size_t axis = 0;
  for (int i : index) {
    const int d = node_->shape[axis++];
    if (i < 0 || i >= d) throw ConfigError("index out of range");
    off = off * static_cast<std::size_t>(d) + static_cast<std::size_t>(i);
  }
  return node_->data[off];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const float> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() const {
  if (numel() != 1) throw ConfigError("backward() requires a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; reverse gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    n->backward(*n);
    // Intermediate gradients are not needed once propagated.
    std::vector<float>().swap(n->grad);
  }
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor make_op_result(Shape shape, std::vector<float> data, std::span<const Tensor> inputs,
                      std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (t_grad_enabled) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Tensor& t : inputs) {
        if (t.requires_grad()) node->parents.push_back(t.node());
      }
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

}  // namespace levit
