#include "cilmp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "cilmp/errors.hpp"

namespace cilmp {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

std::shared_ptr<detail::Node> make_leaf(const Shape& shape, std::vector<double> values) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->value = std::move(values);
  return node;
}

const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw Error("use of an undefined tensor");
  return *node;
}

}  // namespace

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }
Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  return Tensor(make_leaf(shape, std::vector<double>(shape_numel(shape), value)));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
  return Tensor(make_leaf(shape, std::move(values)));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::parameter(const Shape& shape, std::vector<double> values) {
  Tensor t = from(shape, std::move(values));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return checked(node_).shape; }
std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::size_t Tensor::rows() const {
  const Shape& s = shape();
  return s.size() <= 1 ? 1 : s[0];
}

std::size_t Tensor::cols() const { return numel() / rows(); }

std::span<const double> Tensor::values() const { return checked(node_).value; }

std::span<double> Tensor::mutable_values() {
  checked(node_);
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool on) {
  checked(node_);
  if (on && node_->frozen) throw FrozenParameterError("cannot enable gradients on a frozen parameter");
  node_->requires_grad = on;
}

bool Tensor::frozen() const { return checked(node_).frozen; }

void Tensor::freeze() {
  checked(node_);
  node_->frozen = true;
  node_->requires_grad = false;
  node_->grad.clear();
}

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(node_).grad; }

std::span<double> Tensor::mutable_grad() {
  checked(node_);
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  checked(node_);
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone() const { return from(shape(), std::vector<double>(values().begin(), values().end())); }

Tape::Tape(const Tensor& root) : root_(root.node()) {
  if (!root_) throw Error("tape root is undefined");
  if (!root_->requires_grad) return;
  // Iterative post-order DFS restricted to nodes that require grad.
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root_.get(), 0);
  seen.insert(root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order_.push_back(node);
    stack.pop_back();
  }
}

void Tape::backward() {
  if (order_.empty()) return;
  if (root_->value.size() != 1) {
    throw DimensionError("backward() needs a scalar root, got " + shape_to_string(root_->shape));
  }
  root_->ensure_grad();
  root_->grad[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

void backward(const Tensor& loss) { Tape(loss).backward(); }

}  // namespace cilmp
