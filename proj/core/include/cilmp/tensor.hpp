#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cilmp {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

// One recorded value in the define-by-run graph. Leaves have no inputs.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool frozen = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major array of doubles participating in reverse-mode AD.
//
// Tensors are cheap handles: copies share the same storage and graph node.
// Use clone() for a detached deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double value);
  // Leaf with requires_grad set.
  static Tensor parameter(const Shape& shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  // 2-D view used by row-wise ops: rank-1 tensors are a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  // Direct mutation of leaf storage (optimizer updates, initialisation).
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t i) const { return values()[i]; }
  double at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool frozen() const;
  // Marks a leaf as frozen: it stops requiring grad and refuses to re-enable it.
  void freeze();

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  Tensor clone() const;  // detached leaf copy (requires_grad = false)
  Tensor detach() const { return clone(); }

  // Internal access for op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Topologically ordered record of every node reachable from a root that
// takes part in differentiation. Rebuilt for every forward pass.
class Tape {
 public:
  explicit Tape(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  // Seeds d(root)/d(root) = 1 and visits every node exactly once in reverse order.
  void backward();

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;  // inputs precede consumers
};

// Convenience: Tape(loss).backward().
void backward(const Tensor& loss);

}  // namespace cilmp
