#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dasvit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

// One record of the define-by-run graph. Leaves have no parents and no
// backward function; `grad` is empty until a gradient reaches the node.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  bool is_leaf() const { return parents.empty(); }
  // Adds `g` into `grad`, allocating it on first use.
  void accumulate(std::span<const double> g);
};

}  // namespace detail

// Dense row-major float64 array with optional reverse-mode gradient. Copies
// share storage; use clone() for an independent leaf.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value) { return Tensor(Shape{1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  // Negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // Mutable access is meant for leaves (initialisation, optimiser updates).
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double operator[](std::size_t flat) const { return node_->data[flat]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Reverse pass from a scalar. Leaf gradients accumulate across calls.
  void backward() const;

  // Same values, cut from the graph.
  Tensor detach() const;
  // Deep copy as a fresh leaf with the same requires_grad flag.
  Tensor clone() const;

  const std::string& op() const { return node_->op; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Nodes reachable from `root` that take part in the backward pass, in
// topological order (inputs before consumers).
std::vector<detail::Node*> topological_order(const Tensor& root);

// While alive, newly created op results are not recorded for backward.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Worker threads for element-wise and matmul kernels. Results do not depend
// on the count.
void set_num_threads(int n);
int num_threads();

}  // namespace dasvit
