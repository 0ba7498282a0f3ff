#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vloc/errors.hpp"
#include "vloc/random.hpp"

namespace vloc {

class Tensor;

namespace detail {

struct Node {
  std::vector<std::int64_t> shape;
  std::vector<double> values;
  std::vector<double> grad; // empty until a backward pass touches the node
  bool requires_grad = false;
  std::vector<Tensor> parents;
  std::function<void(Node&)> backward_fn; // null for leaves/constants

  bool is_leaf() const { return !backward_fn; }
  // Lazily allocated, zero-initialized gradient buffer.
  std::vector<double>& grad_ref() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

} // namespace detail

inline std::int64_t numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// Value-semantic handle to a node of the differentiation graph. Copies share
// storage; a fresh graph is built per forward pass and freed when the last
// handle goes out of scope.
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::int64_t> shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }
  static Tensor filled(std::vector<std::int64_t> shape, double v, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node>();
    n->values.assign(static_cast<std::size_t>(numel(shape)), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor from_values(std::vector<std::int64_t> shape, std::vector<double> values,
                            bool requires_grad = false) {
    if (numel(shape) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("Tensor::from_values: shape does not match value count");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return from_values({}, {v}, requires_grad);
  }
  static Tensor randn(std::vector<std::int64_t> shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->values) v = rng.normal(0.0, stddev);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::int64_t>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->values.size()); }

  const std::vector<double>& values() const { return node_->values; }
  double at(std::int64_t i) const { return node_->values[static_cast<std::size_t>(i)]; }
  double value() const {
    if (size() != 1) throw ShapeError("Tensor::value: tensor is not scalar");
    return node_->values[0];
  }
  // In-place access for leaves (parameter updates, data fills). Mutating a
  // non-leaf would desynchronize it from its recorded forward pass.
  std::vector<double>& mutable_values() {
    if (!node_->is_leaf()) throw Error("Tensor::mutable_values: not a leaf tensor");
    return node_->values;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) {
    if (!node_->is_leaf()) throw Error("set_requires_grad: only leaves can be toggled");
    node_->requires_grad = rg;
  }
  bool is_leaf() const { return node_->is_leaf(); }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (node_->grad.empty()) throw Error("Tensor::grad: no gradient populated");
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Constant copy of the current values, cut off from the graph.
  Tensor detach() const {
    return from_values(node_->shape, node_->values, false);
  }

  detail::Node* node() const { return node_.get(); }

  friend Tensor make_op(std::vector<std::int64_t> shape, std::vector<double> values,
                        std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> backward_fn);

private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

// Creates a graph node. When no parent requires gradients the parents and the
// backward closure are dropped so frozen subgraphs cost nothing at backward.
inline Tensor make_op(std::vector<std::int64_t> shape, std::vector<double> values,
                      std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> backward_fn) {
  if (numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("make_op: shape does not match value count");
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

// Reverse-mode pass from a scalar output. Gradients of interior nodes are
// recomputed per call; leaf gradients accumulate until zero_grad().
void backward(const Tensor& output);

} // namespace vloc
