// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kdqat/errors.hpp"

namespace kdqat {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Reductions accumulate in this type regardless of the storage scalar.
using Accum = double;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// Storage layout: every tensor is a row-major (product of leading extents) x (last extent)
// matrix. Rank 0 is 1x1, rank 1 is 1xd.
inline std::pair<Index, Index> storage_extents(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  const Index cols = shape.back();
  Index rows = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
  return {rows, cols};
}

template <typename Scalar>
struct TapeNode {
  using Matrix = RowMatrix<Scalar>;
  // input_grads[i] is pre-sized to input i's storage when that input requires grad and is
  // empty otherwise; backward rules accumulate into the non-empty ones.
  using BackwardFn = std::function<void(const Matrix& upstream, std::span<Matrix> input_grads)>;

  std::string op;
  Shape shape;
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TapeNode>> inputs;
  BackwardFn backward;

  bool is_leaf() const { return inputs.empty(); }
};

// Handle to a node on the gradient tape. Copies share the node.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Matrix = RowMatrix<Scalar>;
  using Node = TapeNode<Scalar>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, Matrix value) { return leaf(std::move(shape), std::move(value), false); }
  static Tensor parameter(Shape shape, Matrix value) { return leaf(std::move(shape), std::move(value), true); }

  static Tensor from_values(Shape shape, const std::vector<Scalar>& values, bool requires_grad = false) {
    const auto [rows, cols] = storage_extents(shape);
    if (static_cast<Index>(values.size()) != rows * cols) {
      throw DimensionError("tensor " + shape_string(shape) + " needs " + std::to_string(rows * cols) +
                           " values, got " + std::to_string(values.size()));
    }
    Matrix m = Eigen::Map<const Matrix>(values.data(), rows, cols);
    return leaf(std::move(shape), std::move(m), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto [rows, cols] = storage_extents(shape);
    return leaf(std::move(shape), Matrix::Zero(rows, cols), requires_grad);
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return leaf({}, std::move(m), requires_grad);
  }

  // Result of an operation. Inputs and the backward rule are kept only when some input
  // participates in gradient tracking.
  static Tensor make(std::string op, Shape shape, Matrix value, std::vector<Tensor> inputs,
                     typename Node::BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->op = std::move(op);
    node->shape = std::move(shape);
    node->value = std::move(value);
    for (const auto& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
    if (node->requires_grad) {
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.node_);
      node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index numel() const { return node_->value.size(); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index extent(Index axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }

  const Matrix& value() const { return node_->value; }
  const std::string& op() const { return node_->op; }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  Scalar item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node_->value(0, 0);
  }

  // In-place access for optimizers and finite-difference probes; leaves only.
  Matrix& mutable_value() {
    if (!node_->is_leaf()) throw ContractError("mutable_value() on non-leaf '" + op() + "'");
    return node_->value;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->grad.size() > 0; }
  const Matrix& grad() const {
    if (!has_grad()) throw ContractError("tensor " + shape_string(shape()) + " has no gradient");
    return node_->grad;
  }
  void zero_grad() { node_->grad.resize(0, 0); }

  void set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw ContractError("set_requires_grad on non-leaf '" + op() + "'");
    node_->requires_grad = on;
  }

  // Constant leaf sharing no tape history with this tensor.
  Tensor detach() const { return constant(shape(), value()); }

 private:
  static Tensor leaf(Shape shape, Matrix value, bool requires_grad) {
    const auto [rows, cols] = storage_extents(shape);
    if (value.rows() != rows || value.cols() != cols) {
      throw DimensionError("storage " + std::to_string(value.rows()) + "x" + std::to_string(value.cols()) +
                           " does not match shape " + shape_string(shape));
    }
    auto node = std::make_shared<Node>();
    node->op = "leaf";
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  std::shared_ptr<Node> node_;
};

struct BackwardStats {
  std::size_t nodes_visited = 0;
  std::size_t leaves_updated = 0;
};

namespace detail {

template <typename Scalar>
std::vector<TapeNode<Scalar>*> topological_order(TapeNode<Scalar>* root) {
  // Iterative post-order DFS over nodes that take part in gradient tracking.
  std::vector<TapeNode<Scalar>*> order;
  std::unordered_set<TapeNode<Scalar>*> seen;
  std::vector<std::pair<TapeNode<Scalar>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TapeNode<Scalar>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across calls.
template <typename Scalar>
BackwardStats backward(const Tensor<Scalar>& loss) {
  using Matrix = RowMatrix<Scalar>;
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  BackwardStats stats;
  if (!loss.requires_grad()) return stats;

  auto order = detail::topological_order(loss.node().get());
  std::unordered_map<TapeNode<Scalar>*, Matrix> pending;
  pending.emplace(loss.node().get(), Matrix::Ones(1, 1));

  std::vector<Matrix> input_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TapeNode<Scalar>* node = *it;
    ++stats.nodes_visited;
    auto found = pending.find(node);
    if (found == pending.end()) continue;
    Matrix upstream = std::move(found->second);
    pending.erase(found);

    if (node->is_leaf()) {
      if (node->grad.size() == 0) {
        node->grad = std::move(upstream);
      } else {
        node->grad += upstream;
      }
      ++stats.leaves_updated;
      continue;
    }

    input_grads.assign(node->inputs.size(), Matrix());
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const auto& in = node->inputs[i];
      if (in->requires_grad) input_grads[i] = Matrix::Zero(in->value.rows(), in->value.cols());
    }
    node->backward(upstream, std::span<Matrix>(input_grads));
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      if (input_grads[i].size() == 0) continue;
      TapeNode<Scalar>* in = node->inputs[i].get();
      auto slot = pending.find(in);
      if (slot == pending.end()) {
        pending.emplace(in, std::move(input_grads[i]));
      } else {
        slot->second += input_grads[i];
      }
    }
  }
  return stats;
}

// Number of distinct tape nodes reachable from `root` through gradient-tracking edges.
template <typename Scalar>
std::size_t reachable_nodes(const Tensor<Scalar>& root) {
  if (!root.requires_grad()) return 0;
  return detail::topological_order(root.node().get()).size();
}

}  // namespace kdqat
