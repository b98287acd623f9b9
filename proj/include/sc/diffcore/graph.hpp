/* Copyright 2026 The sparse-contrast Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef SC_DIFFCORE_GRAPH_HPP_
#define SC_DIFFCORE_GRAPH_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sc/diffcore/tensor.hpp"
#include "sc/error.hpp"

namespace sc {

template <class T>
class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool needs_grad() const { return graph_->needs_grad(id_); }
  // Gradient w.r.t. this node after Graph::backward; empty when no gradient
  // reached it.
  std::span<const T> grad() const { return graph_->grad(id_); }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Fingerprint of every branch decision (relu/abs sign, top-k membership)
// taken during a forward pass. The gradient checker compares fingerprints
// to drop finite-difference probes that straddle a non-smooth point.
struct BranchMonitor {
  bool active = false;
  std::uint64_t hash = 0;
  std::uint64_t count = 0;

  void record(std::uint64_t v) {
    hash ^= v + 0x9e3779b97f4a7c15ULL + (hash << 6) + (hash >> 2);
    ++count;
  }
};

inline BranchMonitor& branch_monitor() {
  thread_local BranchMonitor m;
  return m;
}

// Define-by-run tape. Nodes are appended in creation order, so the node list
// is topologically sorted by construction.
template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  struct Node {
    const char* op = "";
    Tensor<T> value;
    Buffer<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor<T>* leaf = nullptr;
    bool needs_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Value that never receives a gradient.
  Var<T> constant(Tensor<T> value) {
    Node n;
    n.op = "constant";
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  // Bind a persistent parameter. Its gradient is accumulated into the
  // tensor's grad slot by backward() when it requires grad. Binding the same
  // tensor twice returns the same node.
  Var<T> param(Tensor<T>& t) {
    if (auto it = bound_.find(&t); it != bound_.end()) {
      return Var<T>(this, it->second);
    }
    Node n;
    n.op = "param";
    n.value = t;
    n.value.clear_grad();
    n.leaf = &t;
    n.needs_grad = t.requires_grad();
    nodes_.push_back(std::move(n));
    bound_.emplace(&t, nodes_.size() - 1);
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(const char* op, Tensor<T> value,
                std::vector<std::size_t> inputs, BackwardFn backward) {
    if (!value.all_finite()) {
      throw DomainError(op, "non-finite value produced, shape " +
                                shape_str(value.shape()));
    }
    Node n;
    n.op = op;
    n.value = std::move(value);
    for (std::size_t in : inputs) n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
    n.inputs = std::move(inputs);
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::span<const T> grad(std::size_t id) const { return nodes_[id].grad; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient buffer of an input node, zero-initialised on first use.
  std::span<T> grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad;
  }
  std::span<const T> upstream(std::size_t self) const { return nodes_[self].grad; }

  // Reverse sweep from a scalar loss. Only nodes reachable from the loss are
  // visited, each exactly once, in reverse creation order. Leaf gradients are
  // added to the bound parameter tensors.
  void backward(Var<T> loss) {
    const std::size_t root = loss.id();
    if (nodes_[root].value.size() != 1) {
      throw ShapeError("backward", "loss must be a scalar, got shape " +
                                       shape_str(nodes_[root].value.shape()));
    }
    std::vector<char> reach(root + 1, 0);
    reach[root] = 1;
    for (std::size_t id = root + 1; id-- > 0;) {
      if (!reach[id]) continue;
      for (std::size_t in : nodes_[id].inputs) reach[in] = 1;
    }
    for (std::size_t id = 0; id <= root; ++id) nodes_[id].grad.clear();
    if (!nodes_[root].needs_grad) return;
    nodes_[root].grad.assign(1, T{1});
    for (std::size_t id = root + 1; id-- > 0;) {
      Node& n = nodes_[id];
      // An empty buffer means nothing flowed in, so the gradient is zero.
      if (!reach[id] || !n.needs_grad || n.grad.empty()) continue;
      if (!all_finite<T>(n.grad)) {
        throw DomainError(n.op, "non-finite gradient at node " + std::to_string(id));
      }
      if (n.backward) n.backward(*this, id);
    }
    for (std::size_t id = 0; id <= root; ++id) {
      Node& n = nodes_[id];
      if (reach[id] && n.leaf != nullptr && n.needs_grad && !n.grad.empty()) {
        n.leaf->accumulate_grad(n.grad);
      }
    }
  }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::size_t> bound_;
};

}  // namespace sc

#endif  // SC_DIFFCORE_GRAPH_HPP_
