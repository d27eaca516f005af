#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lreid/error.hpp"
#include "lreid/tensor.hpp"

namespace lreid::ad {

class Graph;

/// Handle to a node recorded on a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor& value() const;
  /// Gradient after backward; zeros if the node received no gradient.
  Tensor grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Tape of executed operations for one forward build.
///
/// Nodes are appended in execution order, which is a topological order by
/// construction. backward() walks the tape once in reverse and consumes it.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, nullptr, {}); }

  /// Leaf whose gradient is readable through Var::grad() after backward.
  Var input(Tensor value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, nullptr, {});
  }

  /// Leaf bound to a Param; backward adds into param.grad when trainable.
  Var param(Param& p) {
    auto v = push(p.value, p.requires_grad, nullptr, {});
    if (p.requires_grad) nodes_[v.id()].sink = &p;
    return v;
  }

  /// Records an op result. `inputs` decide whether the result requires grad.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_.at(in.id()).requires_grad;
    if (!value.all_finite()) throw NumericError("non-finite value produced by forward op");
    return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{}, {});
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer of a node, allocated on first touch.
  Tensor& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }
  const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void backward(const Var& loss) {
    if (consumed_) throw StateError("backward called on a consumed graph");
    if (loss.value().size() != 1)
      throw DimensionError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    consumed_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    grad_buffer(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.sink) {
        auto& g = n.sink->grad;
        if (g.shape() != n.value.shape()) g = Tensor(n.value.shape());
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Param* sink = nullptr;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn, Param* sink) {
    if (consumed_) throw StateError("cannot record onto a consumed graph");
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(fn), sink});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }
inline Tensor Var::grad() const {
  if (graph_->has_grad(id_)) return graph_->grad(id_);
  return Tensor(value().shape());
}

}  // namespace lreid::ad
