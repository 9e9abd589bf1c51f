#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "unidiff/tensor.hpp"

namespace unidiff::nn {

class Graph;

// Handle to a node in a Graph. Cheap to copy; valid while its graph lives.
class Var {
 public:
  Var() = default;

  Graph& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }
  const Tensor& value() const;

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Tape for reverse-mode differentiation. Nodes are appended in evaluation
// order, so a reverse sweep over the tape is a valid topological order.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Leaf that accumulates a gradient (e.g. a latent being optimized).
  Var input(Tensor value);
  // Parameter leaf bound by reference. Binding the same tensor twice returns
  // the same node; the tensor must outlive the graph and stay unmodified.
  Var param(const Tensor& value);

  const Tensor& value(Var v) const;
  // Gradient of the last backward() target; zeros if the node was not reached.
  Tensor grad(Var v) const;
  // Gradient for a bound parameter; zeros if unbound or unreached.
  Tensor grad_of(const Tensor& param) const;

  void backward(Var loss);

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Used by operations.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& node_grad(std::size_t id) const { return nodes_[id].grad; }
  // Lazily allocated gradient buffer for accumulation.
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  const Tensor& node_value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> params_;
};

// Elementwise and linear-algebra operations. All operands are rank-2 [rows x cols]
// unless stated; rank-1 tensors act as a single row.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// alpha * a + beta * b
Var axpby(double alpha, Var a, double beta, Var b);
// x[n x m] + bias[m] broadcast over rows
Var add_bias(Var x, Var bias);
// x[n x k] * w[m x k]^T -> [n x m]
Var matmul_nt(Var x, Var w);
Var silu(Var x);
Var relu(Var x);
Var sum(Var x);
// Mean of squared differences over all elements.
Var mse(Var a, Var b);
// Mean over rows of -sum_j targets[i,j] * log_softmax(logits)[i,j].
Var soft_cross_entropy(Var logits, const Tensor& targets);
// Builds an [n x dim] matrix whose row i is the sum of the rank-1 vectors in
// rows[i] (an empty row is zero).
Var stack_rows(Graph& g, const std::vector<std::vector<Var>>& rows, std::size_t dim);
// Reinterprets the shape; element order unchanged.
Var reshape(Var x, Shape shape);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// Gradients of a scalar loss with respect to each parameter tensor, in order.
// Unreached parameters receive zero gradients. Throws NumericError when the
// loss is not finite.
std::vector<Tensor> grad(Graph& g, Var loss, std::span<const Tensor* const> params);

}  // namespace unidiff::nn
