#pragma once

#include "nextlocmoe/parameters.hpp"

#include <deque>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

namespace nextlocmoe {
class Rng;
}

namespace nextlocmoe::ad {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  int id() const { return id_; }

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode tape over dense double matrices. Values are computed eagerly;
/// backward closures are recorded only for nodes that depend on a trainable
/// parameter. Nodes are created in topological order.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Matrix&)>;

  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracking() const { return track_; }

  Var constant(Matrix value);
  /// Leaf bound to a parameter; one leaf per parameter per graph. Requires
  /// gradient iff the parameter is trainable and the graph tracks gradients.
  Var param(const Parameter& p);

  const Matrix& value(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Runs backward from a 1x1 root with the given seed gradient.
  void backward(Var root, double seed = 1.0);

  /// Gradient accumulated at a node; empty matrix when none reached it.
  const Matrix& grad(Var v) const;

  /// Adds parameter-leaf gradients into a store-indexed buffer.
  void accumulate_into(GradientBuffer& buffer) const;

  std::size_t size() const { return nodes_.size(); }

  // Op plumbing.
  Var make(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var make(Matrix value, std::span<const Var> inputs, BackwardFn fn);
  /// Accumulates into the gradient of node id if it requires one.
  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) {
      node.grad = g;
    } else {
      node.grad += g;
    }
  }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
    const Parameter* param = nullptr;
  };

  bool track_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_leaves_;
};

// Linear algebra.
Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
/// x * w^T + bias, with w stored (out x in) and bias a 1 x out row (optional).
Var linear(Var x, Var w, Var bias = {});
Var transpose(Var a);

// Elementwise and broadcasting.
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// a + row, row broadcast over every row of a.
Var add_row(Var a, Var row);
Var scale(Var a, double c);
/// a * s with s a 1x1 node.
Var scale_by(Var a, Var s);
/// Row i of a multiplied by w(i, 0); w is rows x 1.
Var scale_rows(Var a, Var w);
Var gelu(Var a);
Var relu(Var a);
Var tanh(Var a);
Var dropout(Var a, double rate, Rng& rng);

// Normalization and probability.
Var softmax_rows(Var a);
/// Row-wise softmax of a square score matrix with entries above the diagonal masked.
Var causal_softmax_rows(Var a);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Per-row Shannon entropy (natural log) of a probability matrix; rows x 1.
Var entropy_rows(Var p);
/// Per-row Euclidean norm; rows x 1.
Var row_norms(Var a);

// Shape manipulation.
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
/// Shifts rows down by `shift`, filling the top with zeros (causal lag).
Var shift_down(Var a, Eigen::Index shift);
Var repeat_rows(Var row, Eigen::Index count);
Var element(Var a, Eigen::Index r, Eigen::Index c);

// Reductions.
Var sum(Var a);
Var mean(Var a);
Var mean_rows(Var a);

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}
inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

}  // namespace nextlocmoe::ad
