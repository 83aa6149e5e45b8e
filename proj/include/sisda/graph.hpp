#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sisda/tensor.hpp"

namespace sisda {

enum class OpKind {
  leaf,
  constant,
  matmul,
  matmul_transposed,
  add,
  add_row,
  scale,
  mul,
  softmax_rows,
  log,
  exp,
  gather_rows,
  concat_rows,
  concat_cols,
  slice_rows,
  slice_cols,
  layer_norm,
  gelu,
  relu,
  log_softmax_rows,
  pick,
  sum,
  log_sigmoid,
};

std::string_view op_name(OpKind kind);

// Handle to a node inside a Graph.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const noexcept { return id != static_cast<std::size_t>(-1); }
  bool operator==(const Var&) const = default;
};

// Define-by-run tape. Every op is evaluated when it is recorded; the tape can
// be replayed with new leaf values (forward) and differentiated (backward).
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var leaf(std::string name, Tensor value, bool requires_grad = true);
  Var constant(Tensor value);

  Var matmul(Var a, Var b);
  Var matmul_transposed(Var a, Var b);  // a * b^T
  Var add(Var a, Var b);
  Var add_row(Var a, Var row);  // adds a 1xC row to every row of a
  Var scale(Var a, double factor);
  Var mul(Var a, Var b);
  Var softmax_rows(Var a, bool causal = false);  // causal: row i keeps columns 0..i
  Var log(Var a);                                 // floored at 1e-12
  Var exp(Var a);
  Var gather_rows(Var table, std::vector<std::size_t> rows);
  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(std::span<const Var> parts);
  Var slice_rows(Var a, std::size_t begin, std::size_t end);
  Var slice_cols(Var a, std::size_t begin, std::size_t end);
  Var layer_norm(Var x, Var gain, Var bias);
  Var gelu(Var a);
  Var relu(Var a);
  Var log_softmax_rows(Var a);
  Var pick(Var a, std::vector<std::size_t> cols);  // out[r] = a[r, cols[r]], Rx1
  Var sum(Var a);
  Var log_sigmoid(Var a);

  void retain_grad(Var v);
  bool retains_grad(Var v) const;

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  OpKind kind(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  Var find_leaf(std::string_view name) const;
  std::vector<std::string> leaf_names() const;

  // Replays the tape. Named leaves take the bound values; unnamed-in-bindings
  // leaves keep their current value. Returns the root's value.
  Tensor forward(const std::map<std::string, Tensor>& bindings, Var root);

  // Replays the tape with `delta` added to one entry of an interior node right
  // after it is computed. Used for finite differences at attention nodes.
  Tensor forward_perturbed(Var node, std::size_t index, double delta, Var root);

  // Reverse sweep from a scalar root. Populates grad() on every node that
  // depends on a grad-requiring leaf.
  void backward(Var root);
  bool has_gradients() const noexcept { return grads_ready_; }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    std::string name;
    bool requires_grad = false;
    bool retain = false;
    double factor = 0.0;
    bool flag = false;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::vector<std::size_t> index;
    std::vector<double> cache;  // layer-norm mean/rstd pairs
  };

  Var record(Node node);
  const Node& node(Var v) const;
  void evaluate(std::size_t id);
  void propagate(std::size_t id);
  void replay(const std::function<void(std::size_t, Tensor&)>& after_eval);
  [[noreturn]] void fail_shape(std::size_t id, const std::string& what) const;

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t, std::less<>> leaves_;
  bool grads_ready_ = false;
  bool consistent_ = true;
};

// max over entries of |analytic - central| / (|analytic| + |central| + 1e-12)
// for one named leaf, with analytic gradients of the scalar `root`.
double finite_difference_check(Graph& graph, std::string_view leaf_name, double step, Var root);

// Same check for any node (leaf or interior) by perturbing its value in place.
double finite_difference_check_node(Graph& graph, Var node, double step, Var root);

// Central-difference gradient of `root` with respect to one node's entries.
Tensor finite_difference_gradient(Graph& graph, Var node, double step, Var root);

}  // namespace sisda
