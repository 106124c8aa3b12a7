#pragma once

#include <functional>
#include <string>
#include <vector>

#include "attnalign/errors.hpp"

namespace attnalign {

// Dense row-major tensor of 64-bit floats. Rank 1 and rank 2 cover every
// computation in this library; scalars are shape {1}.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> shape_in, std::vector<double> data_in);

  static Tensor zeros(const std::vector<int>& shape);
  static Tensor full(const std::vector<int>& shape, double v);
  static Tensor scalar(double v);
  static Tensor from_vector(std::vector<double> v);                 // shape {n}
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);  // shape {r, c}

  int numel() const;
  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const;
  int cols() const;

  double& at(int i) { return data[static_cast<size_t>(i)]; }
  double at(int i) const { return data[static_cast<size_t>(i)]; }
  double& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  std::string shape_str() const;
};

// Handle into a Tape.
struct Value {
  int id = -1;
};

enum class Op {
  Leaf,
  Add,
  Sub,
  Mul,
  AddScalar,
  MulScalar,
  Sigmoid,
  Tanh,
  Exp,
  Log,
  LeakyRelu,
  Recip,
  MatMul,
  Transpose,
  Softmax,
  CrossEntropy,
  Sum,
  Reshape,
  Concat,
  SliceCols,
  GatherRows,
  ScaleByScalar,
  LayerNorm,
  GruStep,
};

struct Node {
  Op op = Op::Leaf;
  std::vector<int> inputs;
  Tensor out;
  Tensor grad;                 // allocated by backward() for reachable nodes
  int axis = 0;                // Softmax / Concat
  int i0 = 0;                  // SliceCols start, GruStep time index, CrossEntropy gold
  int i1 = 0;                  // SliceCols length
  double scalar = 0.0;         // AddScalar / MulScalar / LeakyRelu slope / LayerNorm eps
  std::vector<int> indices;    // GatherRows
  std::vector<Tensor> aux;     // op-specific forward caches for backward
};

// Single-owner computation tape. Forward values are computed eagerly at node
// creation and checked finite; backward() runs one deterministic reverse
// sweep over the ancestors of the root.
class Tape {
 public:
  Tape() { nodes_.reserve(256); }

  Value leaf(Tensor t);
  Value constant(Tensor t) { return leaf(std::move(t)); }

  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  Value add_scalar(Value a, double s);
  Value mul_scalar(Value a, double s);
  Value sigmoid(Value a);
  Value tanh(Value a);
  Value exp(Value a);
  Value log(Value a);
  Value leaky_relu(Value a, double slope = 0.01);
  Value recip(Value a);
  Value matmul(Value a, Value b);
  Value transpose(Value a);
  Value softmax(Value a, int axis);
  Value cross_entropy_with_logits(Value logits, int gold);
  Value sum(Value a);
  Value reshape(Value a, std::vector<int> shape);
  Value concat(const std::vector<Value>& parts, int axis);
  Value slice_cols(Value a, int start, int len);
  Value gather_rows(Value a, std::vector<int> row_indices);
  Value select_row(Value a, int row) { return gather_rows(a, {row}); }
  Value scale_by_scalar(Value a, Value s);
  Value layer_norm(Value x, Value gamma, Value beta, double eps = 1e-5);
  // One gated-recurrence step. xz/xr/xc are precomputed input projections for
  // the whole sequence ([M x d_h]); row t is consumed here. h is [1 x d_h].
  Value gru_step(Value xz, Value xr, Value xc, int t, Value h, Value w_hz,
                 Value w_hr, Value w_hc);

  // Reverse sweep from a scalar root. Gradient accumulators are zeroed on
  // every call, so repeated calls are idempotent.
  void backward(Value root);

  const Tensor& val(Value v) const { return nodes_[static_cast<size_t>(v.id)].out; }
  double scalar_val(Value v) const;
  // Gradient of the last backward() w.r.t. v; zero for nodes the root does
  // not depend on.
  const Tensor& grad(Value v);

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  Value push(Node n);
  Node& node(Value v) { return nodes_[static_cast<size_t>(v.id)]; }
  const Node& node(Value v) const { return nodes_[static_cast<size_t>(v.id)]; }
  void backward_node(int id);

  std::vector<Node> nodes_;
};

// Max over coordinates of |analytic - central difference| /
// max(1e-8, |analytic| + |numeric|) for the scalar graph built by f on a
// fresh tape with x as the single leaf.
double finite_diff_check(const std::function<Value(Tape&, Value)>& f,
                         const Tensor& x, double h = 1e-5);

}  // namespace attnalign
