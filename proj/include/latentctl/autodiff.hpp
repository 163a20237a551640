#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "latentctl/tensor.hpp"

namespace latentctl {

enum class OpKind {
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  AddScalar,
  MatMul,
  Affine,
  Exp,
  Log,
  Tanh,
  Sigmoid,
  LeakyRelu,
  Softplus,
  Square,
  Abs,
  LogAbs,
  Atan2,
  ClampMin,
  Softmax,
  LogSoftmax,
  LogSumExp,
  Sum,
  Mean,
  SumRows,
  SumCols,
  NormRows,
  CosineRows,
  SliceCols,
  ConcatCols,
  RepeatRows,
  Transpose,
};

std::string_view op_name(OpKind kind);

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

struct GraphOptions {
  /// Record backward closures. Off for pure evaluation.
  bool record = true;
  /// Fail fast on NaN/Inf in any node value or gradient.
  bool check_finite = true;
  /// Tolerate +/-Inf values (NaN still fails). Used by samplers whose
  /// energies may be infinite on forbidden regions.
  bool allow_infinite = false;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always topologically sorted; backward() walks it once in reverse.
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Tensor& out_grad)>;

  explicit Graph(GraphOptions options = {});
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Differentiable leaf.
  Var input(Tensor value);
  /// Non-differentiable leaf.
  Var constant(Tensor value);

  Var record(OpKind kind, Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(OpKind kind, Tensor value, const std::vector<Var>& inputs, Backward backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }
  bool recording() const { return options_.record; }
  const GraphOptions& options() const { return options_; }
  std::size_t node_count() const { return nodes_.size(); }

  /// Seeds d(output)/d(output) = 1 and propagates. Output must hold one element.
  void backward(Var output);
  /// Gradient accumulated at v by the last backward(); zeros if unreached.
  Tensor grad(Var v) const;

  void accumulate(std::size_t id, Tensor delta);

 private:
  struct Node {
    OpKind kind;
    Tensor value;
    Tensor grad;
    Backward backward;
    bool requires_grad = false;
    bool has_grad = false;
  };

  void check_value(std::size_t id) const;

  GraphOptions options_;
  std::vector<Node> nodes_;
};

// ---- primitives ------------------------------------------------------------
// Binary arithmetic broadcasts in the matrix view: each dimension of the two
// operands must match or be 1.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);

Var matmul(Var a, Var b);
/// x * W^T + b, with W of shape out x in and b of length out.
Var affine(Var x, Var w, Var b);

Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var leaky_relu(Var a, double slope);
Var softplus(Var a);
Var square(Var a);
Var abs(Var a);
Var log_abs(Var a);
Var atan2(Var y, Var x);
Var clamp_min(Var a, double lo);

Var softmax(Var a);       // row-wise
Var log_softmax(Var a);   // row-wise
Var logsumexp(Var a);     // row-wise, rows x 1

Var sum(Var a);           // scalar
Var mean(Var a);          // scalar
Var sum_rows(Var a);      // rows x 1
Var sum_cols(Var a);      // 1 x cols
Var norm_rows(Var a);     // rows x 1, Euclidean
Var cosine_rows(Var a, Var b);  // rows x 1; b may be a single row

Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var concat_cols(const std::vector<Var>& parts);
Var repeat_rows(Var a, std::size_t n);
Var transpose(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator-(Var a, double c) { return add_scalar(a, -c); }

// ---- evaluation helpers ----------------------------------------------------

using TensorFunction = std::function<Var(Graph&, std::span<const Var>)>;
using ScalarFunction = std::function<Var(Graph&, Var)>;

struct Evaluation {
  Tensor value;
  std::vector<Tensor> gradients;
};

/// Builds f on a fresh tape over differentiable copies of `inputs` and
/// returns its value plus d(value)/d(input_i). The value must be scalar.
Evaluation evaluate_with_gradients(const TensorFunction& f, const std::vector<Tensor>& inputs);

/// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-12).
double finite_difference_check(const ScalarFunction& f, const Tensor& point, double step);

}  // namespace latentctl
