#pragma once

// Static computation graphs over dense tensors with reverse-mode
// differentiation. A Graph is built once (shapes are fixed at construction),
// then evaluated any number of times against named input bindings.

#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ndlab/tensor.hpp"

namespace ndlab::ad {

/// Raised when operand shapes are incompatible, either while building a node
/// or when a binding does not match the declared input shape.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::size_t node, const std::string& what);
  std::size_t node() const { return node_; }

 private:
  std::size_t node_;
};

enum class OpKind {
  kInput,
  kConstant,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kTranspose,
  kPermute,
  kReshape,
  kBroadcastLeading,
  kConcat,
  kSlice,
  kSoftmax,
  kRmsNorm,
  kColumnMean,
  kRsqrtFloor,
  kLog,
  kExp,
  kSilu,
  kTanh,
  kGather,
  kTokenNll,
  kSum,
  kMean,
  kFrobeniusSq,
  kArgmax,
};

const char* op_name(OpKind op);
bool op_differentiable(OpKind op);

struct Node {
  OpKind op = OpKind::kInput;
  std::vector<std::size_t> inputs;
  Shape shape;
  double scalar = 0.0;
  std::vector<std::size_t> ints;
  std::string name;
  bool requires_grad = false;
  Tensor constant;
};

class Graph;

/// Handle to a node inside a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  std::size_t id() const { return id_; }
  Graph& graph() const;
  const Shape& shape() const;
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  explicit Graph(Precision precision = Precision::kDouble)
      : precision_(precision) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(const std::string& name, Shape shape, bool requires_grad = false);
  Var constant(Tensor value);
  void set_output(const std::string& name, Var v);

  /// Appends a node after validating operand shapes; throws ShapeError with
  /// the id the node would have received.
  Var add_node(Node node);

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  Precision precision() const { return precision_; }

  std::optional<Var> find_input(const std::string& name) const;
  const std::vector<std::pair<std::string, std::size_t>>& outputs() const {
    return outputs_;
  }
  std::vector<std::string> trainable_inputs() const;

 private:
  Shape infer_shape(const Node& node, std::size_t id) const;

  Precision precision_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> inputs_by_name_;
  std::vector<std::pair<std::string, std::size_t>> outputs_;
};

// -- op builders ------------------------------------------------------------

/// a: [..., m, k]; b: [k, n] (shared) or [..., k, n] with the same leading
/// dims as a.
Var matmul(Var a, Var b);
/// Elementwise; b must equal a's shape or a trailing suffix of it.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double value);
/// Swaps the last two axes.
Var transpose(Var a);
Var permute(Var a, std::vector<std::size_t> order);
Var reshape(Var a, Shape shape);
/// [s...] -> [count, s...]
Var broadcast_leading(Var a, std::size_t count);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
/// Over the last axis, max-subtracted.
Var softmax(Var a);
/// x / sqrt(mean(x^2) + eps) over the last axis.
Var rms_norm(Var a, double eps = 1e-6);
/// [..., d] -> [d], mean over every leading position.
Var column_mean(Var a);
/// 1 / sqrt(max(a, floor)).
Var rsqrt_floor(Var a, double floor);
Var log(Var a);
Var exp(Var a);
Var silu(Var a);
Var tanh(Var a);
/// table: [V, d]; ids: any shape holding integral values < V.
Var gather(Var table, Var ids);
/// Per-position negative log-likelihood: logits [..., V], targets [...].
Var token_nll(Var logits, Var targets);
/// Mean token negative log-likelihood.
Var cross_entropy(Var logits, Var targets);
Var sum(Var a);
Var mean(Var a);
Var frobenius_sq(Var a);
/// Index of the maximum along the last axis. Not differentiable.
Var argmax(Var a);

// -- evaluation -------------------------------------------------------------

using Bindings = std::unordered_map<std::string, Tensor>;
using Gradients = std::map<std::string, Tensor>;

class Evaluation {
 public:
  const Tensor& value(Var v) const { return values_.at(v.id()); }
  const Tensor& value(std::size_t id) const { return values_.at(id); }
  std::map<std::string, Tensor> outputs() const;
  const Graph& graph() const { return *graph_; }
  const std::vector<Tensor>& values() const { return values_; }

 private:
  friend Evaluation evaluate(const Graph&, const Bindings&);
  const Graph* graph_ = nullptr;
  std::vector<Tensor> values_;
};

/// Runs every node in topological (construction) order.
Evaluation evaluate(const Graph& graph, const Bindings& inputs);
std::map<std::string, Tensor> eval(const Graph& graph, const Bindings& inputs);

/// Gradient of a scalar loss with respect to every requires_grad input.
/// Inputs not on the loss path receive exact zeros.
Gradients backward(const Graph& graph, const Evaluation& evaluation, Var loss);

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  /// max |a_i - n_i| over the largest gradient magnitude of the tensor.
  double max_scaled_error = 0.0;
  std::size_t coordinates = 0;
  bool nondifferentiable = false;
  bool pass = false;
};

/// Compares backward() against central differences, perturbing each
/// coordinate of the named input independently. Requires a double-precision
/// graph. Non-differentiable ops between the input and the loss fail the
/// check regardless of the numbers.
GradCheckReport finite_difference_check(const Graph& graph,
                                        const Bindings& inputs, Var loss,
                                        const std::string& tensor,
                                        double tolerance = 1e-4,
                                        double step = 1e-5);

}  // namespace ndlab::ad
