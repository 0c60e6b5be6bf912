#include "ndlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace ndlab::ad {

ShapeError::ShapeError(std::size_t node, const std::string& what)
    : std::invalid_argument("node " + std::to_string(node) + ": " + what),
      node_(node) {}

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kPermute: return "permute";
    case OpKind::kReshape: return "reshape";
    case OpKind::kBroadcastLeading: return "broadcast_leading";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kRmsNorm: return "rms_norm";
    case OpKind::kColumnMean: return "column_mean";
    case OpKind::kRsqrtFloor: return "rsqrt_floor";
    case OpKind::kLog: return "log";
    case OpKind::kExp: return "exp";
    case OpKind::kSilu: return "silu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kGather: return "gather";
    case OpKind::kTokenNll: return "token_nll";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kFrobeniusSq: return "frobenius_sq";
    case OpKind::kArgmax: return "argmax";
  }
  return "?";
}

bool op_differentiable(OpKind op) { return op != OpKind::kArgmax; }

Graph& Var::graph() const {
  if (!graph_) throw std::logic_error("use of unbound Var");
  return *graph_;
}

const Shape& Var::shape() const { return graph().node(id_).shape; }

namespace {

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

}  // namespace

Var Graph::input(const std::string& name, Shape shape, bool requires_grad) {
  if (inputs_by_name_.count(name)) {
    throw std::invalid_argument("duplicate graph input '" + name + "'");
  }
  Node n;
  n.op = OpKind::kInput;
  n.name = name;
  n.shape = std::move(shape);
  n.requires_grad = requires_grad;
  Var v = add_node(std::move(n));
  inputs_by_name_[name] = v.id();
  return v;
}

Var Graph::constant(Tensor value) {
  Node n;
  n.op = OpKind::kConstant;
  n.shape = value.shape();
  n.constant = std::move(value);
  return add_node(std::move(n));
}

void Graph::set_output(const std::string& name, Var v) {
  if (&v.graph() != this) throw std::invalid_argument("output from other graph");
  outputs_.emplace_back(name, v.id());
}

std::optional<Var> Graph::find_input(const std::string& name) const {
  auto it = inputs_by_name_.find(name);
  if (it == inputs_by_name_.end()) return std::nullopt;
  return Var(const_cast<Graph*>(this), it->second);
}

std::vector<std::string> Graph::trainable_inputs() const {
  std::vector<std::string> names;
  for (const auto& n : nodes_) {
    if (n.op == OpKind::kInput && n.requires_grad) names.push_back(n.name);
  }
  return names;
}

Var Graph::add_node(Node node) {
  const std::size_t id = nodes_.size();
  for (std::size_t in : node.inputs) {
    if (in >= id) throw ShapeError(id, "input id out of topological order");
  }
  if (node.op != OpKind::kInput && node.op != OpKind::kConstant) {
    node.shape = infer_shape(node, id);
  }
  nodes_.push_back(std::move(node));
  return Var(this, id);
}

Shape Graph::infer_shape(const Node& n, std::size_t id) const {
  auto in = [&](std::size_t k) -> const Shape& {
    return nodes_[n.inputs.at(k)].shape;
  };
  auto fail = [&](const std::string& msg) -> ShapeError {
    return ShapeError(id, std::string(op_name(n.op)) + ": " + msg);
  };
  switch (n.op) {
    case OpKind::kMatMul: {
      const Shape& a = in(0);
      const Shape& b = in(1);
      if (a.size() < 2 || b.size() < 2) throw fail("operands must be rank >= 2");
      if (a.back() != b[b.size() - 2]) {
        throw fail("inner dims differ " + shape_to_string(a) + " x " +
                   shape_to_string(b));
      }
      if (b.size() != 2 &&
          (b.size() != a.size() ||
           !std::equal(a.begin(), a.end() - 2, b.begin()))) {
        throw fail("batch dims differ " + shape_to_string(a) + " x " +
                   shape_to_string(b));
      }
      Shape out(a.begin(), a.end() - 1);
      out.push_back(b.back());
      return out;
    }
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
      if (!is_suffix(in(1), in(0))) {
        throw fail(shape_to_string(in(1)) + " is not a trailing suffix of " +
                   shape_to_string(in(0)));
      }
      return in(0);
    case OpKind::kScale:
    case OpKind::kAddScalar:
    case OpKind::kLog:
    case OpKind::kExp:
    case OpKind::kSilu:
    case OpKind::kTanh:
    case OpKind::kRsqrtFloor:
      return in(0);
    case OpKind::kSoftmax:
    case OpKind::kRmsNorm:
      if (in(0).empty()) throw fail("needs rank >= 1");
      return in(0);
    case OpKind::kTranspose: {
      Shape s = in(0);
      if (s.size() < 2) throw fail("needs rank >= 2");
      std::swap(s[s.size() - 1], s[s.size() - 2]);
      return s;
    }
    case OpKind::kPermute: {
      const Shape& s = in(0);
      if (n.ints.size() != s.size()) throw fail("order length != rank");
      std::vector<bool> seen(s.size(), false);
      Shape out;
      for (std::size_t ax : n.ints) {
        if (ax >= s.size() || seen[ax]) throw fail("invalid permutation");
        seen[ax] = true;
        out.push_back(s[ax]);
      }
      return out;
    }
    case OpKind::kReshape: {
      Shape out(n.ints.begin(), n.ints.end());
      if (shape_numel(out) != shape_numel(in(0))) {
        throw fail("cannot reshape " + shape_to_string(in(0)) + " to " +
                   shape_to_string(out));
      }
      return out;
    }
    case OpKind::kBroadcastLeading: {
      Shape out{n.ints.at(0)};
      out.insert(out.end(), in(0).begin(), in(0).end());
      return out;
    }
    case OpKind::kConcat: {
      const std::size_t axis = n.ints.at(0);
      if (n.inputs.empty()) throw fail("no parts");
      Shape out = in(0);
      if (axis >= out.size()) throw fail("axis out of range");
      out[axis] = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Shape& s = in(k);
        if (s.size() != out.size()) throw fail("rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d) {
          if (d != axis && s[d] != in(0)[d]) {
            throw fail("part " + std::to_string(k) + " shape " +
                       shape_to_string(s) + " incompatible");
          }
        }
        out[axis] += s[axis];
      }
      return out;
    }
    case OpKind::kSlice: {
      Shape s = in(0);
      const std::size_t axis = n.ints.at(0);
      const std::size_t b = n.ints.at(1);
      const std::size_t e = n.ints.at(2);
      if (axis >= s.size() || b > e || e > s[axis]) throw fail("bad range");
      s[axis] = e - b;
      return s;
    }
    case OpKind::kColumnMean:
      if (in(0).empty()) throw fail("needs rank >= 1");
      return Shape{in(0).back()};
    case OpKind::kGather: {
      const Shape& t = in(0);
      if (t.size() != 2) throw fail("table must be rank 2");
      Shape out = in(1);
      out.push_back(t[1]);
      return out;
    }
    case OpKind::kTokenNll: {
      const Shape& l = in(0);
      if (l.empty()) throw fail("logits need rank >= 1");
      Shape lead(l.begin(), l.end() - 1);
      if (lead != in(1)) {
        throw fail("targets " + shape_to_string(in(1)) + " vs logits " +
                   shape_to_string(l));
      }
      return lead;
    }
    case OpKind::kSum:
    case OpKind::kMean:
    case OpKind::kFrobeniusSq:
      return Shape{};
    case OpKind::kArgmax: {
      const Shape& s = in(0);
      if (s.empty()) throw fail("needs rank >= 1");
      return Shape(s.begin(), s.end() - 1);
    }
    case OpKind::kInput:
    case OpKind::kConstant:
      break;
  }
  return n.shape;
}

// -- builders ---------------------------------------------------------------

namespace {

Var make(OpKind op, std::vector<Var> inputs, double scalar = 0.0,
         std::vector<std::size_t> ints = {}) {
  Graph& g = inputs.front().graph();
  Node n;
  n.op = op;
  for (const Var& v : inputs) {
    if (&v.graph() != &g) throw ShapeError(g.size(), "operands from different graphs");
    n.inputs.push_back(v.id());
  }
  n.scalar = scalar;
  n.ints = std::move(ints);
  return g.add_node(std::move(n));
}

}  // namespace

Var matmul(Var a, Var b) { return make(OpKind::kMatMul, {a, b}); }
Var operator+(Var a, Var b) { return make(OpKind::kAdd, {a, b}); }
Var operator-(Var a, Var b) { return make(OpKind::kSub, {a, b}); }
Var operator*(Var a, Var b) { return make(OpKind::kMul, {a, b}); }
Var scale(Var a, double factor) { return make(OpKind::kScale, {a}, factor); }
Var add_scalar(Var a, double value) {
  return make(OpKind::kAddScalar, {a}, value);
}
Var transpose(Var a) { return make(OpKind::kTranspose, {a}); }
Var permute(Var a, std::vector<std::size_t> order) {
  return make(OpKind::kPermute, {a}, 0.0, std::move(order));
}
Var reshape(Var a, Shape shape) {
  return make(OpKind::kReshape, {a}, 0.0, std::move(shape));
}
Var broadcast_leading(Var a, std::size_t count) {
  return make(OpKind::kBroadcastLeading, {a}, 0.0, {count});
}
Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat of nothing");
  return make(OpKind::kConcat, parts, 0.0, {axis});
}
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  return make(OpKind::kSlice, {a}, 0.0, {axis, begin, end});
}
Var softmax(Var a) { return make(OpKind::kSoftmax, {a}); }
Var rms_norm(Var a, double eps) { return make(OpKind::kRmsNorm, {a}, eps); }
Var column_mean(Var a) { return make(OpKind::kColumnMean, {a}); }
Var rsqrt_floor(Var a, double floor) {
  return make(OpKind::kRsqrtFloor, {a}, floor);
}
Var log(Var a) { return make(OpKind::kLog, {a}); }
Var exp(Var a) { return make(OpKind::kExp, {a}); }
Var silu(Var a) { return make(OpKind::kSilu, {a}); }
Var tanh(Var a) { return make(OpKind::kTanh, {a}); }
Var gather(Var table, Var ids) { return make(OpKind::kGather, {table, ids}); }
Var token_nll(Var logits, Var targets) {
  return make(OpKind::kTokenNll, {logits, targets});
}
Var cross_entropy(Var logits, Var targets) {
  return mean(token_nll(logits, targets));
}
Var sum(Var a) { return make(OpKind::kSum, {a}); }
Var mean(Var a) { return make(OpKind::kMean, {a}); }
Var frobenius_sq(Var a) { return make(OpKind::kFrobeniusSq, {a}); }
Var argmax(Var a) { return make(OpKind::kArgmax, {a}); }

// -- kernels ----------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct PermuteMap {
  // Offset into the source for each destination linear index.
  std::vector<std::size_t> offsets;
};

PermuteMap permute_offsets(const Shape& in, const std::vector<std::size_t>& order) {
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_stride[d - 1] = in_stride[d] * in[d];
  Shape out(rank);
  std::vector<std::size_t> step(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out[d] = in[order[d]];
    step[d] = in_stride[order[d]];
  }
  const std::size_t total = shape_numel(in);
  PermuteMap map;
  map.offsets.resize(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t lin = 0; lin < total; ++lin) {
    map.offsets[lin] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      offset += step[d];
      if (idx[d] < out[d]) break;
      offset -= step[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

std::vector<std::size_t> transpose_order(std::size_t rank) {
  std::vector<std::size_t> order(rank);
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[rank - 1], order[rank - 2]);
  return order;
}

std::size_t checked_index(double v, std::size_t limit, std::size_t node) {
  if (!(v >= 0.0) || v != std::floor(v) || v >= static_cast<double>(limit)) {
    throw std::out_of_range("node " + std::to_string(node) + ": index " +
                            std::to_string(v) + " outside [0," +
                            std::to_string(limit) + ")");
  }
  return static_cast<std::size_t>(v);
}

double silu_value(double x) { return x / (1.0 + std::exp(-x)); }

void round_to_float(Tensor& t) {
  for (double& v : t.storage()) v = static_cast<double>(static_cast<float>(v));
}

Tensor forward_node(const Graph& g, std::size_t id,
                    const std::vector<Tensor>& vals) {
  const Node& n = g.node(id);
  auto in = [&](std::size_t k) -> const Tensor& { return vals[n.inputs[k]]; };
  Tensor out(n.shape);
  double* o = out.data().data();
  switch (n.op) {
    case OpKind::kInput:
    case OpKind::kConstant:
      break;
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t m = a.shape()[a.rank() - 2];
      const std::size_t k = a.shape().back();
      const std::size_t nn = b.shape().back();
      const std::size_t batch = a.size() / (m * k);
      const bool shared = b.rank() == 2;
      for (std::size_t bi = 0; bi < batch; ++bi) {
        gemm_nn(m, k, nn, a.data().data() + bi * m * k,
                b.data().data() + (shared ? 0 : bi * k * nn), o + bi * m * nn);
      }
      break;
    }
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t inner = b.size();
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double bv = b[i % inner];
        o[i] = n.op == OpKind::kAdd   ? a[i] + bv
               : n.op == OpKind::kSub ? a[i] - bv
                                      : a[i] * bv;
      }
      break;
    }
    case OpKind::kScale:
      for (std::size_t i = 0; i < out.size(); ++i) o[i] = in(0)[i] * n.scalar;
      break;
    case OpKind::kAddScalar:
      for (std::size_t i = 0; i < out.size(); ++i) o[i] = in(0)[i] + n.scalar;
      break;
    case OpKind::kTranspose:
    case OpKind::kPermute: {
      const auto order = n.op == OpKind::kTranspose
                             ? transpose_order(in(0).rank())
                             : n.ints;
      const auto map = permute_offsets(in(0).shape(), order);
      for (std::size_t i = 0; i < out.size(); ++i) o[i] = in(0)[map.offsets[i]];
      break;
    }
    case OpKind::kReshape:
      std::copy(in(0).data().begin(), in(0).data().end(), o);
      break;
    case OpKind::kBroadcastLeading: {
      const std::size_t inner = in(0).size();
      for (std::size_t r = 0; r < n.ints[0]; ++r) {
        std::copy(in(0).data().begin(), in(0).data().end(), o + r * inner);
      }
      break;
    }
    case OpKind::kConcat: {
      const std::size_t axis = n.ints[0];
      const std::size_t outer = prod(n.shape, 0, axis);
      const std::size_t inner = prod(n.shape, axis + 1, n.shape.size());
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& part = in(k);
        const std::size_t block = part.shape()[axis] * inner;
        for (std::size_t r = 0; r < outer; ++r) {
          std::copy_n(part.data().data() + r * block, block,
                      o + r * n.shape[axis] * inner + offset);
        }
        offset += block;
      }
      break;
    }
    case OpKind::kSlice: {
      const Shape& s = in(0).shape();
      const std::size_t axis = n.ints[0];
      const std::size_t outer = prod(s, 0, axis);
      const std::size_t inner = prod(s, axis + 1, s.size());
      const std::size_t block = (n.ints[2] - n.ints[1]) * inner;
      for (std::size_t r = 0; r < outer; ++r) {
        std::copy_n(in(0).data().data() + r * s[axis] * inner + n.ints[1] * inner,
                    block, o + r * block);
      }
      break;
    }
    case OpKind::kSoftmax: {
      const std::size_t w = n.shape.back();
      const double* a = in(0).data().data();
      for (std::size_t r = 0; r < out.size() / w; ++r) {
        const double* row = a + r * w;
        double* orow = o + r * w;
        const double mx = *std::max_element(row, row + w);
        double z = 0.0;
        for (std::size_t j = 0; j < w; ++j) {
          orow[j] = std::exp(row[j] - mx);
          z += orow[j];
        }
        for (std::size_t j = 0; j < w; ++j) orow[j] /= z;
      }
      break;
    }
    case OpKind::kRmsNorm: {
      const std::size_t w = n.shape.back();
      const double* a = in(0).data().data();
      for (std::size_t r = 0; r < out.size() / w; ++r) {
        const double* row = a + r * w;
        double ms = 0.0;
        for (std::size_t j = 0; j < w; ++j) ms += row[j] * row[j];
        const double inv = 1.0 / std::sqrt(ms / static_cast<double>(w) + n.scalar);
        for (std::size_t j = 0; j < w; ++j) o[r * w + j] = row[j] * inv;
      }
      break;
    }
    case OpKind::kColumnMean: {
      const std::size_t w = n.shape[0];
      const std::size_t rows = in(0).size() / w;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) o[j] += in(0)[r * w + j];
      }
      for (std::size_t j = 0; j < w; ++j) o[j] /= static_cast<double>(rows);
      break;
    }
    case OpKind::kRsqrtFloor:
      for (std::size_t i = 0; i < out.size(); ++i) {
        o[i] = 1.0 / std::sqrt(std::max(in(0)[i], n.scalar));
      }
      break;
    case OpKind::kLog:
      for (std::size_t i = 0; i < out.size(); ++i) o[i] = std::log(in(0)[i]);
      break;
    case OpKind::kExp:
      for (std::size_t i = 0; i < out.size(); ++i) o[i] = std::exp(in(0)[i]);
      break;
    case OpKind::kSilu:
      for (std::size_t i = 0; i < out.size(); ++i) o[i] = silu_value(in(0)[i]);
      break;
    case OpKind::kTanh:
      for (std::size_t i = 0; i < out.size(); ++i) o[i] = std::tanh(in(0)[i]);
      break;
    case OpKind::kGather: {
      const Tensor& table = in(0);
      const std::size_t d = table.shape()[1];
      for (std::size_t i = 0; i < in(1).size(); ++i) {
        const std::size_t row = checked_index(in(1)[i], table.shape()[0], id);
        std::copy_n(table.data().data() + row * d, d, o + i * d);
      }
      break;
    }
    case OpKind::kTokenNll: {
      const Tensor& logits = in(0);
      const std::size_t v = logits.shape().back();
      for (std::size_t r = 0; r < out.size(); ++r) {
        const double* row = logits.data().data() + r * v;
        const std::size_t t = checked_index(in(1)[r], v, id);
        const double mx = *std::max_element(row, row + v);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        o[r] = mx + std::log(z) - row[t];
      }
      break;
    }
    case OpKind::kSum:
      for (double v : in(0).data()) o[0] += v;
      break;
    case OpKind::kMean:
      for (double v : in(0).data()) o[0] += v;
      o[0] /= static_cast<double>(std::max<std::size_t>(1, in(0).size()));
      break;
    case OpKind::kFrobeniusSq:
      for (double v : in(0).data()) o[0] += v * v;
      break;
    case OpKind::kArgmax: {
      const std::size_t w = in(0).shape().back();
      for (std::size_t r = 0; r < out.size(); ++r) {
        const double* row = in(0).data().data() + r * w;
        o[r] = static_cast<double>(std::max_element(row, row + w) - row);
      }
      break;
    }
  }
  return out;
}

// Accumulates the contribution of node `id` into the gradients of its inputs.
void backward_node(const Graph& g, std::size_t id, const std::vector<Tensor>& vals,
                   std::vector<Tensor>& grads, const std::vector<bool>& needs) {
  const Node& n = g.node(id);
  const Tensor& go = grads[id];
  auto in = [&](std::size_t k) -> const Tensor& { return vals[n.inputs[k]]; };
  auto want = [&](std::size_t k) { return needs[n.inputs[k]]; };
  auto gin = [&](std::size_t k) -> Tensor& {
    Tensor& t = grads[n.inputs[k]];
    if (t.empty() && shape_numel(g.node(n.inputs[k]).shape) > 0) {
      t = Tensor(g.node(n.inputs[k]).shape);
    }
    return t;
  };
  const double* gop = go.data().data();
  switch (n.op) {
    case OpKind::kInput:
    case OpKind::kConstant:
    case OpKind::kArgmax:
      break;
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t m = a.shape()[a.rank() - 2];
      const std::size_t k = a.shape().back();
      const std::size_t nn = b.shape().back();
      const std::size_t batch = a.size() / (m * k);
      const bool shared = b.rank() == 2;
      if (want(0)) {
        double* ga = gin(0).data().data();
        for (std::size_t bi = 0; bi < batch; ++bi) {
          gemm_nt(m, nn, k, gop + bi * m * nn,
                  b.data().data() + (shared ? 0 : bi * k * nn), ga + bi * m * k);
        }
      }
      if (want(1)) {
        double* gb = gin(1).data().data();
        for (std::size_t bi = 0; bi < batch; ++bi) {
          gemm_tn(k, m, nn, a.data().data() + bi * m * k, gop + bi * m * nn,
                  gb + (shared ? 0 : bi * k * nn));
        }
      }
      break;
    }
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t inner = b.size();
      if (want(0)) {
        double* ga = gin(0).data().data();
        for (std::size_t i = 0; i < a.size(); ++i) {
          ga[i] += n.op == OpKind::kMul ? gop[i] * b[i % inner] : gop[i];
        }
      }
      if (want(1)) {
        double* gb = gin(1).data().data();
        for (std::size_t i = 0; i < a.size(); ++i) {
          gb[i % inner] += n.op == OpKind::kAdd   ? gop[i]
                           : n.op == OpKind::kSub ? -gop[i]
                                                  : gop[i] * a[i];
        }
      }
      break;
    }
    case OpKind::kScale: {
      double* ga = gin(0).data().data();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += gop[i] * n.scalar;
      break;
    }
    case OpKind::kAddScalar:
    case OpKind::kReshape: {
      double* ga = gin(0).data().data();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += gop[i];
      break;
    }
    case OpKind::kTranspose:
    case OpKind::kPermute: {
      const auto order = n.op == OpKind::kTranspose
                             ? transpose_order(in(0).rank())
                             : n.ints;
      const auto map = permute_offsets(in(0).shape(), order);
      double* ga = gin(0).data().data();
      for (std::size_t i = 0; i < go.size(); ++i) ga[map.offsets[i]] += gop[i];
      break;
    }
    case OpKind::kBroadcastLeading: {
      double* ga = gin(0).data().data();
      const std::size_t inner = in(0).size();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i % inner] += gop[i];
      break;
    }
    case OpKind::kConcat: {
      const std::size_t axis = n.ints[0];
      const std::size_t outer = prod(n.shape, 0, axis);
      const std::size_t inner = prod(n.shape, axis + 1, n.shape.size());
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t block = in(k).shape()[axis] * inner;
        if (want(k)) {
          double* gp = gin(k).data().data();
          for (std::size_t r = 0; r < outer; ++r) {
            const double* src = gop + r * n.shape[axis] * inner + offset;
            for (std::size_t j = 0; j < block; ++j) gp[r * block + j] += src[j];
          }
        }
        offset += block;
      }
      break;
    }
    case OpKind::kSlice: {
      const Shape& s = in(0).shape();
      const std::size_t axis = n.ints[0];
      const std::size_t outer = prod(s, 0, axis);
      const std::size_t inner = prod(s, axis + 1, s.size());
      const std::size_t block = (n.ints[2] - n.ints[1]) * inner;
      double* ga = gin(0).data().data();
      for (std::size_t r = 0; r < outer; ++r) {
        double* dst = ga + r * s[axis] * inner + n.ints[1] * inner;
        for (std::size_t j = 0; j < block; ++j) dst[j] += gop[r * block + j];
      }
      break;
    }
    case OpKind::kSoftmax: {
      const Tensor& y = vals[id];
      const std::size_t w = n.shape.back();
      double* ga = gin(0).data().data();
      for (std::size_t r = 0; r < y.size() / w; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < w; ++j) dot += gop[r * w + j] * y[r * w + j];
        for (std::size_t j = 0; j < w; ++j) {
          ga[r * w + j] += y[r * w + j] * (gop[r * w + j] - dot);
        }
      }
      break;
    }
    case OpKind::kRmsNorm: {
      const Tensor& x = in(0);
      const std::size_t w = n.shape.back();
      const double dw = static_cast<double>(w);
      double* ga = gin(0).data().data();
      for (std::size_t r = 0; r < x.size() / w; ++r) {
        const double* row = x.data().data() + r * w;
        const double* grow = gop + r * w;
        double ms = 0.0;
        double dot = 0.0;
        for (std::size_t j = 0; j < w; ++j) {
          ms += row[j] * row[j];
          dot += grow[j] * row[j];
        }
        const double inv = 1.0 / std::sqrt(ms / dw + n.scalar);
        const double coeff = dot * inv * inv * inv / dw;
        for (std::size_t j = 0; j < w; ++j) {
          ga[r * w + j] += grow[j] * inv - row[j] * coeff;
        }
      }
      break;
    }
    case OpKind::kColumnMean: {
      const std::size_t w = n.shape[0];
      const std::size_t rows = in(0).size() / w;
      double* ga = gin(0).data().data();
      const double inv = 1.0 / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) ga[r * w + j] += gop[j] * inv;
      }
      break;
    }
    case OpKind::kRsqrtFloor: {
      double* ga = gin(0).data().data();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const double a = in(0)[i];
        if (a > n.scalar) ga[i] += gop[i] * -0.5 * std::pow(a, -1.5);
      }
      break;
    }
    case OpKind::kLog: {
      double* ga = gin(0).data().data();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += gop[i] / in(0)[i];
      break;
    }
    case OpKind::kExp: {
      double* ga = gin(0).data().data();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += gop[i] * vals[id][i];
      break;
    }
    case OpKind::kSilu: {
      double* ga = gin(0).data().data();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const double x = in(0)[i];
        const double s = 1.0 / (1.0 + std::exp(-x));
        ga[i] += gop[i] * s * (1.0 + x * (1.0 - s));
      }
      break;
    }
    case OpKind::kTanh: {
      double* ga = gin(0).data().data();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const double y = vals[id][i];
        ga[i] += gop[i] * (1.0 - y * y);
      }
      break;
    }
    case OpKind::kGather: {
      if (!want(0)) break;
      double* gt = gin(0).data().data();
      const std::size_t d = in(0).shape()[1];
      for (std::size_t i = 0; i < in(1).size(); ++i) {
        const auto row = static_cast<std::size_t>(in(1)[i]);
        for (std::size_t j = 0; j < d; ++j) gt[row * d + j] += gop[i * d + j];
      }
      break;
    }
    case OpKind::kTokenNll: {
      if (!want(0)) break;
      const Tensor& logits = in(0);
      const std::size_t v = logits.shape().back();
      double* gl = gin(0).data().data();
      for (std::size_t r = 0; r < go.size(); ++r) {
        const double* row = logits.data().data() + r * v;
        const double mx = *std::max_element(row, row + v);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < v; ++j) {
          gl[r * v + j] += gop[r] * std::exp(row[j] - mx) / z;
        }
        gl[r * v + static_cast<std::size_t>(in(1)[r])] -= gop[r];
      }
      break;
    }
    case OpKind::kSum: {
      double* ga = gin(0).data().data();
      for (std::size_t i = 0; i < in(0).size(); ++i) ga[i] += gop[0];
      break;
    }
    case OpKind::kMean: {
      double* ga = gin(0).data().data();
      const double s = gop[0] / static_cast<double>(std::max<std::size_t>(1, in(0).size()));
      for (std::size_t i = 0; i < in(0).size(); ++i) ga[i] += s;
      break;
    }
    case OpKind::kFrobeniusSq: {
      double* ga = gin(0).data().data();
      for (std::size_t i = 0; i < in(0).size(); ++i) ga[i] += 2.0 * gop[0] * in(0)[i];
      break;
    }
  }
}

}  // namespace

std::map<std::string, Tensor> Evaluation::outputs() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : graph_->outputs()) out[name] = values_[id];
  return out;
}

Evaluation evaluate(const Graph& graph, const Bindings& inputs) {
  Evaluation ev;
  ev.graph_ = &graph;
  ev.values_.resize(graph.size());
  const bool single = graph.precision() == Precision::kSingle;
  for (std::size_t id = 0; id < graph.size(); ++id) {
    const Node& n = graph.node(id);
    if (n.op == OpKind::kInput) {
      auto it = inputs.find(n.name);
      if (it == inputs.end()) {
        throw std::invalid_argument("node " + std::to_string(id) +
                                    ": input '" + n.name + "' is not bound");
      }
      if (it->second.shape() != n.shape) {
        throw ShapeError(id, "input '" + n.name + "' bound with shape " +
                                 shape_to_string(it->second.shape()) +
                                 ", declared " + shape_to_string(n.shape));
      }
      ev.values_[id] = it->second;
    } else if (n.op == OpKind::kConstant) {
      ev.values_[id] = n.constant;
    } else {
      ev.values_[id] = forward_node(graph, id, ev.values_);
    }
    if (single) round_to_float(ev.values_[id]);
  }
  return ev;
}

std::map<std::string, Tensor> eval(const Graph& graph, const Bindings& inputs) {
  return evaluate(graph, inputs).outputs();
}

Gradients backward(const Graph& graph, const Evaluation& evaluation, Var loss) {
  if (&loss.graph() != &graph) throw std::invalid_argument("loss from another graph");
  const Node& ln = graph.node(loss.id());
  if (shape_numel(ln.shape) != 1) {
    throw std::invalid_argument("backward: loss node " + std::to_string(loss.id()) +
                                " has shape " + shape_to_string(ln.shape) +
                                ", expected a scalar");
  }
  const std::size_t count = loss.id() + 1;
  std::vector<bool> needs(count, false);
  for (std::size_t id = 0; id < count; ++id) {
    const Node& n = graph.node(id);
    if (n.op == OpKind::kInput) {
      needs[id] = n.requires_grad;
    } else if (op_differentiable(n.op)) {
      for (std::size_t in : n.inputs) needs[id] = needs[id] || needs[in];
    }
  }
  std::vector<Tensor> grads(count);
  grads[loss.id()] = Tensor(ln.shape, 1.0);
  const bool single = graph.precision() == Precision::kSingle;
  for (std::size_t id = count; id-- > 0;) {
    if (!needs[id] || grads[id].empty()) continue;
    if (single) round_to_float(grads[id]);
    backward_node(graph, id, evaluation.values(), grads, needs);
  }
  Gradients out;
  for (std::size_t id = 0; id < graph.size(); ++id) {
    const Node& n = graph.node(id);
    if (n.op != OpKind::kInput || !n.requires_grad) continue;
    if (id < count && !grads[id].empty()) {
      out[n.name] = std::move(grads[id]);
    } else {
      out[n.name] = Tensor(n.shape, 0.0);
    }
  }
  return out;
}

GradCheckReport finite_difference_check(const Graph& graph, const Bindings& inputs,
                                        Var loss, const std::string& tensor,
                                        double tolerance, double step) {
  if (graph.precision() != Precision::kDouble) {
    throw std::invalid_argument("finite_difference_check needs a double-precision graph");
  }
  auto target = graph.find_input(tensor);
  if (!target) throw std::invalid_argument("no input named '" + tensor + "'");
  if (!graph.node(target->id()).requires_grad) {
    throw std::invalid_argument("input '" + tensor + "' is not requires_grad");
  }

  GradCheckReport report;
  // Non-differentiable ops between the checked input and the loss.
  std::vector<bool> from(graph.size(), false);
  from[target->id()] = true;
  for (std::size_t id = target->id() + 1; id < graph.size(); ++id) {
    for (std::size_t in : graph.node(id).inputs) from[id] = from[id] || from[in];
  }
  std::vector<bool> to(graph.size(), false);
  to[loss.id()] = true;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    if (!to[id]) continue;
    const Node& n = graph.node(id);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const std::size_t in = n.inputs[k];
      to[in] = true;
      const bool index_operand =
          (n.op == OpKind::kGather || n.op == OpKind::kTokenNll) && k == 1;
      if (from[in] && (!op_differentiable(n.op) || index_operand)) {
        report.nondifferentiable = true;
      }
    }
  }

  Bindings work = inputs;
  // Analytic gradient with the checked tensor forced trainable.
  Tensor analytic;
  {
    const Evaluation ev = evaluate(graph, work);
    auto grads = backward(graph, ev, loss);
    auto it = grads.find(tensor);
    if (it != grads.end()) {
      analytic = it->second;
    } else {
      analytic = Tensor(graph.node(target->id()).shape, 0.0);
    }
  }
  Tensor& x = work.at(tensor);
  double scale = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double fp = evaluate(graph, work).value(loss).item();
    x[i] = orig - step;
    const double fm = evaluate(graph, work).value(loss).item();
    x[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double diff = std::abs(numeric - analytic[i]);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
    report.max_abs_error = std::max(report.max_abs_error, diff);
    report.max_rel_error = std::max(report.max_rel_error, diff / denom);
    scale = std::max({scale, std::abs(numeric), std::abs(analytic[i])});
    ++report.coordinates;
  }
  if (scale > 0.0) report.max_scaled_error = report.max_abs_error / scale;
  report.pass = !report.nondifferentiable && report.max_rel_error <= tolerance;
  return report;
}

}  // namespace ndlab::ad
