#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "attn/common.hpp"
#include "attn/tensor.hpp"

namespace attn {

// Reverse-mode differentiation over a static DAG of dense tensors. Nodes are
// appended in construction order, which is therefore a topological order; a
// graph is immutable once built and can be shared across threads, with one
// Evaluation workspace per thread.

struct NodeId {
  std::uint32_t v = UINT32_MAX;
  bool valid() const { return v != UINT32_MAX; }
  bool operator==(const NodeId&) const = default;
};

enum class Op : std::uint8_t {
  Input,
  Constant,
  MatMul,     // (m,n)x(n,p)->(m,p); (m,n)x(n)->(m); (m)x(m,n)->(n); (m)x(m)->{1}
  Add,        // same shape, or (m,n)+(n) broadcast over rows
  Mul,        // elementwise same shape, or {1} scalar broadcast on either side
  Sigmoid,
  Tanh,
  Exp,
  Log,
  Square,
  Softmax,    // axis -1: whole vector; axis 1: each row of a matrix
  Sum,        // axis -1: all -> {1}; axis 0: column sums; axis 1: row sums
  Mean,       // same axes as Sum
  Concat,     // rank-1 operands, in order
  Slice,      // rank-1 [offset, offset+len)
  ScalarMul,  // multiply by a fixed constant
};

struct Node {
  Op op;
  Shape shape;
  std::vector<NodeId> args;
  int axis = -1;               // Softmax/Sum/Mean
  double scalar = 0.0;         // ScalarMul
  std::size_t offset = 0;      // Slice
  std::size_t len = 0;         // Slice
  std::string name;            // inputs always; other nodes optionally via label()
  Tensor cvalue;               // Constant
};

using GradientMap = std::map<std::string, Tensor>;

class Graph {
 public:
  NodeId input(std::string name, Shape shape) {
    check(!name.empty(), "input nodes require a name");
    check(by_name_.find(name) == by_name_.end(), "duplicate node name '" + name + "'");
    Node n;
    n.op = Op::Input;
    n.shape = std::move(shape);
    n.name = name;
    NodeId id = push(std::move(n));
    by_name_.emplace(std::move(name), id);
    return id;
  }

  NodeId constant(Tensor value, std::string name = "") {
    Node n;
    n.op = Op::Constant;
    n.shape = value.shape;
    n.cvalue = std::move(value);
    NodeId id = push(std::move(n));
    if (!name.empty()) label(id, std::move(name));
    return id;
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Shape& sa = at(a).shape;
    const Shape& sb = at(b).shape;
    Shape out;
    if (sa.size() == 2 && sb.size() == 2) {
      check_shape(sa[1] == sb[0], mm_err(a, b));
      out = {sa[0], sb[1]};
    } else if (sa.size() == 2 && sb.size() == 1) {
      check_shape(sa[1] == sb[0], mm_err(a, b));
      out = {sa[0]};
    } else if (sa.size() == 1 && sb.size() == 2) {
      check_shape(sa[0] == sb[0], mm_err(a, b));
      out = {sb[1]};
    } else {
      check_shape(sa[0] == sb[0], mm_err(a, b));
      out = {1};
    }
    return push_op(Op::MatMul, std::move(out), {a, b});
  }

  // Dot product of two vectors; just matmul's rank-1/rank-1 case by another name.
  NodeId dot(NodeId a, NodeId b) { return matmul(a, b); }

  NodeId add(NodeId a, NodeId b) {
    const Shape& sa = at(a).shape;
    const Shape& sb = at(b).shape;
    if (sa == sb) return push_op(Op::Add, sa, {a, b});
    if (sa.size() == 2 && sb.size() == 1 && sa[1] == sb[0])
      return push_op(Op::Add, sa, {a, b});
    if (sa.size() == 1 && sb.size() == 2 && sb[1] == sa[0])
      return push_op(Op::Add, sb, {b, a});  // canonical order: matrix first
    throw shape_error("add: incompatible shapes " + shape_str(sa) + " + " + shape_str(sb));
  }

  NodeId mul(NodeId a, NodeId b) {
    const Shape& sa = at(a).shape;
    const Shape& sb = at(b).shape;
    if (sa == sb) return push_op(Op::Mul, sa, {a, b});
    if (shape_count(sa) == 1) return push_op(Op::Mul, sb, {b, a});  // scalar second
    if (shape_count(sb) == 1) return push_op(Op::Mul, sa, {a, b});
    throw shape_error("mul: incompatible shapes " + shape_str(sa) + " * " + shape_str(sb));
  }

  NodeId sigmoid(NodeId a) { return unary(Op::Sigmoid, a); }
  NodeId tanh(NodeId a) { return unary(Op::Tanh, a); }
  NodeId exp(NodeId a) { return unary(Op::Exp, a); }
  NodeId log(NodeId a) { return unary(Op::Log, a); }
  NodeId square(NodeId a) { return unary(Op::Square, a); }

  NodeId softmax(NodeId a, int axis = -1) {
    const Shape& s = at(a).shape;
    check_shape(axis == -1 || (axis == 1 && s.size() == 2),
                "softmax: axis must be -1 (vector) or 1 (matrix rows)");
    check_shape(axis == 1 || s.size() == 1, "softmax: whole-tensor form needs rank 1");
    Node n;
    n.op = Op::Softmax;
    n.shape = s;
    n.args = {a};
    n.axis = axis;
    return push(std::move(n));
  }

  NodeId sum(NodeId a, int axis = -1) { return reduce(Op::Sum, a, axis); }
  NodeId mean(NodeId a, int axis = -1) { return reduce(Op::Mean, a, axis); }

  NodeId concat(std::span<const NodeId> parts) {
    check(parts.size() >= 2, "concat: need at least two operands");
    std::size_t total = 0;
    for (NodeId p : parts) {
      check_shape(at(p).shape.size() == 1, "concat: rank-1 operands only");
      total += at(p).shape[0];
    }
    Node n;
    n.op = Op::Concat;
    n.shape = {total};
    n.args.assign(parts.begin(), parts.end());
    return push(std::move(n));
  }

  NodeId concat(std::initializer_list<NodeId> parts) {
    return concat(std::span<const NodeId>(parts.begin(), parts.size()));
  }

  NodeId slice(NodeId a, std::size_t offset, std::size_t len) {
    const Shape& s = at(a).shape;
    check_shape(s.size() == 1, "slice: rank-1 only");
    check_shape(len > 0 && offset + len <= s[0], "slice: range out of bounds");
    Node n;
    n.op = Op::Slice;
    n.shape = {len};
    n.args = {a};
    n.offset = offset;
    n.len = len;
    return push(std::move(n));
  }

  NodeId scalar_mul(NodeId a, double c) {
    Node n;
    n.op = Op::ScalarMul;
    n.shape = at(a).shape;
    n.args = {a};
    n.scalar = c;
    return push(std::move(n));
  }

  // Convenience compositions (no new primitive ops).
  NodeId sub(NodeId a, NodeId b) { return add(a, scalar_mul(b, -1.0)); }
  NodeId affine(NodeId w, NodeId x, NodeId b) { return add(matmul(w, x), b); }

  void label(NodeId id, std::string name) {
    check(!name.empty(), "label: empty name");
    check(by_name_.find(name) == by_name_.end(), "duplicate node name '" + name + "'");
    if (at(id).name.empty()) nodes_[id.v].name = name;
    by_name_.emplace(std::move(name), id);
  }

  const Node& at(NodeId id) const {
    check(id.v < nodes_.size(), "node id out of range");
    return nodes_[id.v];
  }

  NodeId by_name(std::string_view name) const {
    auto it = by_name_.find(std::string(name));
    check(it != by_name_.end(), "no node named '" + std::string(name) + "'");
    return it->second;
  }

  bool has_node(std::string_view name) const {
    return by_name_.find(std::string(name)) != by_name_.end();
  }

  std::size_t size() const { return nodes_.size(); }

  std::vector<std::string> input_names() const {
    std::vector<std::string> out;
    for (const Node& n : nodes_)
      if (n.op == Op::Input) out.push_back(n.name);
    return out;
  }

 private:
  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  NodeId push_op(Op op, Shape shape, std::vector<NodeId> args) {
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.args = std::move(args);
    return push(std::move(n));
  }

  NodeId unary(Op op, NodeId a) { return push_op(op, at(a).shape, {a}); }

  NodeId reduce(Op op, NodeId a, int axis) {
    const Shape& s = at(a).shape;
    Shape out;
    if (axis == -1) {
      out = {1};
    } else if (s.size() == 2 && axis == 0) {
      out = {s[1]};
    } else if (s.size() == 2 && axis == 1) {
      out = {s[0]};
    } else {
      throw shape_error("reduce: axis must be -1, or 0/1 on a matrix");
    }
    Node n;
    n.op = op;
    n.shape = std::move(out);
    n.args = {a};
    n.axis = axis;
    return push(std::move(n));
  }

  std::string mm_err(NodeId a, NodeId b) const {
    return "matmul: incompatible shapes " + shape_str(at(a).shape) + " x " +
           shape_str(at(b).shape);
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> by_name_;
};

// Single-use-per-run forward/backward workspace. All buffers are allocated at
// construction (shapes are static), so repeated bind/run cycles do not touch
// the allocator. Confine each instance to one thread.
class Evaluation {
 public:
  explicit Evaluation(const Graph& g) : g_(&g) {
    const std::size_t n = g.size();
    values_.reserve(n);
    bound_.assign(n, false);
    for (std::uint32_t i = 0; i < n; ++i) {
      const Node& node = g.at(NodeId{i});
      values_.emplace_back(node.shape);
      if (node.op == Op::Constant) {
        values_.back() = node.cvalue;
        bound_[i] = true;
      }
    }
  }

  const Graph& graph() const { return *g_; }

  void bind(NodeId id, const Tensor& v) {
    const Node& n = g_->at(id);
    check(n.op == Op::Input, "bind: node is not an input");
    check_shape(v.shape == n.shape, "bind: shape mismatch for input '" + n.name +
                                        "' expected " + shape_str(n.shape) + " got " +
                                        shape_str(v.shape));
    values_[id.v].data = v.data;
    bound_[id.v] = true;
  }

  void bind(std::string_view name, const Tensor& v) { bind(g_->by_name(name), v); }

  void bind_scalar(std::string_view name, double v) {
    NodeId id = g_->by_name(name);
    check_shape(g_->at(id).shape == Shape{1}, "bind_scalar: input is not scalar");
    values_[id.v].data[0] = v;
    bound_[id.v] = true;
  }

  void bind_one_hot(std::string_view name, std::size_t index) {
    NodeId id = g_->by_name(name);
    Tensor& t = values_[id.v];
    check(g_->at(id).op == Op::Input, "bind: node is not an input");
    check_shape(index < t.size(), "bind_one_hot: index out of range");
    t.fill(0.0);
    t.data[index] = 1.0;
    bound_[id.v] = true;
  }

  void bind_fill(std::string_view name, double v) {
    NodeId id = g_->by_name(name);
    check(g_->at(id).op == Op::Input, "bind: node is not an input");
    values_[id.v].fill(v);
    bound_[id.v] = true;
  }

  // Forward pass over every node in construction (= topological) order.
  void run() {
    const std::size_t n = g_->size();
    for (std::uint32_t i = 0; i < n; ++i) {
      const Node& node = g_->at(NodeId{i});
      if (node.op == Op::Input) {
        check(bound_[i], "unbound input '" + node.name + "'");
        continue;
      }
      if (node.op == Op::Constant) continue;
      forward_node(node, values_[i]);
    }
    ran_ = true;
  }

  const Tensor& value(NodeId id) const {
    check(ran_, "value: run() has not been called");
    return values_[id.v];
  }

  const Tensor& value(std::string_view name) const { return value(g_->by_name(name)); }

  // Reverse-mode gradients of a scalar node with respect to named inputs.
  GradientMap backward(NodeId output, std::span<const std::string> wrt) {
    GradientMap out;
    for (const auto& name : wrt) {
      const Node& n = g_->at(g_->by_name(name));
      out.emplace(name, Tensor(n.shape));
    }
    backward_into(output, out, 1.0);
    return out;
  }

  GradientMap backward(std::string_view output, std::span<const std::string> wrt) {
    return backward(g_->by_name(output), wrt);
  }

  // Accumulates scale * d(output)/d(input) into `accum` for every key already
  // present in `accum`. Used to average gradients over batches and to weight
  // enumeration terms without reallocating.
  void backward_into(NodeId output, GradientMap& accum, double scale) {
    check(ran_, "backward: run() has not been called");
    const Node& out_node = g_->at(output);
    check_shape(shape_count(out_node.shape) == 1,
                "backward: output must be scalar, got " + shape_str(out_node.shape));

    if (adjoints_.empty()) {
      adjoints_.reserve(g_->size());
      for (std::uint32_t i = 0; i < g_->size(); ++i)
        adjoints_.emplace_back(g_->at(NodeId{i}).shape);
    }
    for (auto& a : adjoints_) a.fill(0.0);
    adjoints_[output.v].data[0] = 1.0;

    for (std::uint32_t i = output.v + 1; i-- > 0;) {
      const Node& node = g_->at(NodeId{i});
      if (node.op == Op::Input || node.op == Op::Constant) continue;
      backward_node(node, values_[i], adjoints_[i]);
    }

    for (auto& [name, grad] : accum) {
      NodeId id = g_->by_name(name);
      const Tensor& adj = adjoints_[id.v];
      check_shape(grad.shape == adj.shape, "backward: gradient shape mismatch for '" + name + "'");
      for (std::size_t k = 0; k < grad.size(); ++k) grad.data[k] += scale * adj.data[k];
    }
  }

 private:
  void forward_node(const Node& node, Tensor& out) {
    switch (node.op) {
      case Op::MatMul: {
        const Tensor& a = values_[node.args[0].v];
        const Tensor& b = values_[node.args[1].v];
        mm_forward(a, b, out);
        break;
      }
      case Op::Add: {
        const Tensor& a = values_[node.args[0].v];
        const Tensor& b = values_[node.args[1].v];
        if (same_shape(a, b)) {
          for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = a.data[k] + b.data[k];
        } else {
          // matrix + row vector
          const std::size_t r = a.rows(), c = a.cols();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = a.data[i * c + j] + b.data[j];
        }
        break;
      }
      case Op::Mul: {
        const Tensor& a = values_[node.args[0].v];
        const Tensor& b = values_[node.args[1].v];
        if (same_shape(a, b)) {
          for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = a.data[k] * b.data[k];
        } else {
          const double s = b.data[0];
          for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = a.data[k] * s;
        }
        break;
      }
      case Op::Sigmoid: {
        const Tensor& a = values_[node.args[0].v];
        for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = 1.0 / (1.0 + std::exp(-a.data[k]));
        break;
      }
      case Op::Tanh: {
        const Tensor& a = values_[node.args[0].v];
        for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = std::tanh(a.data[k]);
        break;
      }
      case Op::Exp: {
        const Tensor& a = values_[node.args[0].v];
        for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = std::exp(a.data[k]);
        break;
      }
      case Op::Log: {
        const Tensor& a = values_[node.args[0].v];
        for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = std::log(a.data[k]);
        break;
      }
      case Op::Square: {
        const Tensor& a = values_[node.args[0].v];
        for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = a.data[k] * a.data[k];
        break;
      }
      case Op::Softmax: {
        const Tensor& a = values_[node.args[0].v];
        if (node.axis == -1) {
          out.data = a.data;
          Tensor tmp;
          tmp.shape = out.shape;
          tmp.data.swap(out.data);
          softmax_inplace(tmp);
          out.data.swap(tmp.data);
        } else {
          const std::size_t r = a.rows(), c = a.cols();
          for (std::size_t i = 0; i < r; ++i) {
            const double* src = a.data.data() + i * c;
            double* dst = out.data.data() + i * c;
            double m = src[0];
            for (std::size_t j = 0; j < c; ++j) m = std::max(m, src[j]);
            double z = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              dst[j] = std::exp(src[j] - m);
              z += dst[j];
            }
            for (std::size_t j = 0; j < c; ++j) dst[j] /= z;
          }
        }
        break;
      }
      case Op::Sum:
      case Op::Mean: {
        const Tensor& a = values_[node.args[0].v];
        const bool is_mean = node.op == Op::Mean;
        if (node.axis == -1) {
          double s = 0.0;
          for (double v : a.data) s += v;
          out.data[0] = is_mean ? s / static_cast<double>(a.size()) : s;
        } else if (node.axis == 0) {
          const std::size_t r = a.rows(), c = a.cols();
          out.fill(0.0);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out.data[j] += a.data[i * c + j];
          if (is_mean)
            for (auto& v : out.data) v /= static_cast<double>(r);
        } else {
          const std::size_t r = a.rows(), c = a.cols();
          for (std::size_t i = 0; i < r; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += a.data[i * c + j];
            out.data[i] = is_mean ? s / static_cast<double>(c) : s;
          }
        }
        break;
      }
      case Op::Concat: {
        std::size_t off = 0;
        for (NodeId arg : node.args) {
          const Tensor& a = values_[arg.v];
          std::copy(a.data.begin(), a.data.end(), out.data.begin() + off);
          off += a.size();
        }
        break;
      }
      case Op::Slice: {
        const Tensor& a = values_[node.args[0].v];
        std::copy(a.data.begin() + node.offset, a.data.begin() + node.offset + node.len,
                  out.data.begin());
        break;
      }
      case Op::ScalarMul: {
        const Tensor& a = values_[node.args[0].v];
        for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = a.data[k] * node.scalar;
        break;
      }
      case Op::Input:
      case Op::Constant:
        break;
    }
  }

  void mm_forward(const Tensor& a, const Tensor& b, Tensor& out) {
    if (a.rank() == 2 && b.rank() == 2) {
      const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
      out.fill(0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < n; ++k) {
          const double aik = a.data[i * n + k];
          const double* brow = b.data.data() + k * p;
          double* orow = out.data.data() + i * p;
          for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
        }
    } else if (a.rank() == 2 && b.rank() == 1) {
      const std::size_t m = a.rows(), n = a.cols();
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        const double* row = a.data.data() + i * n;
        for (std::size_t k = 0; k < n; ++k) s += row[k] * b.data[k];
        out.data[i] = s;
      }
    } else if (a.rank() == 1 && b.rank() == 2) {
      const std::size_t m = b.rows(), p = b.cols();
      out.fill(0.0);
      for (std::size_t k = 0; k < m; ++k) {
        const double ak = a.data[k];
        const double* brow = b.data.data() + k * p;
        for (std::size_t j = 0; j < p; ++j) out.data[j] += ak * brow[j];
      }
    } else {
      double s = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) s += a.data[k] * b.data[k];
      out.data[0] = s;
    }
  }

  void backward_node(const Node& node, const Tensor& value, const Tensor& g) {
    switch (node.op) {
      case Op::MatMul: {
        const Tensor& a = values_[node.args[0].v];
        const Tensor& b = values_[node.args[1].v];
        Tensor& da = adjoints_[node.args[0].v];
        Tensor& db = adjoints_[node.args[1].v];
        if (a.rank() == 2 && b.rank() == 2) {
          const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t k = 0; k < n; ++k) {
              double s = 0.0;
              const double* grow = g.data.data() + i * p;
              const double* brow = b.data.data() + k * p;
              for (std::size_t j = 0; j < p; ++j) s += grow[j] * brow[j];
              da.data[i * n + k] += s;
            }
          for (std::size_t k = 0; k < n; ++k)
            for (std::size_t j = 0; j < p; ++j) {
              double s = 0.0;
              for (std::size_t i = 0; i < m; ++i) s += a.data[i * n + k] * g.data[i * p + j];
              db.data[k * p + j] += s;
            }
        } else if (a.rank() == 2 && b.rank() == 1) {
          const std::size_t m = a.rows(), n = a.cols();
          for (std::size_t i = 0; i < m; ++i) {
            const double gi = g.data[i];
            const double* arow = a.data.data() + i * n;
            double* darow = da.data.data() + i * n;
            for (std::size_t k = 0; k < n; ++k) {
              darow[k] += gi * b.data[k];
              db.data[k] += gi * arow[k];
            }
          }
        } else if (a.rank() == 1 && b.rank() == 2) {
          const std::size_t m = b.rows(), p = b.cols();
          for (std::size_t k = 0; k < m; ++k) {
            const double* brow = b.data.data() + k * p;
            double* dbrow = db.data.data() + k * p;
            double s = 0.0;
            for (std::size_t j = 0; j < p; ++j) {
              s += g.data[j] * brow[j];
              dbrow[j] += a.data[k] * g.data[j];
            }
            da.data[k] += s;
          }
        } else {
          const double g0 = g.data[0];
          for (std::size_t k = 0; k < a.size(); ++k) {
            da.data[k] += g0 * b.data[k];
            db.data[k] += g0 * a.data[k];
          }
        }
        break;
      }
      case Op::Add: {
        const Tensor& a = values_[node.args[0].v];
        const Tensor& b = values_[node.args[1].v];
        Tensor& da = adjoints_[node.args[0].v];
        Tensor& db = adjoints_[node.args[1].v];
        if (same_shape(a, b)) {
          for (std::size_t k = 0; k < g.size(); ++k) {
            da.data[k] += g.data[k];
            db.data[k] += g.data[k];
          }
        } else {
          const std::size_t r = a.rows(), c = a.cols();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              da.data[i * c + j] += g.data[i * c + j];
              db.data[j] += g.data[i * c + j];
            }
        }
        break;
      }
      case Op::Mul: {
        const Tensor& a = values_[node.args[0].v];
        const Tensor& b = values_[node.args[1].v];
        Tensor& da = adjoints_[node.args[0].v];
        Tensor& db = adjoints_[node.args[1].v];
        if (same_shape(a, b)) {
          for (std::size_t k = 0; k < g.size(); ++k) {
            da.data[k] += g.data[k] * b.data[k];
            db.data[k] += g.data[k] * a.data[k];
          }
        } else {
          const double s = b.data[0];
          double acc = 0.0;
          for (std::size_t k = 0; k < g.size(); ++k) {
            da.data[k] += g.data[k] * s;
            acc += g.data[k] * a.data[k];
          }
          db.data[0] += acc;
        }
        break;
      }
      case Op::Sigmoid: {
        Tensor& da = adjoints_[node.args[0].v];
        for (std::size_t k = 0; k < g.size(); ++k)
          da.data[k] += g.data[k] * value.data[k] * (1.0 - value.data[k]);
        break;
      }
      case Op::Tanh: {
        Tensor& da = adjoints_[node.args[0].v];
        for (std::size_t k = 0; k < g.size(); ++k)
          da.data[k] += g.data[k] * (1.0 - value.data[k] * value.data[k]);
        break;
      }
      case Op::Exp: {
        Tensor& da = adjoints_[node.args[0].v];
        for (std::size_t k = 0; k < g.size(); ++k) da.data[k] += g.data[k] * value.data[k];
        break;
      }
      case Op::Log: {
        const Tensor& a = values_[node.args[0].v];
        Tensor& da = adjoints_[node.args[0].v];
        for (std::size_t k = 0; k < g.size(); ++k) da.data[k] += g.data[k] / a.data[k];
        break;
      }
      case Op::Square: {
        const Tensor& a = values_[node.args[0].v];
        Tensor& da = adjoints_[node.args[0].v];
        for (std::size_t k = 0; k < g.size(); ++k) da.data[k] += 2.0 * g.data[k] * a.data[k];
        break;
      }
      case Op::Softmax: {
        Tensor& da = adjoints_[node.args[0].v];
        if (node.axis == -1) {
          double gy = 0.0;
          for (std::size_t k = 0; k < g.size(); ++k) gy += g.data[k] * value.data[k];
          for (std::size_t k = 0; k < g.size(); ++k)
            da.data[k] += value.data[k] * (g.data[k] - gy);
        } else {
          const std::size_t r = value.rows(), c = value.cols();
          for (std::size_t i = 0; i < r; ++i) {
            const double* y = value.data.data() + i * c;
            const double* gr = g.data.data() + i * c;
            double gy = 0.0;
            for (std::size_t j = 0; j < c; ++j) gy += gr[j] * y[j];
            double* dst = da.data.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += y[j] * (gr[j] - gy);
          }
        }
        break;
      }
      case Op::Sum:
      case Op::Mean: {
        const Tensor& a = values_[node.args[0].v];
        Tensor& da = adjoints_[node.args[0].v];
        const bool is_mean = node.op == Op::Mean;
        if (node.axis == -1) {
          const double s = is_mean ? g.data[0] / static_cast<double>(a.size()) : g.data[0];
          for (auto& v : da.data) v += s;
        } else if (node.axis == 0) {
          const std::size_t r = a.rows(), c = a.cols();
          const double inv = is_mean ? 1.0 / static_cast<double>(r) : 1.0;
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) da.data[i * c + j] += g.data[j] * inv;
        } else {
          const std::size_t r = a.rows(), c = a.cols();
          const double inv = is_mean ? 1.0 / static_cast<double>(c) : 1.0;
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) da.data[i * c + j] += g.data[i] * inv;
        }
        break;
      }
      case Op::Concat: {
        std::size_t off = 0;
        for (NodeId arg : node.args) {
          Tensor& da = adjoints_[arg.v];
          for (std::size_t k = 0; k < da.size(); ++k) da.data[k] += g.data[off + k];
          off += da.size();
        }
        break;
      }
      case Op::Slice: {
        Tensor& da = adjoints_[node.args[0].v];
        for (std::size_t k = 0; k < node.len; ++k) da.data[node.offset + k] += g.data[k];
        break;
      }
      case Op::ScalarMul: {
        Tensor& da = adjoints_[node.args[0].v];
        for (std::size_t k = 0; k < g.size(); ++k) da.data[k] += g.data[k] * node.scalar;
        break;
      }
      case Op::Input:
      case Op::Constant:
        break;
    }
  }

  const Graph* g_;
  std::vector<Tensor> values_;
  std::vector<Tensor> adjoints_;
  std::vector<bool> bound_;
  bool ran_ = false;
};

// Free-function forms of the engine entry points.

inline std::map<std::string, Tensor> evaluate(const Graph& g,
                                              const std::map<std::string, Tensor>& bindings) {
  Evaluation ev(g);
  for (const auto& [name, v] : bindings) ev.bind(name, v);
  ev.run();
  std::map<std::string, Tensor> out;
  for (std::uint32_t i = 0; i < g.size(); ++i) {
    const Node& n = g.at(NodeId{i});
    if (!n.name.empty()) out.emplace(n.name, ev.value(NodeId{i}));
  }
  return out;
}

inline GradientMap backward(const Graph& g, const std::map<std::string, Tensor>& bindings,
                            std::string_view output, std::span<const std::string> wrt) {
  Evaluation ev(g);
  for (const auto& [name, v] : bindings) ev.bind(name, v);
  ev.run();
  return ev.backward(output, wrt);
}

}  // namespace attn
