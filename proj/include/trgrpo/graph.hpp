#pragma once

#include "trgrpo/linalg.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace trgrpo {

// Reverse-mode differentiation over dense row-major arrays.
//
// A GraphBuilder records op nodes in construction order, which is a valid
// topological order. build() freezes the nodes into an immutable Graph.
// Graph::evaluate() returns an Evaluation holding its own value workspace;
// Evaluation::gradient() runs the backward sweep into a fresh adjoint buffer,
// so repeated calls and concurrent evaluations of one Graph are independent.

using Array = Matrix;
using NodeId = std::int32_t;
inline constexpr int kPadIndex = -1;

enum class OpKind : std::uint8_t {
  Input,
  Constant,
  MatMul,
  Transpose,
  Add,
  Sub,
  Mul,
  Neg,
  Exp,
  Log,
  Tanh,
  Sigmoid,
  Softmax,     // over the last axis (each row)
  LogSoftmax,  // over the last axis (each row)
  Sum,
  Mean,
  Min,  // elementwise; ties select the first argument
  Clip,
  StopGradient,
  AddRow,  // matrix plus a row vector added to every row
  Embed,   // window lookup: row t is the concatenation of table rows idx(t, 0..C-1)
  Pick,    // one entry per row: out(t) = a(t, idx(t))
};

const char* op_name(OpKind op);

class GraphError : public std::runtime_error {
 public:
  GraphError(NodeId node, std::string label, const std::string& what);
  NodeId node() const { return node_; }
  const std::string& label() const { return label_; }

 private:
  NodeId node_;
  std::string label_;
};

struct Node {
  OpKind op = OpKind::Constant;
  NodeId lhs = -1;
  NodeId rhs = -1;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  double lo = 0.0;
  double hi = 0.0;
  bool requires_grad = false;
  std::string label;  // input name for Input nodes, optional tag otherwise
  std::shared_ptr<const Array> constant;
  std::shared_ptr<const IndexMatrix> indices;
};

class GraphBuilder;

/// Handle to a node under construction; the operators below build new nodes
/// on the same builder.
class Expr {
 public:
  Expr() = default;
  Expr(GraphBuilder* builder, NodeId id) : builder_(builder), id_(id) {}
  NodeId id() const { return id_; }
  GraphBuilder& builder() const { return *builder_; }
  Eigen::Index rows() const;
  Eigen::Index cols() const;
  bool is_scalar() const { return rows() == 1 && cols() == 1; }
  Expr& named(const std::string& label);

 private:
  GraphBuilder* builder_ = nullptr;
  NodeId id_ = -1;
};

class Graph;

class GraphBuilder {
 public:
  Expr input(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  Expr constant(Array value);
  Expr scalar(double value);

  Expr unary(OpKind op, Expr a);
  Expr binary(OpKind op, Expr a, Expr b);
  Expr clip(Expr a, double lo, double hi);
  Expr embed(Expr table, IndexMatrix indices);
  Expr pick(Expr a, std::vector<int> columns);

  const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  Node& node(NodeId id) { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }

  /// Freezes the nodes up to and including `root`.
  Graph build(Expr root) const;

 private:
  Expr push(Node n);
  [[noreturn]] void shape_error(OpKind op, Expr a, Expr b, const std::string& detail) const;

  std::vector<Node> nodes_;
  std::set<std::string> input_names_;
};

using Bindings = std::map<std::string, Array>;
using Gradients = std::map<std::string, Array>;

class Evaluation;

class Graph {
 public:
  Graph() = default;

  /// Forward pass. Every Input must be bound with its declared shape; any
  /// non-finite intermediate raises a GraphError naming the node.
  Evaluation evaluate(const Bindings& bindings) const;

  NodeId root() const { return root_; }
  std::size_t size() const { return nodes_ ? nodes_->size() : 0; }
  const Node& node(NodeId id) const { return (*nodes_)[static_cast<std::size_t>(id)]; }
  std::vector<std::string> input_names() const;

 private:
  friend class GraphBuilder;
  friend class Evaluation;
  std::shared_ptr<const std::vector<Node>> nodes_;
  NodeId root_ = -1;
};

class Evaluation {
 public:
  const Array& value() const { return values_.at(static_cast<std::size_t>(graph_.root())); }
  const Array& value(Expr e) const { return value(e.id()); }
  const Array& value(NodeId id) const { return values_.at(static_cast<std::size_t>(id)); }
  double scalar() const;

  /// d(root)/d(input) for each requested input name. Root must be scalar.
  Gradients gradient(const std::set<std::string>& wrt) const;
  /// Gradient with respect to every input of the graph.
  Gradients gradient() const;

 private:
  friend class Graph;
  Graph graph_;
  std::vector<Array> values_;
  std::map<std::string, NodeId> inputs_;
};

// Expression-building free functions.
Expr matmul(Expr a, Expr b);
Expr transpose(Expr a);
Expr exp(Expr a);
Expr log(Expr a);
Expr tanh(Expr a);
Expr sigmoid(Expr a);
Expr softmax(Expr a);
Expr log_softmax(Expr a);
Expr sum(Expr a);
Expr mean(Expr a);
Expr min(Expr a, Expr b);
Expr clip(Expr a, double lo, double hi);
Expr stop_gradient(Expr a);
Expr add_row(Expr a, Expr row);
Expr embed(Expr table, IndexMatrix indices);
Expr pick(Expr a, std::vector<int> columns);

Expr operator+(Expr a, Expr b);
Expr operator-(Expr a, Expr b);
Expr operator*(Expr a, Expr b);  // elementwise, or scalar with array
Expr operator-(Expr a);
Expr operator+(Expr a, double b);
Expr operator-(Expr a, double b);
Expr operator*(double a, Expr b);
Expr operator*(Expr a, double b);

}  // namespace trgrpo
