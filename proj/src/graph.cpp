#include "trgrpo/graph.hpp"

#include <sstream>
#include <utility>

namespace trgrpo {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Input: return "input";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Neg: return "neg";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Min: return "min";
    case OpKind::Clip: return "clip";
    case OpKind::StopGradient: return "stop_gradient";
    case OpKind::AddRow: return "add_row";
    case OpKind::Embed: return "embed";
    case OpKind::Pick: return "pick";
  }
  return "?";
}

namespace {

std::string describe(NodeId id, const Node& n) {
  std::ostringstream os;
  os << "node " << id << " (" << op_name(n.op);
  if (!n.label.empty()) os << " '" << n.label << "'";
  os << ")";
  return os.str();
}

bool is_scalar_shape(Eigen::Index r, Eigen::Index c) { return r == 1 && c == 1; }

// Adjoint of an elementwise binary operand that may have been broadcast from
// a scalar.
void accumulate(Array& target, const Array& contribution) {
  if (target.rows() == 1 && target.cols() == 1 && contribution.size() != 1) {
    target(0, 0) += contribution.sum();
  } else {
    target += contribution;
  }
}

}  // namespace

GraphError::GraphError(NodeId node, std::string label, const std::string& what)
    : std::runtime_error(what), node_(node), label_(std::move(label)) {}

Eigen::Index Expr::rows() const { return builder_->node(id_).rows; }
Eigen::Index Expr::cols() const { return builder_->node(id_).cols; }

Expr& Expr::named(const std::string& label) {
  Node& n = builder_->node(id_);
  if (n.op != OpKind::Input) n.label = label;
  return *this;
}

Expr GraphBuilder::push(Node n) {
  nodes_.push_back(std::move(n));
  return Expr(this, static_cast<NodeId>(nodes_.size() - 1));
}

void GraphBuilder::shape_error(OpKind op, Expr a, Expr b, const std::string& detail) const {
  std::ostringstream os;
  os << "shape mismatch building node " << nodes_.size() << " (" << op_name(op) << "): ";
  os << "lhs " << a.rows() << "x" << a.cols();
  if (b.id() >= 0) os << ", rhs " << b.rows() << "x" << b.cols();
  if (!detail.empty()) os << "; " << detail;
  throw GraphError(static_cast<NodeId>(nodes_.size()), op_name(op), os.str());
}

Expr GraphBuilder::input(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (rows <= 0 || cols <= 0) throw std::invalid_argument("input '" + name + "': shape must be positive");
  if (!input_names_.insert(name).second) throw std::invalid_argument("duplicate input name '" + name + "'");
  Node n;
  n.op = OpKind::Input;
  n.rows = rows;
  n.cols = cols;
  n.requires_grad = true;
  n.label = name;
  return push(std::move(n));
}

Expr GraphBuilder::constant(Array value) {
  if (value.size() == 0) throw std::invalid_argument("constant: empty array");
  if (!value.allFinite()) throw std::invalid_argument("constant: non-finite value");
  Node n;
  n.op = OpKind::Constant;
  n.rows = value.rows();
  n.cols = value.cols();
  n.constant = std::make_shared<const Array>(std::move(value));
  return push(std::move(n));
}

Expr GraphBuilder::scalar(double value) { return constant(Array::Constant(1, 1, value)); }

Expr GraphBuilder::unary(OpKind op, Expr a) {
  Node n;
  n.op = op;
  n.lhs = a.id();
  n.rows = a.rows();
  n.cols = a.cols();
  n.requires_grad = node(a.id()).requires_grad && op != OpKind::StopGradient;
  switch (op) {
    case OpKind::Transpose:
      n.rows = a.cols();
      n.cols = a.rows();
      break;
    case OpKind::Sum:
    case OpKind::Mean:
      n.rows = n.cols = 1;
      break;
    case OpKind::Neg:
    case OpKind::Exp:
    case OpKind::Log:
    case OpKind::Tanh:
    case OpKind::Sigmoid:
    case OpKind::Softmax:
    case OpKind::LogSoftmax:
    case OpKind::StopGradient:
      break;
    default:
      throw std::invalid_argument(std::string("unary: not a unary op: ") + op_name(op));
  }
  return push(std::move(n));
}

Expr GraphBuilder::binary(OpKind op, Expr a, Expr b) {
  Node n;
  n.op = op;
  n.lhs = a.id();
  n.rhs = b.id();
  n.requires_grad = node(a.id()).requires_grad || node(b.id()).requires_grad;
  switch (op) {
    case OpKind::MatMul:
      if (a.cols() != b.rows()) shape_error(op, a, b, "inner dimensions differ");
      n.rows = a.rows();
      n.cols = b.cols();
      break;
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul:
      if (a.rows() == b.rows() && a.cols() == b.cols()) {
        n.rows = a.rows();
        n.cols = a.cols();
      } else if (is_scalar_shape(a.rows(), a.cols())) {
        n.rows = b.rows();
        n.cols = b.cols();
      } else if (is_scalar_shape(b.rows(), b.cols())) {
        n.rows = a.rows();
        n.cols = a.cols();
      } else {
        shape_error(op, a, b, "only scalar-with-array broadcasting is supported");
      }
      break;
    case OpKind::Min:
      if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b, "operands must match");
      n.rows = a.rows();
      n.cols = a.cols();
      break;
    case OpKind::AddRow:
      if (b.rows() != 1 || b.cols() != a.cols()) shape_error(op, a, b, "row operand must be 1 x cols");
      n.rows = a.rows();
      n.cols = a.cols();
      break;
    default:
      throw std::invalid_argument(std::string("binary: not a binary op: ") + op_name(op));
  }
  return push(std::move(n));
}

Expr GraphBuilder::clip(Expr a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clip: lower bound exceeds upper bound");
  Node n;
  n.op = OpKind::Clip;
  n.lhs = a.id();
  n.rows = a.rows();
  n.cols = a.cols();
  n.lo = lo;
  n.hi = hi;
  n.requires_grad = node(a.id()).requires_grad;
  return push(std::move(n));
}

Expr GraphBuilder::embed(Expr table, IndexMatrix indices) {
  if (indices.size() == 0) shape_error(OpKind::Embed, table, Expr(), "empty index matrix");
  if ((indices.array() >= table.rows()).any() || (indices.array() < kPadIndex).any())
    shape_error(OpKind::Embed, table, Expr(), "index out of range");
  Node n;
  n.op = OpKind::Embed;
  n.lhs = table.id();
  n.rows = indices.rows();
  n.cols = indices.cols() * table.cols();
  n.requires_grad = node(table.id()).requires_grad;
  n.indices = std::make_shared<const IndexMatrix>(std::move(indices));
  return push(std::move(n));
}

Expr GraphBuilder::pick(Expr a, std::vector<int> columns) {
  if (static_cast<Eigen::Index>(columns.size()) != a.rows())
    shape_error(OpKind::Pick, a, Expr(), "need exactly one column index per row");
  IndexMatrix idx(static_cast<Eigen::Index>(columns.size()), 1);
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i] < 0 || columns[i] >= a.cols()) shape_error(OpKind::Pick, a, Expr(), "column index out of range");
    idx(static_cast<Eigen::Index>(i), 0) = columns[i];
  }
  Node n;
  n.op = OpKind::Pick;
  n.lhs = a.id();
  n.rows = a.rows();
  n.cols = 1;
  n.requires_grad = node(a.id()).requires_grad;
  n.indices = std::make_shared<const IndexMatrix>(std::move(idx));
  return push(std::move(n));
}

Graph GraphBuilder::build(Expr root) const {
  if (root.id() < 0 || static_cast<std::size_t>(root.id()) >= nodes_.size())
    throw std::invalid_argument("build: root does not belong to this builder");
  Graph g;
  g.nodes_ = std::make_shared<const std::vector<Node>>(nodes_.begin(), nodes_.begin() + root.id() + 1);
  g.root_ = root.id();
  return g;
}

std::vector<std::string> Graph::input_names() const {
  std::vector<std::string> names;
  for (const Node& n : *nodes_)
    if (n.op == OpKind::Input) names.push_back(n.label);
  return names;
}

Evaluation Graph::evaluate(const Bindings& bindings) const {
  if (!nodes_) throw std::logic_error("evaluate: empty graph");
  Evaluation ev;
  ev.graph_ = *this;
  const auto& nodes = *nodes_;
  ev.values_.resize(nodes.size());

  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    const auto id = static_cast<NodeId>(i);
    Array& out = ev.values_[i];
    auto in = [&](NodeId k) -> const Array& { return ev.values_[static_cast<std::size_t>(k)]; };
    switch (n.op) {
      case OpKind::Input: {
        auto it = bindings.find(n.label);
        if (it == bindings.end()) throw GraphError(id, n.label, "unbound input '" + n.label + "'");
        if (it->second.rows() != n.rows || it->second.cols() != n.cols) {
          std::ostringstream os;
          os << "shape mismatch at " << describe(id, n) << ": declared " << n.rows << "x" << n.cols << ", bound "
             << it->second.rows() << "x" << it->second.cols();
          throw GraphError(id, n.label, os.str());
        }
        out = it->second;
        ev.inputs_[n.label] = id;
        break;
      }
      case OpKind::Constant: out = *n.constant; break;
      case OpKind::MatMul: out.noalias() = in(n.lhs) * in(n.rhs); break;
      case OpKind::Transpose: out = in(n.lhs).transpose(); break;
      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::Mul: {
        const Array& a = in(n.lhs);
        const Array& b = in(n.rhs);
        const bool sa = a.size() == 1 && b.size() != 1;
        const bool sb = b.size() == 1 && a.size() != 1;
        if (n.op == OpKind::Add) {
          out = sa ? Array((b.array() + a(0, 0)).matrix()) : sb ? Array((a.array() + b(0, 0)).matrix()) : Array(a + b);
        } else if (n.op == OpKind::Sub) {
          out = sa ? Array((a(0, 0) - b.array()).matrix()) : sb ? Array((a.array() - b(0, 0)).matrix()) : Array(a - b);
        } else {
          out = sa ? Array(a(0, 0) * b) : sb ? Array(a * b(0, 0)) : Array(a.cwiseProduct(b));
        }
        break;
      }
      case OpKind::Neg: out = -in(n.lhs); break;
      case OpKind::Exp: out = in(n.lhs).array().exp().matrix(); break;
      case OpKind::Log: out = in(n.lhs).array().log().matrix(); break;
      case OpKind::Tanh: out = in(n.lhs).array().tanh().matrix(); break;
      case OpKind::Sigmoid: out = (1.0 / (1.0 + (-in(n.lhs).array()).exp())).matrix(); break;
      case OpKind::Softmax:
      case OpKind::LogSoftmax: {
        const Array& a = in(n.lhs);
        out.resize(a.rows(), a.cols());
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
          const double m = a.row(r).maxCoeff();
          const auto shifted = (a.row(r).array() - m).eval();
          const double z = shifted.exp().sum();
          if (n.op == OpKind::Softmax)
            out.row(r) = (shifted.exp() / z).matrix();
          else
            out.row(r) = (shifted - std::log(z)).matrix();
        }
        break;
      }
      case OpKind::Sum: out = Array::Constant(1, 1, in(n.lhs).sum()); break;
      case OpKind::Mean: out = Array::Constant(1, 1, in(n.lhs).mean()); break;
      case OpKind::Min: {
        const Array& a = in(n.lhs);
        const Array& b = in(n.rhs);
        out = (b.array() < a.array()).select(b, a);
        break;
      }
      case OpKind::Clip: out = in(n.lhs).cwiseMax(n.lo).cwiseMin(n.hi); break;
      case OpKind::StopGradient: out = in(n.lhs); break;
      case OpKind::AddRow: out = in(n.lhs).rowwise() + in(n.rhs).row(0); break;
      case OpKind::Embed: {
        const Array& table = in(n.lhs);
        const IndexMatrix& idx = *n.indices;
        const Eigen::Index e = table.cols();
        out = Array::Zero(n.rows, n.cols);
        for (Eigen::Index t = 0; t < idx.rows(); ++t)
          for (Eigen::Index c = 0; c < idx.cols(); ++c)
            if (idx(t, c) != kPadIndex) out.block(t, c * e, 1, e) = table.row(idx(t, c));
        break;
      }
      case OpKind::Pick: {
        const Array& a = in(n.lhs);
        const IndexMatrix& idx = *n.indices;
        out.resize(a.rows(), 1);
        for (Eigen::Index t = 0; t < a.rows(); ++t) out(t, 0) = a(t, idx(t, 0));
        break;
      }
    }
    if (!out.allFinite()) throw GraphError(id, n.label, "non-finite value at " + describe(id, n));
  }
  return ev;
}

double Evaluation::scalar() const {
  const Array& v = value();
  if (v.size() != 1) throw std::logic_error("scalar(): root is not a scalar");
  return v(0, 0);
}

Gradients Evaluation::gradient() const {
  std::set<std::string> all;
  for (const auto& [name, id] : inputs_) all.insert(name);
  return gradient(all);
}

Gradients Evaluation::gradient(const std::set<std::string>& wrt) const {
  const auto& nodes = *graph_.nodes_;
  const NodeId root = graph_.root();
  const Node& rn = nodes[static_cast<std::size_t>(root)];
  if (rn.rows != 1 || rn.cols != 1) {
    std::ostringstream os;
    os << "gradient: root " << describe(root, rn) << " is " << rn.rows << "x" << rn.cols << ", expected scalar";
    throw GraphError(root, rn.label, os.str());
  }
  for (const auto& name : wrt)
    if (!inputs_.count(name)) throw std::invalid_argument("gradient: unknown input '" + name + "'");

  std::vector<Array> adj(nodes.size());
  std::vector<char> live(nodes.size(), 0);
  auto seed = [&](NodeId k) -> Array& {
    const auto u = static_cast<std::size_t>(k);
    if (!live[u]) {
      adj[u] = Array::Zero(nodes[u].rows, nodes[u].cols);
      live[u] = 1;
    }
    return adj[u];
  };
  seed(root)(0, 0) = 1.0;
  auto val = [&](NodeId k) -> const Array& { return values_[static_cast<std::size_t>(k)]; };
  auto wants = [&](NodeId k) { return k >= 0 && nodes[static_cast<std::size_t>(k)].requires_grad; };

  for (NodeId i = root; i >= 0; --i) {
    const auto u = static_cast<std::size_t>(i);
    if (!live[u] || !nodes[u].requires_grad) continue;
    const Node& n = nodes[u];
    const Array& g = adj[u];
    const Array& y = values_[u];
    switch (n.op) {
      case OpKind::Input:
      case OpKind::Constant:
      case OpKind::StopGradient:
        break;
      case OpKind::MatMul:
        if (wants(n.lhs)) seed(n.lhs).noalias() += g * val(n.rhs).transpose();
        if (wants(n.rhs)) seed(n.rhs).noalias() += val(n.lhs).transpose() * g;
        break;
      case OpKind::Transpose:
        if (wants(n.lhs)) seed(n.lhs) += g.transpose();
        break;
      case OpKind::Add:
        if (wants(n.lhs)) accumulate(seed(n.lhs), g);
        if (wants(n.rhs)) accumulate(seed(n.rhs), g);
        break;
      case OpKind::Sub:
        if (wants(n.lhs)) accumulate(seed(n.lhs), g);
        if (wants(n.rhs)) accumulate(seed(n.rhs), -g);
        break;
      case OpKind::Mul: {
        const Array& a = val(n.lhs);
        const Array& b = val(n.rhs);
        auto scaled = [&](const Array& other) -> Array {
          return other.size() == 1 ? Array(g * other(0, 0)) : Array(g.cwiseProduct(other));
        };
        if (wants(n.lhs)) accumulate(seed(n.lhs), scaled(b));
        if (wants(n.rhs)) accumulate(seed(n.rhs), scaled(a));
        break;
      }
      case OpKind::Neg: seed(n.lhs) -= g; break;
      case OpKind::Exp: seed(n.lhs) += g.cwiseProduct(y); break;
      case OpKind::Log: seed(n.lhs) += g.cwiseQuotient(val(n.lhs)); break;
      case OpKind::Tanh: seed(n.lhs) += (g.array() * (1.0 - y.array().square())).matrix(); break;
      case OpKind::Sigmoid: seed(n.lhs) += (g.array() * y.array() * (1.0 - y.array())).matrix(); break;
      case OpKind::Softmax: {
        Array& t = seed(n.lhs);
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
          const double dot = g.row(r).dot(y.row(r));
          t.row(r) += (y.row(r).array() * (g.row(r).array() - dot)).matrix();
        }
        break;
      }
      case OpKind::LogSoftmax: {
        Array& t = seed(n.lhs);
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
          const double total = g.row(r).sum();
          t.row(r) += (g.row(r).array() - y.row(r).array().exp() * total).matrix();
        }
        break;
      }
      case OpKind::Sum: seed(n.lhs).array() += g(0, 0); break;
      case OpKind::Mean: {
        Array& t = seed(n.lhs);
        t.array() += g(0, 0) / static_cast<double>(t.size());
        break;
      }
      case OpKind::Min: {
        const auto second = (val(n.rhs).array() < val(n.lhs).array());
        if (wants(n.lhs)) seed(n.lhs) += second.select(0.0, g.array()).matrix();
        if (wants(n.rhs)) seed(n.rhs) += second.select(g.array(), 0.0).matrix();
        break;
      }
      case OpKind::Clip: {
        const auto& x = val(n.lhs).array();
        seed(n.lhs) += ((x >= n.lo) && (x <= n.hi)).select(g.array(), 0.0).matrix();
        break;
      }
      case OpKind::AddRow:
        if (wants(n.lhs)) seed(n.lhs) += g;
        if (wants(n.rhs)) seed(n.rhs) += g.colwise().sum();
        break;
      case OpKind::Embed: {
        Array& t = seed(n.lhs);
        const IndexMatrix& idx = *n.indices;
        const Eigen::Index e = t.cols();
        for (Eigen::Index r = 0; r < idx.rows(); ++r)
          for (Eigen::Index c = 0; c < idx.cols(); ++c)
            if (idx(r, c) != kPadIndex) t.row(idx(r, c)) += g.block(r, c * e, 1, e);
        break;
      }
      case OpKind::Pick: {
        Array& t = seed(n.lhs);
        const IndexMatrix& idx = *n.indices;
        for (Eigen::Index r = 0; r < idx.rows(); ++r) t(r, idx(r, 0)) += g(r, 0);
        break;
      }
    }
  }

  Gradients out;
  for (const auto& name : wrt) {
    const NodeId id = inputs_.at(name);
    const auto u = static_cast<std::size_t>(id);
    out[name] = live[u] ? adj[u] : Array::Zero(nodes[u].rows, nodes[u].cols);
  }
  return out;
}

Expr matmul(Expr a, Expr b) { return a.builder().binary(OpKind::MatMul, a, b); }
Expr transpose(Expr a) { return a.builder().unary(OpKind::Transpose, a); }
Expr exp(Expr a) { return a.builder().unary(OpKind::Exp, a); }
Expr log(Expr a) { return a.builder().unary(OpKind::Log, a); }
Expr tanh(Expr a) { return a.builder().unary(OpKind::Tanh, a); }
Expr sigmoid(Expr a) { return a.builder().unary(OpKind::Sigmoid, a); }
Expr softmax(Expr a) { return a.builder().unary(OpKind::Softmax, a); }
Expr log_softmax(Expr a) { return a.builder().unary(OpKind::LogSoftmax, a); }
Expr sum(Expr a) { return a.builder().unary(OpKind::Sum, a); }
Expr mean(Expr a) { return a.builder().unary(OpKind::Mean, a); }
Expr min(Expr a, Expr b) { return a.builder().binary(OpKind::Min, a, b); }
Expr clip(Expr a, double lo, double hi) { return a.builder().clip(a, lo, hi); }
Expr stop_gradient(Expr a) { return a.builder().unary(OpKind::StopGradient, a); }
Expr add_row(Expr a, Expr row) { return a.builder().binary(OpKind::AddRow, a, row); }
Expr embed(Expr table, IndexMatrix indices) { return table.builder().embed(table, std::move(indices)); }
Expr pick(Expr a, std::vector<int> columns) { return a.builder().pick(a, std::move(columns)); }

Expr operator+(Expr a, Expr b) { return a.builder().binary(OpKind::Add, a, b); }
Expr operator-(Expr a, Expr b) { return a.builder().binary(OpKind::Sub, a, b); }
Expr operator*(Expr a, Expr b) { return a.builder().binary(OpKind::Mul, a, b); }
Expr operator-(Expr a) { return a.builder().unary(OpKind::Neg, a); }
Expr operator+(Expr a, double b) { return a + a.builder().scalar(b); }
Expr operator-(Expr a, double b) { return a - a.builder().scalar(b); }
Expr operator*(double a, Expr b) { return b.builder().scalar(a) * b; }
Expr operator*(Expr a, double b) { return a * a.builder().scalar(b); }

}  // namespace trgrpo
