#pragma once

/**
 * @file diffgraph.hpp
 * @brief Matrix-valued reverse-mode differentiation with differentiable gradients.
 *
 * A Graph records operations on matrices symbolically; values are produced by
 * evaluate() once every input and parameter leaf has been bound. gradient()
 * does not compute numbers: it appends the backward pass to the same graph as
 * ordinary nodes. The returned gradient nodes can therefore be combined into
 * further expressions (norms, angles, losses) and differentiated again, which
 * is what penalties on input gradients need.
 *
 * Rows of a matrix usually index samples in a batch. Shapes are inferred at
 * construction time; a dimension may be left dynamic (kDynamic) so that one
 * graph serves minibatches and full evaluation sets alike.
 */

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "aml/error.hpp"
#include "aml/matrix.hpp"

namespace aml::dg {

inline constexpr std::size_t kDynamic = std::numeric_limits<std::size_t>::max();

struct Shape {
  std::size_t rows = kDynamic;
  std::size_t cols = kDynamic;
  bool is_scalar() const { return rows == 1 && cols == 1; }
};

enum class Op : std::uint8_t {
  Const,
  Input,
  Parameter,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  AddScalar,
  Tanh,
  Exp,
  Log,
  Abs,
  Sqrt,
  Sign,     // zero derivative; sign(0) = 0
  InRange,  // zero derivative; 1 where lo <= x <= hi
  Clamp,
  MatMul,
  Transpose,
  Sum,
  Mean,
  SumRows,          // (r x c) -> (1 x c)
  SumCols,          // (r x c) -> (r x 1)
  BroadcastScalar,  // (1 x 1) -> shape of ref
  SpreadMean,       // (1 x 1) -> shape of ref, divided by element count
  BroadcastRows,    // (1 x c) -> (ref.rows x c)
  BroadcastCols,    // (r x 1) -> (r x ref.cols)
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Const: return "const";
    case Op::Input: return "input";
    case Op::Parameter: return "parameter";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Tanh: return "tanh";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Abs: return "abs";
    case Op::Sqrt: return "sqrt";
    case Op::Sign: return "sign";
    case Op::InRange: return "in_range";
    case Op::Clamp: return "clamp";
    case Op::MatMul: return "dot";
    case Op::Transpose: return "transpose";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::SumRows: return "sum_rows";
    case Op::SumCols: return "sum_cols";
    case Op::BroadcastScalar: return "broadcast_scalar";
    case Op::SpreadMean: return "spread_mean";
    case Op::BroadcastRows: return "broadcast_rows";
    case Op::BroadcastCols: return "broadcast_cols";
  }
  return "?";
}

class Graph;

/// Handle to a node. Only meaningful together with the Graph that created it.
class Var {
 public:
  Var() = default;
  Graph* graph() const { return graph_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t size() const { return nodes_.size(); }
  Op op(Var v) const { return node(v).op; }
  Shape shape(Var v) const { return node(v).shape; }

  // ---- leaves -----------------------------------------------------------

  Var constant(Matrix value) {
    Shape s{value.rows(), value.cols()};
    Var v = push(Op::Const, s, {});
    auto& n = nodes_[v.id_];
    n.value = std::move(value);
    n.bound = true;
    return v;
  }
  Var constant(double value) { return constant(Matrix::scalar(value)); }

  Var input(Shape shape, std::string name = {}) { return leaf(Op::Input, shape, std::move(name)); }
  Var parameter(Shape shape, std::string name = {}) {
    return leaf(Op::Parameter, shape, std::move(name));
  }

  void bind(Var leaf, Matrix value) {
    auto& n = node(leaf);
    if (n.op != Op::Input && n.op != Op::Parameter)
      throw StructuralError("bind: node is not an input or parameter");
    if (!fits(n.shape.rows, value.rows()) || !fits(n.shape.cols, value.cols()))
      throw ContractError("bind: value shape " + value.shape_string() + " does not match leaf '" +
                          n.name + "'");
    n.value = std::move(value);
    n.bound = true;
  }

  // ---- operations -------------------------------------------------------

  Var add(Var a, Var b) { return push(Op::Add, same(a, b, "add"), {a, b}); }
  Var sub(Var a, Var b) { return push(Op::Sub, same(a, b, "sub"), {a, b}); }
  Var mul(Var a, Var b) { return push(Op::Mul, same(a, b, "mul"), {a, b}); }
  Var div(Var a, Var b) { return push(Op::Div, same(a, b, "div"), {a, b}); }
  Var neg(Var a) { return push(Op::Neg, shape(a), {a}); }
  Var scale(Var a, double c) { return push(Op::Scale, shape(a), {a}, c); }
  Var add_scalar(Var a, double c) { return push(Op::AddScalar, shape(a), {a}, c); }
  Var tanh(Var a) { return push(Op::Tanh, shape(a), {a}); }
  Var exp(Var a) { return push(Op::Exp, shape(a), {a}); }
  Var log(Var a) { return push(Op::Log, shape(a), {a}); }
  Var abs(Var a) { return push(Op::Abs, shape(a), {a}); }
  Var sqrt(Var a) { return push(Op::Sqrt, shape(a), {a}); }
  Var sign(Var a) { return push(Op::Sign, shape(a), {a}); }
  Var in_range(Var a, double lo, double hi) { return push(Op::InRange, shape(a), {a}, lo, hi); }
  Var clamp(Var a, double lo, double hi) { return push(Op::Clamp, shape(a), {a}, lo, hi); }

  /// Matrix product; the batched generalisation of a dot product.
  Var dot(Var a, Var b) {
    Shape sa = shape(a), sb = shape(b);
    if (!compatible(sa.cols, sb.rows)) throw ContractError("dot: inner dimensions differ");
    return push(Op::MatMul, Shape{sa.rows, sb.cols}, {a, b});
  }
  Var transpose(Var a) { return push(Op::Transpose, Shape{shape(a).cols, shape(a).rows}, {a}); }
  Var sum(Var a) { return push(Op::Sum, Shape{1, 1}, {a}); }
  Var mean(Var a) { return push(Op::Mean, Shape{1, 1}, {a}); }
  Var sum_rows(Var a) { return push(Op::SumRows, Shape{1, shape(a).cols}, {a}); }
  Var sum_cols(Var a) { return push(Op::SumCols, Shape{shape(a).rows, 1}, {a}); }

  Var broadcast_scalar(Var s, Var like) {
    require_scalar(s, "broadcast_scalar");
    return push(Op::BroadcastScalar, shape(like), {s, like});
  }
  Var spread_mean(Var s, Var like) {
    require_scalar(s, "spread_mean");
    return push(Op::SpreadMean, shape(like), {s, like});
  }
  Var broadcast_rows(Var v, Var like) {
    if (!compatible(shape(v).rows, 1)) throw ContractError("broadcast_rows: expected a row vector");
    return push(Op::BroadcastRows, Shape{shape(like).rows, shape(v).cols}, {v, like});
  }
  Var broadcast_cols(Var v, Var like) {
    if (!compatible(shape(v).cols, 1)) throw ContractError("broadcast_cols: expected a column vector");
    return push(Op::BroadcastCols, Shape{shape(v).rows, shape(like).cols}, {v, like});
  }

  /// Row-wise inner product of two equally shaped matrices, (r x c) -> (r x 1).
  Var row_dot(Var a, Var b) { return sum_cols(mul(a, b)); }

  // ---- evaluation ---------------------------------------------------------

  /// Computes every node the roots depend on. Throws StructuralError if a
  /// required leaf is unbound.
  void evaluate(std::span<const Var> roots) {
    if (roots.empty()) return;
    std::uint32_t top = 0;
    for (Var r : roots) {
      check_owned(r);
      top = std::max(top, r.id_);
    }
    needed_.assign(top + 1, 0);
    for (Var r : roots) needed_[r.id_] = 1;
    for (std::uint32_t i = top + 1; i-- > 0;) {
      if (!needed_[i]) continue;
      const Node& n = nodes_[i];
      for (std::uint8_t k = 0; k < n.arity; ++k) needed_[n.in[k]] = 1;
    }
    ++epoch_;
    for (std::uint32_t i = 0; i <= top; ++i) {
      if (!needed_[i]) continue;
      forward(i);
      nodes_[i].epoch = epoch_;
    }
  }

  double evaluate(Var root) {
    const Var roots[] = {root};
    evaluate(roots);
    const Matrix& m = value(root);
    if (m.size() != 1) throw ContractError("evaluate: root is not scalar-valued");
    return m[0];
  }

  /// Value computed by the most recent evaluate() call.
  const Matrix& value(Var v) const {
    const Node& n = node(v);
    if (n.op == Op::Const || ((n.op == Op::Input || n.op == Op::Parameter) && n.bound)) return n.value;
    if (n.epoch != epoch_) throw StructuralError("value: node was not computed by the last evaluate()");
    return n.value;
  }

  // ---- differentiation ----------------------------------------------------

  /// Appends the reverse pass of a scalar root to the graph and returns one
  /// gradient node per requested leaf (or any node), shaped like that node.
  std::vector<Var> gradient(Var root, std::span<const Var> wrt) {
    check_owned(root);
    if (!shape(root).is_scalar()) throw ContractError("gradient: root must be scalar-valued (1x1)");
    const std::uint32_t top = root.id_;

    std::vector<char> depends(top + 1, 0);
    for (Var w : wrt) {
      check_owned(w);
      if (w.id_ <= top) depends[w.id_] = 1;
    }
    for (std::uint32_t i = 0; i <= top; ++i) {
      if (depends[i]) continue;
      const Node& n = nodes_[i];
      const std::uint8_t k_end = grad_arity(n.op);
      for (std::uint8_t k = 0; k < k_end; ++k)
        if (depends[n.in[k]]) {
          depends[i] = 1;
          break;
        }
    }

    std::vector<Var> adj(top + 1);
    if (depends[top]) adj[top] = constant(1.0);

    auto accumulate = [&](std::uint32_t target, Var contrib) {
      if (!depends[target]) return;
      Var& slot = adj[target];
      slot = slot.valid() ? add(slot, contrib) : contrib;
    };

    for (std::uint32_t i = top + 1; i-- > 0;) {
      if (!adj[i].valid()) continue;
      // copy the header only: push() below may reallocate nodes_
      struct {
        Op op;
        std::uint8_t arity;
        std::uint32_t in[2];
        double c0, c1;
      } const n{nodes_[i].op, nodes_[i].arity, {nodes_[i].in[0], nodes_[i].in[1]}, nodes_[i].c0, nodes_[i].c1};
      const Var y(this, i);
      const Var G = adj[i];
      const Var a = n.arity > 0 ? Var(this, n.in[0]) : Var();
      const Var b = n.arity > 1 ? Var(this, n.in[1]) : Var();
      switch (n.op) {
        case Op::Const:
        case Op::Input:
        case Op::Parameter:
        case Op::Sign:
        case Op::InRange:
          break;
        case Op::Add:
          accumulate(a.id_, G);
          accumulate(b.id_, G);
          break;
        case Op::Sub:
          accumulate(a.id_, G);
          if (depends[b.id_]) accumulate(b.id_, neg(G));
          break;
        case Op::Mul:
          if (depends[a.id_]) accumulate(a.id_, mul(G, b));
          if (depends[b.id_]) accumulate(b.id_, mul(G, a));
          break;
        case Op::Div:
          if (depends[a.id_]) accumulate(a.id_, div(G, b));
          if (depends[b.id_]) accumulate(b.id_, neg(div(mul(G, y), b)));
          break;
        case Op::Neg:
          accumulate(a.id_, neg(G));
          break;
        case Op::Scale:
          accumulate(a.id_, scale(G, n.c0));
          break;
        case Op::AddScalar:
          accumulate(a.id_, G);
          break;
        case Op::Tanh:
          accumulate(a.id_, mul(G, add_scalar(neg(mul(y, y)), 1.0)));
          break;
        case Op::Exp:
          accumulate(a.id_, mul(G, y));
          break;
        case Op::Log:
          accumulate(a.id_, div(G, a));
          break;
        case Op::Abs:
          accumulate(a.id_, mul(G, sign(a)));
          break;
        case Op::Sqrt:
          accumulate(a.id_, div(scale(G, 0.5), y));
          break;
        case Op::Clamp:
          accumulate(a.id_, mul(G, in_range(a, n.c0, n.c1)));
          break;
        case Op::MatMul:
          if (depends[a.id_]) accumulate(a.id_, dot(G, transpose(b)));
          if (depends[b.id_]) accumulate(b.id_, dot(transpose(a), G));
          break;
        case Op::Transpose:
          accumulate(a.id_, transpose(G));
          break;
        case Op::Sum:
          accumulate(a.id_, broadcast_scalar(G, a));
          break;
        case Op::Mean:
          accumulate(a.id_, spread_mean(G, a));
          break;
        case Op::SumRows:
          accumulate(a.id_, broadcast_rows(G, a));
          break;
        case Op::SumCols:
          accumulate(a.id_, broadcast_cols(G, a));
          break;
        case Op::BroadcastScalar:
          accumulate(a.id_, sum(G));
          break;
        case Op::SpreadMean:
          accumulate(a.id_, mean(G));
          break;
        case Op::BroadcastRows:
          accumulate(a.id_, sum_rows(G));
          break;
        case Op::BroadcastCols:
          accumulate(a.id_, sum_cols(G));
          break;
      }
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (Var w : wrt) {
      if (w.id_ <= top && adj[w.id_].valid())
        out.push_back(adj[w.id_]);
      else
        out.push_back(scale(w, 0.0));
    }
    return out;
  }

 private:
  struct Node {
    Op op = Op::Const;
    std::uint8_t arity = 0;
    std::uint32_t in[2] = {0, 0};
    double c0 = 0.0;
    double c1 = 0.0;
    Shape shape;
    bool bound = false;
    std::uint64_t epoch = 0;
    Matrix value;
    std::string name;
  };

  static bool compatible(std::size_t a, std::size_t b) { return a == kDynamic || b == kDynamic || a == b; }
  static bool fits(std::size_t declared, std::size_t actual) { return declared == kDynamic || declared == actual; }
  static std::size_t merge(std::size_t a, std::size_t b) { return a == kDynamic ? b : a; }

  // Parents that receive gradient; broadcast ops use their second parent for shape only.
  static std::uint8_t grad_arity(Op op) {
    switch (op) {
      case Op::Sign:
      case Op::InRange:
      case Op::Const:
      case Op::Input:
      case Op::Parameter:
        return 0;
      case Op::BroadcastScalar:
      case Op::SpreadMean:
      case Op::BroadcastRows:
      case Op::BroadcastCols:
        return 1;
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div:
      case Op::MatMul:
        return 2;
      default:
        return 1;
    }
  }

  Node& node(Var v) {
    check_owned(v);
    return nodes_[v.id_];
  }
  const Node& node(Var v) const {
    check_owned(v);
    return nodes_[v.id_];
  }
  void check_owned(Var v) const {
    if (v.graph_ != this || v.id_ >= nodes_.size()) throw StructuralError("node does not belong to this graph");
  }

  Shape same(Var a, Var b, const char* what) const {
    Shape sa = shape(a), sb = shape(b);
    if (!compatible(sa.rows, sb.rows) || !compatible(sa.cols, sb.cols))
      throw ContractError(std::string(what) + ": operand shapes differ");
    return Shape{merge(sa.rows, sb.rows), merge(sa.cols, sb.cols)};
  }
  void require_scalar(Var s, const char* what) const {
    Shape sh = shape(s);
    if (!compatible(sh.rows, 1) || !compatible(sh.cols, 1))
      throw ContractError(std::string(what) + ": expected a 1x1 operand");
  }

  Var leaf(Op op, Shape shape, std::string name) {
    Var v = push(op, shape, {});
    nodes_[v.id_].name = std::move(name);
    return v;
  }

  Var push(Op op, Shape shape, std::initializer_list<Var> parents, double c0 = 0.0, double c1 = 0.0) {
    Node n;
    n.op = op;
    n.shape = shape;
    n.c0 = c0;
    n.c1 = c1;
    for (Var p : parents) {
      check_owned(p);
      n.in[n.arity++] = p.id_;
    }
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  void forward(std::uint32_t i) {
    Node& n = nodes_[i];
    switch (n.op) {
      case Op::Const:
        return;
      case Op::Input:
      case Op::Parameter:
        if (!n.bound) throw StructuralError(std::string("evaluate: unbound ") + op_name(n.op) + " '" + n.name + "'");
        return;
      default:
        break;
    }
    const Matrix& A = nodes_[n.in[0]].value;
    const Matrix* B = n.arity > 1 ? &nodes_[n.in[1]].value : nullptr;
    Matrix& out = n.value;

    auto unary = [&](auto f) {
      out.resize(A.rows(), A.cols());
      const std::size_t m = A.size();
      for (std::size_t k = 0; k < m; ++k) out[k] = f(A[k]);
    };
    auto binary = [&](auto f) {
      if (A.rows() != B->rows() || A.cols() != B->cols())
        throw ContractError(std::string(op_name(n.op)) + ": runtime shapes " + A.shape_string() + " and " +
                            B->shape_string() + " differ");
      out.resize(A.rows(), A.cols());
      const std::size_t m = A.size();
      for (std::size_t k = 0; k < m; ++k) out[k] = f(A[k], (*B)[k]);
    };
    const double c0 = n.c0, c1 = n.c1;

    switch (n.op) {
      case Op::Add: binary([](double x, double y) { return x + y; }); break;
      case Op::Sub: binary([](double x, double y) { return x - y; }); break;
      case Op::Mul: binary([](double x, double y) { return x * y; }); break;
      case Op::Div: binary([](double x, double y) { return x / y; }); break;
      case Op::Neg: unary([](double x) { return -x; }); break;
      case Op::Scale: unary([c0](double x) { return c0 * x; }); break;
      case Op::AddScalar: unary([c0](double x) { return x + c0; }); break;
      case Op::Tanh: unary([](double x) { return std::tanh(x); }); break;
      case Op::Exp: unary([](double x) { return std::exp(x); }); break;
      case Op::Log: unary([](double x) { return std::log(x); }); break;
      case Op::Abs: unary([](double x) { return std::abs(x); }); break;
      case Op::Sqrt: unary([](double x) { return std::sqrt(x); }); break;
      case Op::Sign: unary([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }); break;
      case Op::InRange: unary([c0, c1](double x) { return (x >= c0 && x <= c1) ? 1.0 : 0.0; }); break;
      case Op::Clamp: unary([c0, c1](double x) { return std::min(std::max(x, c0), c1); }); break;
      case Op::MatMul: {
        if (A.cols() != B->rows())
          throw ContractError("dot: runtime shapes " + A.shape_string() + " and " + B->shape_string());
        const std::size_t r = A.rows(), inner = A.cols(), c = B->cols();
        out.resize(r, c);
        out.fill(0.0);
        for (std::size_t p = 0; p < r; ++p) {
          double* o = &out(p, 0);
          for (std::size_t q = 0; q < inner; ++q) {
            const double a = A(p, q);
            const double* brow = B->row(q).data();
            for (std::size_t s = 0; s < c; ++s) o[s] += a * brow[s];
          }
        }
        break;
      }
      case Op::Transpose: {
        out.resize(A.cols(), A.rows());
        for (std::size_t p = 0; p < A.rows(); ++p)
          for (std::size_t q = 0; q < A.cols(); ++q) out(q, p) = A(p, q);
        break;
      }
      case Op::Sum:
      case Op::Mean: {
        double s = 0.0;
        for (double x : A.flat()) s += x;
        if (n.op == Op::Mean) {
          if (A.empty()) throw ContractError("mean: empty operand");
          s /= static_cast<double>(A.size());
        }
        out.resize(1, 1);
        out[0] = s;
        break;
      }
      case Op::SumRows: {
        out.resize(1, A.cols());
        out.fill(0.0);
        for (std::size_t p = 0; p < A.rows(); ++p)
          for (std::size_t q = 0; q < A.cols(); ++q) out[q] += A(p, q);
        break;
      }
      case Op::SumCols: {
        out.resize(A.rows(), 1);
        for (std::size_t p = 0; p < A.rows(); ++p) {
          double s = 0.0;
          for (double x : A.row(p)) s += x;
          out[p] = s;
        }
        break;
      }
      case Op::BroadcastScalar:
      case Op::SpreadMean: {
        if (A.size() != 1) throw ContractError("broadcast: operand is not 1x1");
        double v = A[0];
        if (n.op == Op::SpreadMean) {
          if (B->empty()) throw ContractError("spread_mean: empty reference");
          v /= static_cast<double>(B->size());
        }
        out.resize(B->rows(), B->cols());
        out.fill(v);
        break;
      }
      case Op::BroadcastRows: {
        if (A.rows() != 1) throw ContractError("broadcast_rows: operand is not a row vector");
        out.resize(B->rows(), A.cols());
        for (std::size_t p = 0; p < B->rows(); ++p)
          for (std::size_t q = 0; q < A.cols(); ++q) out(p, q) = A[q];
        break;
      }
      case Op::BroadcastCols: {
        if (A.cols() != 1) throw ContractError("broadcast_cols: operand is not a column vector");
        out.resize(A.rows(), B->cols());
        for (std::size_t p = 0; p < A.rows(); ++p)
          for (std::size_t q = 0; q < B->cols(); ++q) out(p, q) = A[p];
        break;
      }
      default:
        break;
    }
  }

  std::vector<Node> nodes_;
  std::vector<char> needed_;
  std::uint64_t epoch_ = 0;
};

// ---- operator sugar ---------------------------------------------------------

inline Graph& owner(Var a, Var b) {
  if (a.graph() != b.graph() || !a.valid()) throw StructuralError("operands belong to different graphs");
  return *a.graph();
}

inline Var operator+(Var a, Var b) { return owner(a, b).add(a, b); }
inline Var operator-(Var a, Var b) { return owner(a, b).sub(a, b); }
inline Var operator*(Var a, Var b) { return owner(a, b).mul(a, b); }
inline Var operator/(Var a, Var b) { return owner(a, b).div(a, b); }
inline Var operator-(Var a) { return a.graph()->neg(a); }
inline Var operator*(double c, Var a) { return a.graph()->scale(a, c); }
inline Var operator*(Var a, double c) { return a.graph()->scale(a, c); }
inline Var operator+(Var a, double c) { return a.graph()->add_scalar(a, c); }
inline Var operator-(Var a, double c) { return a.graph()->add_scalar(a, -c); }

inline Var tanh(Var a) { return a.graph()->tanh(a); }
inline Var exp(Var a) { return a.graph()->exp(a); }
inline Var log(Var a) { return a.graph()->log(a); }
inline Var abs(Var a) { return a.graph()->abs(a); }
inline Var sqrt(Var a) { return a.graph()->sqrt(a); }
inline Var sum(Var a) { return a.graph()->sum(a); }
inline Var mean(Var a) { return a.graph()->mean(a); }
inline Var dot(Var a, Var b) { return owner(a, b).dot(a, b); }

}  // namespace aml::dg
