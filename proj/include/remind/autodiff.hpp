#pragma once

// Tape-based reverse-mode differentiation over dense matrices.
//
// A Tape records operations in creation order, which is already a
// topological order, so backward() is a single reverse sweep. Parameters
// live outside the tape; Tape::param() binds one as a leaf and backward()
// writes d(loss)/d(param) into Parameter::grad.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "remind/matrix.hpp"

namespace remind::ad {

enum class Op {
  Constant,
  Param,
  MatMul,
  Add,  // elementwise, or row-broadcast when rhs is 1 x cols
  Sub,
  Mul,  // elementwise (Hadamard)
  Scale,
  ScaleBy,  // multiply by a 1x1 node
  AddScalar,
  Pow,
  ConcatRows,
  RowSoftmax,
  ColSoftmax,
  NormalizeRows,
  NormalizeCols,
  Relu,
  Gelu,
  Log,
  Exp,
  Sum,
  Mean,
  MeanRows,  // column means, 1 x cols
  SliceRows,
  Transpose,
  Pick,  // single entry as 1x1
  BroadcastRows,
};

const char* op_name(Op op);

struct Parameter {
  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Extra operands for ops that need them. Unused fields are ignored.
struct OpArgs {
  double scalar = 0.0;
  std::size_t index0 = 0;
  std::size_t index1 = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Matrix value);
  // Binding the same Parameter twice returns the same leaf.
  Var param(Parameter& p);

  // Generic entry point: validates shapes, computes the forward value and
  // appends one node. Throws ShapeError naming the offending dimensions.
  Var record(Op op, std::span<const Var> inputs, OpArgs args = {});
  Var record(Op op, std::initializer_list<Var> inputs, OpArgs args = {}) {
    return record(op, std::span<const Var>(inputs.begin(), inputs.size()), args);
  }

  // Requires a 1x1 loss. Zeroes the gradient of every parameter bound to
  // this tape, then accumulates d(loss)/d(param) into it.
  void backward(Var loss);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  // Gradient of the last backward() loss wrt this node; zeros if unreached.
  Matrix grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  Op op(Var v) const { return nodes_[v.id].op; }
  // Number of rows/columns replaced by a uniform unit vector in a
  // normalize op because their norm was zero.
  std::size_t guarded(Var v) const { return nodes_[v.id].guarded; }
  bool bound(const Parameter& p) const { return param_ids_.contains(&p); }

 private:
  struct Node {
    Op op = Op::Constant;
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> inputs;
    OpArgs args;
    Parameter* param = nullptr;
    std::vector<double> aux;
    std::size_t guarded = 0;
  };

  Var push(Node node);
  void accumulate(std::size_t id, const Matrix& g);
  Matrix& grad_slot(std::size_t id);
  void propagate(Node& node);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_ids_;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var scale_by(Var a, Var s);
Var add_scalar(Var a, double c);
Var pow(Var a, double exponent);
Var concat_rows(std::span<const Var> parts);
Var row_softmax(Var a);
Var col_softmax(Var a);
Var normalize_rows(Var a);
Var normalize_cols(Var a);
Var relu(Var a);
Var gelu(Var a);
Var log(Var a, double eps = 0.0);
Var exp(Var a);
Var sum(Var a);
Var mean(Var a);
Var mean_rows(Var a);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var transpose(Var a);
Var pick(Var a, std::size_t row, std::size_t col);
Var broadcast_rows(Var a, std::size_t rows);

// Plain-value helpers shared with callers that need no gradient.
Matrix softmax_rows(const Matrix& a);
Matrix softmax_cols(const Matrix& a);
double gelu_value(double x);

using LossBuilder = std::function<Var(Tape&)>;

// Compares backward() against central differences
//   max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)
// over every entry of every parameter. Throws std::invalid_argument if h <= 0
// or if two identical evaluations of fn disagree.
double finite_diff_check(const LossBuilder& fn, std::span<Parameter* const> params, double h);

}  // namespace remind::ad
