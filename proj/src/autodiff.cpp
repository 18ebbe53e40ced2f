#include "remind/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>

namespace remind::ad {

namespace {

[[noreturn]] void shape_fail(Op op, const std::string& detail) {
  throw ShapeError(std::string(op_name(op)) + ": " + detail);
}

void expect_same(Op op, const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) shape_fail(op, "operand shapes " + a.shape_str() + " and " + b.shape_str() + " differ");
}

void expect_arity(Op op, std::size_t got, std::size_t want) {
  if (got != want)
    throw std::invalid_argument(std::string(op_name(op)) + ": expected " + std::to_string(want) +
                                " inputs, got " + std::to_string(got));
}

template <class F>
Matrix map(const Matrix& a, F f) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

Matrix column_sums(const Matrix& g) {
  Matrix out(1, g.cols());
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < g.cols(); ++c) out[c] += g(r, c);
  return out;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Constant: return "constant";
    case Op::Param: return "param";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scalar-mul";
    case Op::ScaleBy: return "scale-by";
    case Op::AddScalar: return "add-scalar";
    case Op::Pow: return "pow";
    case Op::ConcatRows: return "concat-rows";
    case Op::RowSoftmax: return "row-softmax";
    case Op::ColSoftmax: return "col-softmax";
    case Op::NormalizeRows: return "unit-row-normalize";
    case Op::NormalizeCols: return "unit-col-normalize";
    case Op::Relu: return "relu";
    case Op::Gelu: return "gelu";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::MeanRows: return "mean-rows";
    case Op::SliceRows: return "slice-rows";
    case Op::Transpose: return "transpose";
    case Op::Pick: return "pick";
    case Op::BroadcastRows: return "broadcast-rows";
  }
  return "unknown";
}

const Matrix& Var::value() const { return tape->value(*this); }

Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto in = a.row_span(r);
    auto o = out.row_span(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) z += (o[c] = std::exp(in[c] - mx));
    for (auto& v : o) v /= z;
  }
  return out;
}

Matrix softmax_cols(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t c = 0; c < a.cols(); ++c) {
    double mx = a(0, c);
    for (std::size_t r = 1; r < a.rows(); ++r) mx = std::max(mx, a(r, c));
    double z = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r) z += (out(r, c) = std::exp(a(r, c) - mx));
    for (std::size_t r = 0; r < a.rows(); ++r) out(r, c) /= z;
  }
  return out;
}

double gelu_value(double x) { return x * normal_cdf(x); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Matrix value) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::param(Parameter& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var{this, it->second};
  if (!p.grad.same_shape(p.value)) p.grad = Matrix(p.value.rows(), p.value.cols());
  Node n;
  n.op = Op::Param;
  n.value = p.value;
  n.param = &p;
  Var v = push(std::move(n));
  param_ids_.emplace(&p, v.id);
  return v;
}

Var Tape::record(Op op, std::span<const Var> inputs, OpArgs args) {
  for (const Var& v : inputs)
    if (v.tape != this || v.id >= nodes_.size()) throw std::invalid_argument(std::string(op_name(op)) + ": foreign node");

  Node n;
  n.op = op;
  n.args = args;
  for (const Var& v : inputs) n.inputs.push_back(v.id);
  auto in = [&](std::size_t i) -> const Matrix& { return nodes_[inputs[i].id].value; };

  switch (op) {
    case Op::Constant:
    case Op::Param:
      throw std::invalid_argument("leaf nodes are created with constant() or param()");
    case Op::MatMul:
      expect_arity(op, inputs.size(), 2);
      if (in(0).cols() != in(1).rows())
        shape_fail(op, "inner dimensions differ: " + in(0).shape_str() + " x " + in(1).shape_str());
      n.value = remind::matmul(in(0), in(1));
      break;
    case Op::Add:
    case Op::Sub: {
      expect_arity(op, inputs.size(), 2);
      const Matrix& a = in(0);
      const Matrix& b = in(1);
      const bool broadcast = b.rows() == 1 && a.rows() != 1 && b.cols() == a.cols();
      if (!broadcast) expect_same(op, a, b);
      n.value = a;
      const double sign = op == Op::Add ? 1.0 : -1.0;
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) n.value(r, c) += sign * (broadcast ? b(0, c) : b(r, c));
      break;
    }
    case Op::Mul:
      expect_arity(op, inputs.size(), 2);
      expect_same(op, in(0), in(1));
      n.value = in(0);
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= in(1)[i];
      break;
    case Op::Scale:
      expect_arity(op, inputs.size(), 1);
      n.value = map(in(0), [&](double x) { return x * args.scalar; });
      break;
    case Op::ScaleBy: {
      expect_arity(op, inputs.size(), 2);
      if (in(1).rows() != 1 || in(1).cols() != 1) shape_fail(op, "scale operand must be 1x1, got " + in(1).shape_str());
      const double s = in(1)[0];
      n.value = map(in(0), [&](double x) { return x * s; });
      break;
    }
    case Op::AddScalar:
      expect_arity(op, inputs.size(), 1);
      n.value = map(in(0), [&](double x) { return x + args.scalar; });
      break;
    case Op::Pow:
      expect_arity(op, inputs.size(), 1);
      n.value = map(in(0), [&](double x) { return std::pow(x, args.scalar); });
      break;
    case Op::ConcatRows: {
      if (inputs.empty()) throw std::invalid_argument("concat-rows: no inputs");
      const std::size_t cols = in(0).cols();
      std::size_t rows = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (in(i).cols() != cols)
          shape_fail(op, "input " + std::to_string(i) + " has " + std::to_string(in(i).cols()) + " columns, expected " +
                             std::to_string(cols));
        rows += in(i).rows();
      }
      n.value = Matrix(rows, cols);
      std::size_t off = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        std::copy(in(i).values().begin(), in(i).values().end(), n.value.values().begin() + off);
        off += in(i).size();
      }
      break;
    }
    case Op::RowSoftmax:
      expect_arity(op, inputs.size(), 1);
      n.value = softmax_rows(in(0));
      break;
    case Op::ColSoftmax:
      expect_arity(op, inputs.size(), 1);
      n.value = softmax_cols(in(0));
      break;
    case Op::NormalizeRows: {
      expect_arity(op, inputs.size(), 1);
      const Matrix& a = in(0);
      n.value = a;
      n.aux.resize(a.rows());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        const double nr = norm2(a.row_span(r));
        n.aux[r] = nr;
        auto o = n.value.row_span(r);
        if (nr == 0.0) {
          ++n.guarded;
          std::fill(o.begin(), o.end(), 1.0 / std::sqrt(static_cast<double>(a.cols())));
        } else {
          for (auto& v : o) v /= nr;
        }
      }
      break;
    }
    case Op::NormalizeCols: {
      expect_arity(op, inputs.size(), 1);
      const Matrix& a = in(0);
      n.value = a;
      n.aux.resize(a.cols());
      for (std::size_t c = 0; c < a.cols(); ++c) {
        double ss = 0.0;
        for (std::size_t r = 0; r < a.rows(); ++r) ss += a(r, c) * a(r, c);
        const double nc = std::sqrt(ss);
        n.aux[c] = nc;
        if (nc == 0.0) {
          ++n.guarded;
          for (std::size_t r = 0; r < a.rows(); ++r) n.value(r, c) = 1.0 / std::sqrt(static_cast<double>(a.rows()));
        } else {
          for (std::size_t r = 0; r < a.rows(); ++r) n.value(r, c) /= nc;
        }
      }
      break;
    }
    case Op::Relu:
      expect_arity(op, inputs.size(), 1);
      n.value = map(in(0), [](double x) { return x > 0.0 ? x : 0.0; });
      break;
    case Op::Gelu:
      expect_arity(op, inputs.size(), 1);
      n.value = map(in(0), gelu_value);
      break;
    case Op::Log:
      expect_arity(op, inputs.size(), 1);
      n.value = map(in(0), [&](double x) { return std::log(x + args.scalar); });
      break;
    case Op::Exp:
      expect_arity(op, inputs.size(), 1);
      n.value = map(in(0), [](double x) { return std::exp(x); });
      break;
    case Op::Sum:
    case Op::Mean: {
      expect_arity(op, inputs.size(), 1);
      double s = 0.0;
      for (double v : in(0).values()) s += v;
      if (op == Op::Mean) s /= static_cast<double>(in(0).size());
      n.value = Matrix(1, 1, s);
      break;
    }
    case Op::MeanRows: {
      expect_arity(op, inputs.size(), 1);
      n.value = column_sums(in(0));
      for (auto& v : n.value.values()) v /= static_cast<double>(in(0).rows());
      break;
    }
    case Op::SliceRows: {
      expect_arity(op, inputs.size(), 1);
      const Matrix& a = in(0);
      if (args.index1 == 0 || args.index0 + args.index1 > a.rows())
        shape_fail(op, "rows [" + std::to_string(args.index0) + ", " + std::to_string(args.index0 + args.index1) +
                           ") out of range for " + a.shape_str());
      n.value = Matrix(args.index1, a.cols());
      std::copy_n(a.values().begin() + args.index0 * a.cols(), n.value.size(), n.value.values().begin());
      break;
    }
    case Op::Transpose:
      expect_arity(op, inputs.size(), 1);
      n.value = in(0).transposed();
      break;
    case Op::Pick:
      expect_arity(op, inputs.size(), 1);
      if (args.index0 >= in(0).rows() || args.index1 >= in(0).cols())
        shape_fail(op, "entry (" + std::to_string(args.index0) + ", " + std::to_string(args.index1) +
                           ") out of range for " + in(0).shape_str());
      n.value = Matrix(1, 1, in(0)(args.index0, args.index1));
      break;
    case Op::BroadcastRows: {
      expect_arity(op, inputs.size(), 1);
      if (in(0).rows() != 1) shape_fail(op, "expected a single row, got " + in(0).shape_str());
      n.value = Matrix(args.index0, in(0).cols());
      for (std::size_t r = 0; r < args.index0; ++r)
        std::copy(in(0).values().begin(), in(0).values().end(), n.value.row_span(r).begin());
      break;
    }
  }
  return push(std::move(n));
}

Matrix& Tape::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  Matrix& slot = grad_slot(id);
  for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::invalid_argument("backward: loss node belongs to another tape");
  const Matrix& lv = nodes_[loss.id].value;
  if (lv.rows() != 1 || lv.cols() != 1) throw ShapeError("backward: loss must be 1x1, got " + lv.shape_str());

  for (auto& n : nodes_) {
    n.grad = Matrix();
    if (n.param) n.param->zero_grad();
  }
  grad_slot(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.op == Op::Param) {
      for (std::size_t k = 0; k < n.grad.size(); ++k) n.param->grad[k] += n.grad[k];
      continue;
    }
    propagate(n);
  }
}

void Tape::propagate(Node& n) {
  const Matrix& g = n.grad;
  const Matrix& y = n.value;
  auto x = [&](std::size_t i) -> const Matrix& { return nodes_[n.inputs[i]].value; };
  const std::size_t in0 = n.inputs.empty() ? 0 : n.inputs[0];

  switch (n.op) {
    case Op::Constant:
    case Op::Param:
      break;
    case Op::MatMul: {
      const Matrix da = matmul_nt(g, x(1));
      const Matrix db = matmul_tn(x(0), g);
      accumulate(n.inputs[0], da);
      accumulate(n.inputs[1], db);
      break;
    }
    case Op::Add:
    case Op::Sub: {
      accumulate(in0, g);
      const bool broadcast = x(1).rows() == 1 && x(0).rows() != 1;
      Matrix gb = broadcast ? column_sums(g) : g;
      if (n.op == Op::Sub)
        for (auto& v : gb.values()) v = -v;
      accumulate(n.inputs[1], gb);
      break;
    }
    case Op::Mul: {
      Matrix ga = g, gb = g;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] *= x(1)[i];
        gb[i] *= x(0)[i];
      }
      accumulate(n.inputs[0], ga);
      accumulate(n.inputs[1], gb);
      break;
    }
    case Op::Scale:
      accumulate(in0, map(g, [&](double v) { return v * n.args.scalar; }));
      break;
    case Op::ScaleBy: {
      const double s = x(1)[0];
      accumulate(in0, map(g, [&](double v) { return v * s; }));
      double ds = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) ds += g[i] * x(0)[i];
      accumulate(n.inputs[1], Matrix(1, 1, ds));
      break;
    }
    case Op::AddScalar:
      accumulate(in0, g);
      break;
    case Op::Pow: {
      const double e = n.args.scalar;
      Matrix ga(g.rows(), g.cols());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double xv = x(0)[i];
        ga[i] = (xv == 0.0 && e < 1.0) ? 0.0 : g[i] * e * std::pow(xv, e - 1.0);
      }
      accumulate(in0, ga);
      break;
    }
    case Op::ConcatRows: {
      std::size_t off = 0;
      for (std::size_t id : n.inputs) {
        const Matrix& part = nodes_[id].value;
        Matrix gp(part.rows(), part.cols());
        std::copy_n(g.values().begin() + off, gp.size(), gp.values().begin());
        off += gp.size();
        accumulate(id, gp);
      }
      break;
    }
    case Op::RowSoftmax: {
      Matrix ga(g.rows(), g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r) {
        const double s = dot(g.row_span(r), y.row_span(r));
        for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) = y(r, c) * (g(r, c) - s);
      }
      accumulate(in0, ga);
      break;
    }
    case Op::ColSoftmax: {
      Matrix ga(g.rows(), g.cols());
      for (std::size_t c = 0; c < g.cols(); ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < g.rows(); ++r) s += g(r, c) * y(r, c);
        for (std::size_t r = 0; r < g.rows(); ++r) ga(r, c) = y(r, c) * (g(r, c) - s);
      }
      accumulate(in0, ga);
      break;
    }
    case Op::NormalizeRows: {
      Matrix ga(g.rows(), g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r) {
        const double nr = n.aux[r];
        if (nr == 0.0) continue;
        const double s = dot(g.row_span(r), y.row_span(r));
        for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) = (g(r, c) - y(r, c) * s) / nr;
      }
      accumulate(in0, ga);
      break;
    }
    case Op::NormalizeCols: {
      Matrix ga(g.rows(), g.cols());
      for (std::size_t c = 0; c < g.cols(); ++c) {
        const double nc = n.aux[c];
        if (nc == 0.0) continue;
        double s = 0.0;
        for (std::size_t r = 0; r < g.rows(); ++r) s += g(r, c) * y(r, c);
        for (std::size_t r = 0; r < g.rows(); ++r) ga(r, c) = (g(r, c) - y(r, c) * s) / nc;
      }
      accumulate(in0, ga);
      break;
    }
    case Op::Relu: {
      Matrix ga = g;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(x(0)[i] > 0.0)) ga[i] = 0.0;
      accumulate(in0, ga);
      break;
    }
    case Op::Gelu: {
      Matrix ga = g;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double xv = x(0)[i];
        ga[i] *= normal_cdf(xv) + xv * normal_pdf(xv);
      }
      accumulate(in0, ga);
      break;
    }
    case Op::Log: {
      Matrix ga = g;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] /= x(0)[i] + n.args.scalar;
      accumulate(in0, ga);
      break;
    }
    case Op::Exp: {
      Matrix ga = g;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] *= y[i];
      accumulate(in0, ga);
      break;
    }
    case Op::Sum:
    case Op::Mean: {
      const Matrix& a = x(0);
      const double v = n.op == Op::Mean ? g[0] / static_cast<double>(a.size()) : g[0];
      accumulate(in0, Matrix(a.rows(), a.cols(), v));
      break;
    }
    case Op::MeanRows: {
      const Matrix& a = x(0);
      Matrix ga(a.rows(), a.cols());
      const double inv = 1.0 / static_cast<double>(a.rows());
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) ga(r, c) = g[c] * inv;
      accumulate(in0, ga);
      break;
    }
    case Op::SliceRows: {
      const Matrix& a = x(0);
      Matrix ga(a.rows(), a.cols());
      std::copy(g.values().begin(), g.values().end(), ga.values().begin() + n.args.index0 * a.cols());
      accumulate(in0, ga);
      break;
    }
    case Op::Transpose:
      accumulate(in0, g.transposed());
      break;
    case Op::Pick: {
      const Matrix& a = x(0);
      Matrix ga(a.rows(), a.cols());
      ga(n.args.index0, n.args.index1) = g[0];
      accumulate(in0, ga);
      break;
    }
    case Op::BroadcastRows:
      accumulate(in0, column_sums(g));
      break;
  }
}

Var matmul(Var a, Var b) { return a.tape->record(Op::MatMul, {a, b}); }
Var add(Var a, Var b) { return a.tape->record(Op::Add, {a, b}); }
Var sub(Var a, Var b) { return a.tape->record(Op::Sub, {a, b}); }
Var mul(Var a, Var b) { return a.tape->record(Op::Mul, {a, b}); }
Var scale(Var a, double c) { return a.tape->record(Op::Scale, {a}, {.scalar = c}); }
Var scale_by(Var a, Var s) { return a.tape->record(Op::ScaleBy, {a, s}); }
Var add_scalar(Var a, double c) { return a.tape->record(Op::AddScalar, {a}, {.scalar = c}); }
Var pow(Var a, double exponent) { return a.tape->record(Op::Pow, {a}, {.scalar = exponent}); }
Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat-rows: no inputs");
  return parts.front().tape->record(Op::ConcatRows, parts);
}
Var row_softmax(Var a) { return a.tape->record(Op::RowSoftmax, {a}); }
Var col_softmax(Var a) { return a.tape->record(Op::ColSoftmax, {a}); }
Var normalize_rows(Var a) { return a.tape->record(Op::NormalizeRows, {a}); }
Var normalize_cols(Var a) { return a.tape->record(Op::NormalizeCols, {a}); }
Var relu(Var a) { return a.tape->record(Op::Relu, {a}); }
Var gelu(Var a) { return a.tape->record(Op::Gelu, {a}); }
Var log(Var a, double eps) { return a.tape->record(Op::Log, {a}, {.scalar = eps}); }
Var exp(Var a) { return a.tape->record(Op::Exp, {a}); }
Var sum(Var a) { return a.tape->record(Op::Sum, {a}); }
Var mean(Var a) { return a.tape->record(Op::Mean, {a}); }
Var mean_rows(Var a) { return a.tape->record(Op::MeanRows, {a}); }
Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  return a.tape->record(Op::SliceRows, {a}, {.index0 = begin, .index1 = count});
}
Var transpose(Var a) { return a.tape->record(Op::Transpose, {a}); }
Var pick(Var a, std::size_t row, std::size_t col) {
  return a.tape->record(Op::Pick, {a}, {.index0 = row, .index1 = col});
}
Var broadcast_rows(Var a, std::size_t rows) { return a.tape->record(Op::BroadcastRows, {a}, {.index0 = rows}); }

double finite_diff_check(const LossBuilder& fn, std::span<Parameter* const> params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");

  auto evaluate = [&] {
    Tape t;
    return fn(t).value()[0];
  };
  const double first = evaluate();
  const double second = evaluate();
  if (std::memcmp(&first, &second, sizeof(double)) != 0 && !(std::isnan(first) && std::isnan(second)))
    throw std::invalid_argument("finite_diff_check: function is not deterministic");

  std::vector<Matrix> analytic;
  {
    Tape t;
    Var loss = fn(t);
    for (Parameter* p : params) p->zero_grad();
    t.backward(loss);
    for (Parameter* p : params) analytic.push_back(p->grad);
  }

  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double up = evaluate();
      p.value[i] = orig - h;
      const double down = evaluate();
      p.value[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace remind::ad
