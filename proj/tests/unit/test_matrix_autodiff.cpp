#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "oracles.hpp"
#include "remind/autodiff.hpp"
#include "remind/optim.hpp"

using namespace remind;
namespace ad = remind::ad;

TEST_CASE("matmul variants agree with the naive product over random shapes") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(1, 7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = dim(rng), k = dim(rng), c = dim(rng);
    const Matrix a = oracle::random_matrix(rng, r, k), b = oracle::random_matrix(rng, k, c);
    const Matrix ref = oracle::naive_matmul(a, b);
    CHECK(max_abs_diff(matmul(a, b), ref) < 1e-12);
    CHECK(max_abs_diff(matmul_tn(a.transposed(), b), ref) < 1e-12);
    CHECK(max_abs_diff(matmul_nt(a, b.transposed()), ref) < 1e-12);
  }
}

TEST_CASE("shape mismatches name both shapes") {
  ad::Tape tape;
  auto a = tape.constant(Matrix(2, 3));
  auto b = tape.constant(Matrix(2, 3));
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
  try {
    ad::matmul(a, b);
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
  CHECK_THROWS_AS(ad::add(a, tape.constant(Matrix(3, 3))), ShapeError);
  CHECK_NOTHROW(ad::add(a, tape.constant(Matrix(1, 3))));  // row broadcast
}

namespace {

using UnaryOp = std::function<ad::Var(ad::Tape&, ad::Var)>;

// Loss = sum(op(x) .* w) for a fixed random w, compared with central differences.
double op_gradient_error(const UnaryOp& op, Matrix x0, std::mt19937_64& rng) {
  ad::Parameter x("x", std::move(x0));
  Matrix w;
  auto build = [&](ad::Tape& tape) {
    ad::Var y = op(tape, tape.param(x));
    if (w.empty()) w = oracle::random_matrix(rng, y.rows(), y.cols());
    return ad::sum(ad::mul(y, tape.constant(w)));
  };
  {
    ad::Tape tape;
    tape.backward(build(tape));
  }
  const Matrix analytic = x.grad;
  const Matrix numeric = oracle::central_diff(x.value, [&] {
    ad::Tape t;
    return t.value(build(t))(0, 0);
  }, 1e-6);
  double err = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    err = std::max(err, std::abs(analytic[i] - numeric[i]) / std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-6}));
  return err;
}

}  // namespace

TEST_CASE("every op's backward matches central differences") {
  std::mt19937_64 rng(3);
  const Matrix other = oracle::random_matrix(rng, 4, 3);
  const Matrix row = oracle::random_matrix(rng, 1, 3);
  auto positive = [&](std::size_t r, std::size_t c) {
    Matrix m = oracle::random_matrix(rng, r, c);
    for (double& v : m.values()) v = 0.5 + std::abs(v);
    return m;
  };
  auto away_from_zero = [&](std::size_t r, std::size_t c) {
    Matrix m = oracle::random_matrix(rng, r, c);
    for (double& v : m.values()) v += v >= 0 ? 0.2 : -0.2;
    return m;
  };

  struct Case {
    const char* name;
    UnaryOp op;
    Matrix x;
  };
  std::vector<Case> cases = {
      {"matmul", [&](ad::Tape& t, ad::Var x) { return ad::matmul(x, t.constant(other)); }, oracle::random_matrix(rng, 2, 4)},
      {"matmul rhs", [&](ad::Tape& t, ad::Var x) { return ad::matmul(t.constant(other), x); }, oracle::random_matrix(rng, 3, 2)},
      {"add", [&](ad::Tape& t, ad::Var x) { return ad::add(x, t.constant(other)); }, oracle::random_matrix(rng, 4, 3)},
      {"add broadcast", [&](ad::Tape& t, ad::Var x) { return ad::add(t.constant(other), x); }, oracle::random_matrix(rng, 1, 3)},
      {"sub", [&](ad::Tape& t, ad::Var x) { return ad::sub(t.constant(other), x); }, oracle::random_matrix(rng, 4, 3)},
      {"mul", [&](ad::Tape& t, ad::Var x) { return ad::mul(x, t.constant(other)); }, oracle::random_matrix(rng, 4, 3)},
      {"self mul", [](ad::Tape&, ad::Var x) { return ad::mul(x, x); }, oracle::random_matrix(rng, 2, 3)},
      {"scale", [](ad::Tape&, ad::Var x) { return ad::scale(x, -1.7); }, oracle::random_matrix(rng, 2, 2)},
      {"scale_by", [&](ad::Tape& t, ad::Var x) { return ad::scale_by(t.constant(other), ad::pick(x, 0, 1)); }, oracle::random_matrix(rng, 1, 2)},
      {"add_scalar", [](ad::Tape&, ad::Var x) { return ad::add_scalar(x, 0.3); }, oracle::random_matrix(rng, 2, 2)},
      {"pow", [](ad::Tape&, ad::Var x) { return ad::pow(x, 2.5); }, positive(2, 3)},
      {"concat", [&](ad::Tape& t, ad::Var x) {
         std::vector<ad::Var> parts{x, t.constant(row), x};
         return ad::concat_rows(parts);
       }, oracle::random_matrix(rng, 2, 3)},
      {"row_softmax", [](ad::Tape&, ad::Var x) { return ad::row_softmax(x); }, oracle::random_matrix(rng, 3, 4)},
      {"col_softmax", [](ad::Tape&, ad::Var x) { return ad::col_softmax(x); }, oracle::random_matrix(rng, 3, 4)},
      {"normalize_rows", [](ad::Tape&, ad::Var x) { return ad::normalize_rows(x); }, oracle::random_matrix(rng, 3, 4)},
      {"normalize_cols", [](ad::Tape&, ad::Var x) { return ad::normalize_cols(x); }, oracle::random_matrix(rng, 3, 4)},
      {"relu", [](ad::Tape&, ad::Var x) { return ad::relu(x); }, away_from_zero(3, 3)},
      {"gelu", [](ad::Tape&, ad::Var x) { return ad::gelu(x); }, oracle::random_matrix(rng, 3, 3)},
      {"log", [](ad::Tape&, ad::Var x) { return ad::log(x, 1e-3); }, positive(2, 3)},
      {"exp", [](ad::Tape&, ad::Var x) { return ad::exp(x); }, oracle::random_matrix(rng, 2, 3)},
      {"sum", [](ad::Tape&, ad::Var x) { return ad::sum(x); }, oracle::random_matrix(rng, 2, 3)},
      {"mean", [](ad::Tape&, ad::Var x) { return ad::mean(x); }, oracle::random_matrix(rng, 2, 3)},
      {"mean_rows", [](ad::Tape&, ad::Var x) { return ad::mean_rows(x); }, oracle::random_matrix(rng, 4, 3)},
      {"slice_rows", [](ad::Tape&, ad::Var x) { return ad::slice_rows(x, 1, 2); }, oracle::random_matrix(rng, 4, 3)},
      {"transpose", [](ad::Tape&, ad::Var x) { return ad::transpose(x); }, oracle::random_matrix(rng, 2, 3)},
      {"pick", [](ad::Tape&, ad::Var x) { return ad::pick(x, 1, 2); }, oracle::random_matrix(rng, 2, 3)},
      {"broadcast_rows", [](ad::Tape&, ad::Var x) { return ad::broadcast_rows(x, 4); }, oracle::random_matrix(rng, 1, 3)},
  };
  for (auto& c : cases) {
    CAPTURE(c.name);
    CHECK(op_gradient_error(c.op, c.x, rng) < 1e-6);
  }
}

TEST_CASE("a parameter bound twice accumulates both paths") {
  ad::Parameter x("x", Matrix(1, 1, 3.0));
  ad::Tape tape;
  auto a = tape.param(x);
  auto b = tape.param(x);
  CHECK(a.id == b.id);
  tape.backward(ad::sum(ad::mul(a, b)));
  CHECK(x.grad(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("backward zeroes stale gradients of bound parameters") {
  ad::Parameter x("x", Matrix(1, 2, 1.0));
  x.grad.fill(100.0);
  ad::Tape tape;
  tape.backward(ad::sum(tape.param(x)));
  CHECK(x.grad(0, 0) == 1.0);
  CHECK(x.grad(0, 1) == 1.0);
}

TEST_CASE("zero rows are replaced by a uniform unit vector and counted") {
  ad::Tape tape;
  Matrix m(2, 4);
  m(1, 0) = 3.0;
  auto n = ad::normalize_rows(tape.constant(m));
  CHECK(tape.guarded(n) == 1);
  for (std::size_t c = 0; c < 4; ++c) CHECK(n.value()(0, c) == doctest::Approx(0.5));
  CHECK(n.value()(1, 0) == 1.0);
}

TEST_CASE("softmax rows are simplex vectors and shift invariant") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix a = oracle::random_matrix(rng, 3, 5, 10.0);
    const Matrix p = ad::softmax_rows(a);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (double v : p.row_span(r)) {
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
    for (double& v : a.values()) v += 1000.0;
    CHECK(max_abs_diff(ad::softmax_rows(a), p) < 1e-12);
  }
}

TEST_CASE("finite_diff_check rejects a non-positive step") {
  ad::Parameter x("x", Matrix(1, 1, 1.0));
  std::vector<ad::Parameter*> ps{&x};
  auto fn = [&](ad::Tape& t) { return ad::sum(t.param(x)); };
  CHECK_THROWS_AS(ad::finite_diff_check(fn, ps, 0.0), std::invalid_argument);
  CHECK(ad::finite_diff_check(fn, ps, 1e-4) < 1e-8);
}

TEST_CASE("sgd and adamw move against the gradient") {
  for (auto kind : {OptimizerKind::Sgd, OptimizerKind::AdamW}) {
    ad::Parameter x("x", Matrix(1, 2, 1.0));
    x.grad(0, 0) = 2.0;
    x.grad(0, 1) = -1.0;
    Optimizer opt({kind, 0.1});
    std::vector<ad::Parameter*> ps{&x};
    opt.step(ps);
    CHECK(x.value(0, 0) < 1.0);
    CHECK(x.value(0, 1) > 1.0);
  }
  // First AdamW step has magnitude lr regardless of gradient scale.
  ad::Parameter y("y", Matrix(1, 1, 0.0));
  y.grad(0, 0) = 1e-3;
  Optimizer adam({OptimizerKind::AdamW, 0.01});
  std::vector<ad::Parameter*> ps{&y};
  adam.step(ps);
  CHECK(y.value(0, 0) == doctest::Approx(-0.01).epsilon(1e-4));
}
