#pragma once

// Independent reference implementations and generators for the tests.
// Nothing here calls into the code it is used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "remind/matrix.hpp"
#include "remind/synthdata.hpp"

namespace oracle {

using remind::Matrix;

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(r, c);
  for (double& v : m.values()) v = nd(rng);
  return m;
}

// Dirichlet(alpha) draw; small alpha gives peaked vectors, large alpha flat ones.
inline std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n, double alpha = 1.0) {
  std::gamma_distribution<double> g(alpha, 1.0);
  std::vector<double> p(n);
  double s = 0.0;
  for (double& v : p) s += v = g(rng) + 1e-300;
  for (double& v : p) v /= s;
  return p;
}

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double acc = 0.0L;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += static_cast<long double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<double>(acc);
    }
  return out;
}

// Cyclic Jacobi rotations on a symmetric matrix. Returns eigenvalues in
// descending order with matching unit eigenvectors as columns.
struct Eigen {
  std::vector<double> values;
  Matrix vectors;
};

inline Eigen jacobi_eigen(Matrix a) {
  const std::size_t n = a.rows();
  Matrix v = Matrix::identity(n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
  Eigen e;
  e.vectors = Matrix(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    e.values.push_back(a(order[c], order[c]));
    for (std::size_t r = 0; r < n; ++r) e.vectors(r, c) = v(r, order[c]);
  }
  return e;
}

inline double abs_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  long double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<long double>(a[i]) * b[i];
    aa += static_cast<long double>(a[i]) * a[i];
    bb += static_cast<long double>(b[i]) * b[i];
  }
  return static_cast<double>(std::abs(ab) / std::sqrt(aa * bb));
}

// Central differences of a scalar function of one matrix, perturbing in place.
inline Matrix central_diff(Matrix& x, const std::function<double()>& f, double h) {
  Matrix g(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double entropy_nats(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

// Small dataset spec for fast tests.
inline remind::DatasetSpec small_spec(std::uint64_t seed = 7, int n = 400) {
  remind::DatasetSpec s;
  s.modalities = 3;
  s.missing_prob = {0.1, 0.3, 0.4};
  s.tokens_per_modality = 2;
  s.embed_dim = 4;
  s.raw_dims = {3, 2, 3};
  s.classes = 2;
  s.n_samples = n;
  s.seed = seed;
  return s;
}

}  // namespace oracle
