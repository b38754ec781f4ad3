#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "msiseg/common.hpp"

namespace msiseg {

// Row-major dense double matrix, sized for the small problems in this
// codebase (homography normal equations, channel covariances).
struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {
    if (r <= 0 || c <= 0) throw ShapeError("matrix dims must be positive");
  }

  double& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
};

inline Mat matmul(const Mat& x, const Mat& y) {
  if (x.cols != y.rows) throw ShapeError("matmul inner dims disagree");
  Mat out(x.rows, y.cols);
  for (int i = 0; i < x.rows; ++i)
    for (int k = 0; k < x.cols; ++k) {
      const double v = x(i, k);
      if (v == 0.0) continue;
      for (int j = 0; j < y.cols; ++j) out(i, j) += v * y(k, j);
    }
  return out;
}

inline Mat transpose(const Mat& x) {
  Mat out(x.cols, x.rows);
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < x.cols; ++j) out(j, i) = x(i, j);
  return out;
}

// A^T A for tall design matrices; the symmetric input to the eigensolver.
inline Mat gram(const Mat& x) {
  Mat out(x.cols, x.cols);
  for (int i = 0; i < x.cols; ++i)
    for (int j = i; j < x.cols; ++j) {
      double acc = 0.0;
      for (int r = 0; r < x.rows; ++r) acc += x(r, i) * x(r, j);
      out(i, j) = acc;
      out(j, i) = acc;
    }
  return out;
}

struct EigenResult {
  std::vector<double> values;  // descending
  Mat vectors;                 // column k pairs with values[k]
};

// Cyclic Jacobi sweeps for a symmetric matrix. Deterministic, no pivot
// heuristics: sweep all (p,q) pairs until off-diagonal mass is ~0 or the
// sweep budget is exhausted. Eigenvalues come back sorted descending with
// matching columns in `vectors`; each vector's first nonzero entry is made
// non-negative so results are reproducible across platforms.
inline EigenResult eigen_symmetric(Mat s, int max_sweeps = 64, double tol = 1e-14) {
  if (s.rows != s.cols) throw ShapeError("eigen_symmetric needs a square matrix");
  const int n = s.rows;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (std::abs(s(i, j) - s(j, i)) > 1e-9 * std::max(1.0, std::abs(s(i, j))))
        throw ArgumentError("eigen_symmetric needs a symmetric matrix");

  Mat v(n, n);
  for (int i = 0; i < n; ++i) v(i, i) = 1.0;

  double scale = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) scale = std::max(scale, std::abs(s(i, j)));
  if (scale == 0.0) scale = 1.0;

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += s(p, q) * s(p, q);
    if (std::sqrt(off) <= tol * scale * n) break;

    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = s(p, q);
        if (std::abs(apq) <= tol * scale) continue;
        const double theta = (s(q, q) - s(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (int k = 0; k < n; ++k) {
          const double skp = s(k, p), skq = s(k, q);
          s(k, p) = c * skp - sn * skq;
          s(k, q) = sn * skp + c * skq;
        }
        for (int k = 0; k < n; ++k) {
          const double spk = s(p, k), sqk = s(q, k);
          s(p, k) = c * spk - sn * sqk;
          s(q, k) = sn * spk + c * sqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> diag(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) diag[static_cast<size_t>(i)] = s(i, i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return diag[static_cast<size_t>(x)] > diag[static_cast<size_t>(y)]; });

  EigenResult out;
  out.values.resize(static_cast<size_t>(n));
  out.vectors = Mat(n, n);
  for (int k = 0; k < n; ++k) {
    const int src = order[static_cast<size_t>(k)];
    out.values[static_cast<size_t>(k)] = diag[static_cast<size_t>(src)];
    int sign_row = -1;
    for (int i = 0; i < n; ++i)
      if (std::abs(v(i, src)) > 1e-12) {
        sign_row = i;
        break;
      }
    const double sgn = (sign_row >= 0 && v(sign_row, src) < 0.0) ? -1.0 : 1.0;
    for (int i = 0; i < n; ++i) out.vectors(i, k) = sgn * v(i, src);
  }
  return out;
}

// Solves a small dense linear system by Gaussian elimination with partial
// pivoting. Used for 3x3 inversions in the warp path.
inline std::vector<double> solve_linear(Mat a, std::vector<double> b) {
  if (a.rows != a.cols || static_cast<int>(b.size()) != a.rows)
    throw ShapeError("solve_linear needs square A and matching b");
  const int n = a.rows;
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
    if (std::abs(a(piv, col)) < 1e-12) throw DegenerateError("singular linear system");
    if (piv != col) {
      for (int c = 0; c < n; ++c) std::swap(a(piv, c), a(col, c));
      std::swap(b[static_cast<size_t>(piv)], b[static_cast<size_t>(col)]);
    }
    const double d = a(col, col);
    for (int r = col + 1; r < n; ++r) {
      const double f = a(r, col) / d;
      if (f == 0.0) continue;
      for (int c = col; c < n; ++c) a(r, c) -= f * a(col, c);
      b[static_cast<size_t>(r)] -= f * b[static_cast<size_t>(col)];
    }
  }
  std::vector<double> x(static_cast<size_t>(n));
  for (int r = n - 1; r >= 0; --r) {
    double acc = b[static_cast<size_t>(r)];
    for (int c = r + 1; c < n; ++c) acc -= a(r, c) * x[static_cast<size_t>(c)];
    x[static_cast<size_t>(r)] = acc / a(r, r);
  }
  return x;
}

inline Mat invert3x3(const Mat& m) {
  if (m.rows != 3 || m.cols != 3) throw ShapeError("invert3x3 needs a 3x3 matrix");
  const double det = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) -
                     m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
                     m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
  if (std::abs(det) < 1e-12) throw DegenerateError("singular 3x3 matrix");
  Mat inv(3, 3);
  inv(0, 0) = (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) / det;
  inv(0, 1) = (m(0, 2) * m(2, 1) - m(0, 1) * m(2, 2)) / det;
  inv(0, 2) = (m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1)) / det;
  inv(1, 0) = (m(1, 2) * m(2, 0) - m(1, 0) * m(2, 2)) / det;
  inv(1, 1) = (m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0)) / det;
  inv(1, 2) = (m(0, 2) * m(1, 0) - m(0, 0) * m(1, 2)) / det;
  inv(2, 0) = (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0)) / det;
  inv(2, 1) = (m(0, 1) * m(2, 0) - m(0, 0) * m(2, 1)) / det;
  inv(2, 2) = (m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0)) / det;
  return inv;
}

// Unit eigenvector of A^T A with the smallest eigenvalue: the standard
// least-squares null-space estimate for homogeneous systems A h = 0.
inline std::vector<double> smallest_gram_eigenvector(const Mat& a) {
  EigenResult eig = eigen_symmetric(gram(a));
  const int n = eig.vectors.rows;
  std::vector<double> h(static_cast<size_t>(n));
  double norm = 0.0;
  for (int i = 0; i < n; ++i) {
    h[static_cast<size_t>(i)] = eig.vectors(i, n - 1);
    norm += h[static_cast<size_t>(i)] * h[static_cast<size_t>(i)];
  }
  norm = std::sqrt(norm);
  if (norm < 1e-12) throw DegenerateError("null-space estimate vanished");
  for (double& v : h) v /= norm;
  return h;
}

}  // namespace msiseg
