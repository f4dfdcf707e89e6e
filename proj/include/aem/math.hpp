#pragma once

// Dense little-linear-algebra and statistics helpers used across the library.
// Everything here is deliberately small: the largest systems we solve are the
// Newton steps of a q-dimensional choice model and a 4x4 regression, and the
// hot loops (network forward/backward passes) are hand-written over
// row-major buffers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "aem/errors.hpp"

namespace aem {

using Vec = std::vector<double>;

// Row-major dense matrix.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

  double* row(std::size_t i) { return a.data() + i * cols; }
  const double* row(std::size_t i) const { return a.data() + i * cols; }

  bool empty() const { return a.empty(); }
};

inline double dot(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw dimension_error("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw dimension_error("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

// y = M x  (M rows x cols, x cols, y rows)
inline Vec matvec(const Mat& m, std::span<const double> x) {
  if (x.size() != m.cols) throw dimension_error("matvec: length mismatch");
  Vec y(m.rows, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double* r = m.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) s += r[j] * x[j];
    y[i] = s;
  }
  return y;
}

// y = M^T x  (x rows, y cols)
inline Vec mat_t_vec(const Mat& m, std::span<const double> x) {
  if (x.size() != m.rows) throw dimension_error("mat_t_vec: length mismatch");
  Vec y(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double* r = m.row(i);
    const double xi = x[i];
    for (std::size_t j = 0; j < m.cols; ++j) y[j] += xi * r[j];
  }
  return y;
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::fabs(x));
  return m;
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// log(sum(exp(v))) computed stably.
inline double logsumexp(std::span<const double> v) {
  if (v.empty()) throw dimension_error("logsumexp: empty input");
  double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// Replaces v by softmax(v); numerically stable; result sums to 1.
inline void softmax_inplace(Vec& v) {
  if (v.empty()) throw dimension_error("softmax: empty input");
  double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double& x : v) {
    x = std::exp(x - m);
    s += x;
  }
  for (double& x : v) x /= s;
}

inline Vec softmax(Vec v) {
  softmax_inplace(v);
  return v;
}

// Solves A x = b for symmetric positive definite A via Cholesky, adding a
// small ridge and retrying if the factorization stalls. Throws numeric_error
// when the system stays singular after the largest jitter.
inline Vec solve_spd(Mat A, Vec b) {
  const std::size_t n = A.rows;
  if (A.cols != n || b.size() != n) throw dimension_error("solve_spd: shape mismatch");
  for (double jitter : {0.0, 1e-10, 1e-7, 1e-4}) {
    Mat L = A;
    for (std::size_t i = 0; i < n; ++i) L(i, i) += jitter;
    bool ok = true;
    for (std::size_t j = 0; j < n && ok; ++j) {
      double d = L(j, j);
      for (std::size_t k = 0; k < j; ++k) d -= L(j, k) * L(j, k);
      if (!(d > 0.0) || !std::isfinite(d)) {
        ok = false;
        break;
      }
      d = std::sqrt(d);
      L(j, j) = d;
      for (std::size_t i = j + 1; i < n; ++i) {
        double s = L(i, j);
        for (std::size_t k = 0; k < j; ++k) s -= L(i, k) * L(j, k);
        L(i, j) = s / d;
      }
    }
    if (!ok) continue;
    // Forward then backward substitution on the lower factor.
    Vec y(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = b[i];
      for (std::size_t k = 0; k < i; ++k) s -= L(i, k) * y[k];
      y[i] = s / L(i, i);
    }
    Vec x(n);
    for (std::size_t ii = n; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t k = ii + 1; k < n; ++k) s -= L(k, ii) * x[k];
      x[ii] = s / L(ii, ii);
    }
    if (all_finite(x)) return x;
  }
  throw numeric_error("solve_spd: matrix not positive definite after jitter");
}

// General small-system solver (partial-pivot Gaussian elimination).
inline Vec solve_linear(Mat A, Vec b) {
  const std::size_t n = A.rows;
  if (A.cols != n || b.size() != n) throw dimension_error("solve_linear: shape mismatch");
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t i = col + 1; i < n; ++i)
      if (std::fabs(A(i, col)) > std::fabs(A(piv, col))) piv = i;
    if (std::fabs(A(piv, col)) < 1e-14)
      throw numeric_error("solve_linear: singular system");
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(A(col, j), A(piv, j));
      std::swap(b[col], b[piv]);
    }
    for (std::size_t i = col + 1; i < n; ++i) {
      double f = A(i, col) / A(col, col);
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) A(i, j) -= f * A(col, j);
      b[i] -= f * b[col];
    }
  }
  Vec x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t j = ii + 1; j < n; ++j) s -= A(ii, j) * x[j];
    x[ii] = s / A(ii, ii);
  }
  return x;
}

inline double mean(std::span<const double> v) {
  if (v.empty()) throw dimension_error("mean: empty input");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Unbiased sample variance (n-1 denominator).
inline double sample_variance(std::span<const double> v) {
  if (v.size() < 2) throw dimension_error("sample_variance: need at least 2 values");
  double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

inline double sample_sd(std::span<const double> v) { return std::sqrt(sample_variance(v)); }

}  // namespace aem
