#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace qlab {

// Row-major dense matrices. Float storage is the at-rest format for weights;
// double storage is used for accumulators and intermediate math.
struct MatF {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> a;

  MatF() = default;
  MatF(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0f) {}

  float& at(std::size_t r, std::size_t c) { return a[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return a[r * cols + c]; }
  float* row(std::size_t r) { return a.data() + r * cols; }
  const float* row(std::size_t r) const { return a.data() + r * cols; }
  std::size_t size() const { return a.size(); }
};

struct MatD {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> a;

  MatD() = default;
  MatD(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return a[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return a[r * cols + c]; }
  double* row(std::size_t r) { return a.data() + r * cols; }
  const double* row(std::size_t r) const { return a.data() + r * cols; }
  std::size_t size() const { return a.size(); }

  void fill(double v) { a.assign(a.size(), v); }
};

// Four interleaved partial sums; this fixed association is the canonical
// reduction order for every dot product in the project, and it lets the
// compiler vectorize without reassociation flags.
inline double dot_d(const double* x, const double* y, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += x[i] * y[i];
    s1 += x[i + 1] * y[i + 1];
    s2 += x[i + 2] * y[i + 2];
    s3 += x[i + 3] * y[i + 3];
  }
  double t = 0.0;
  for (; i < n; ++i) t += x[i] * y[i];
  return ((s0 + s2) + (s1 + s3)) + t;
}

inline double dot_fd(const float* x, const double* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(x[i]) * y[i];
  return s;
}

// C = A * B^T, with A m-by-k and B n-by-k. Both operands are walked
// contiguously along k, which is the cache-friendly layout for the
// double-accumulation inner product.
inline MatD matmul_nt(const MatD& A, const MatD& B) {
  assert(A.cols == B.cols);
  MatD C(A.rows, B.rows);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t j = 0; j < B.rows; ++j)
      C.at(i, j) = dot_d(A.row(i), B.row(j), A.cols);
  return C;
}

// y += a * x over contiguous rows; the axpy building block of the two
// gradient-side products below.
inline void axpy_d(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// C += A * B with A m-by-k and B k-by-n, accumulated row-wise so both B and
// C stream contiguously.
inline void addmul_nn(MatD& C, const MatD& A, const MatD& B) {
  assert(A.cols == B.rows && C.rows == A.rows && C.cols == B.cols);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t k = 0; k < A.cols; ++k)
      axpy_d(A.at(i, k), B.row(k), C.row(i), B.cols);
}

// C += A^T * B with A t-by-m and B t-by-n: a sum of outer products, used for
// weight gradients dW = dY^T X.
inline void addmul_tn(MatD& C, const MatD& A, const MatD& B) {
  assert(A.rows == B.rows && C.rows == A.cols && C.cols == B.cols);
  for (std::size_t t = 0; t < A.rows; ++t)
    for (std::size_t i = 0; i < A.cols; ++i)
      axpy_d(A.at(t, i), B.row(t), C.row(i), B.cols);
}

inline MatD transpose(const MatD& A) {
  MatD T(A.cols, A.rows);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t j = 0; j < A.cols; ++j) T.at(j, i) = A.at(i, j);
  return T;
}

inline MatD to_double(const MatF& A) {
  MatD D(A.rows, A.cols);
  for (std::size_t i = 0; i < A.size(); ++i) D.a[i] = A.a[i];
  return D;
}

inline MatF to_float(const MatD& A) {
  MatF F(A.rows, A.cols);
  for (std::size_t i = 0; i < A.size(); ++i) F.a[i] = static_cast<float>(A.a[i]);
  return F;
}

}  // namespace qlab
