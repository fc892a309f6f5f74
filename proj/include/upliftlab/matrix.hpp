#pragma once

// Dense row-major matrix of doubles. Deliberately minimal: the training
// engine only needs affine maps, elementwise ops and transposed products.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace upliftlab {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // row-major, rows*cols entries

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  const double* row(std::size_t i) const { return data.data() + i * cols; }
  double* row(std::size_t i) { return data.data() + i * cols; }

  std::size_t size() const { return data.size(); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

inline void check_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* what) {
  if (m.rows != rows || m.cols != cols)
    throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(rows) + "x" +
                                std::to_string(cols) + ", got " + std::to_string(m.rows) + "x" +
                                std::to_string(m.cols));
}

// out = a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
  Matrix out(a.rows, b.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ar = a.row(i);
    double* outr = out.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double av = ar[k];
      if (av == 0.0) continue;
      const double* br = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) outr[j] += av * br[j];
    }
  }
  return out;
}

// out = a^T * b (a: N x R, b: N x C -> R x C); used for weight gradients.
inline Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw std::invalid_argument("matmul_at_b: row counts differ");
  Matrix out(a.cols, b.cols, 0.0);
  for (std::size_t n = 0; n < a.rows; ++n) {
    const double* ar = a.row(n);
    const double* br = b.row(n);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* outr = out.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) outr[j] += av * br[j];
    }
  }
  return out;
}

// out = a * b^T (a: N x C, b: R x C -> N x R); used to push gradients back.
inline Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw std::invalid_argument("matmul_a_bt: column counts differ");
  Matrix out(a.rows, b.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ar = a.row(i);
    double* outr = out.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* br = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) acc += ar[k] * br[k];
      outr[j] = acc;
    }
  }
  return out;
}

inline Matrix concat_cols(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw std::invalid_argument("concat_cols: row counts differ");
  Matrix out(a.rows, a.cols + b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* outr = out.row(i);
    const double* ar = a.row(i);
    const double* br = b.row(i);
    for (std::size_t j = 0; j < a.cols; ++j) outr[j] = ar[j];
    for (std::size_t j = 0; j < b.cols; ++j) outr[a.cols + j] = br[j];
  }
  return out;
}

inline void split_cols(const Matrix& m, std::size_t left_cols, Matrix& left, Matrix& right) {
  if (left_cols > m.cols) throw std::invalid_argument("split_cols: split point out of range");
  left = Matrix(m.rows, left_cols);
  right = Matrix(m.rows, m.cols - left_cols);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double* r = m.row(i);
    for (std::size_t j = 0; j < left_cols; ++j) left(i, j) = r[j];
    for (std::size_t j = left_cols; j < m.cols; ++j) right(i, j - left_cols) = r[j];
  }
}

inline void add_in_place(Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("add_in_place: shape mismatch");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

inline Matrix select_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), m.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double* src = m.row(idx[i]);
    double* dst = out.row(i);
    for (std::size_t j = 0; j < m.cols; ++j) dst[j] = src[j];
  }
  return out;
}

}  // namespace upliftlab
