// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "dora/errors.hpp"

namespace dora {

// Epsilon guard used wherever a column norm appears in a denominator.
inline constexpr double kDefaultEps = 1e-12;

// Dense row-major f64 matrix with value semantics. Every operation is defined
// on whole matrices; there are no views. Desk scale by design.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }
  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  std::vector<double> col(std::size_t j) const;
  void set_col(std::size_t j, const std::vector<double>& v);

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_str() const;
  bool all_finite() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

bool operator==(const Matrix& a, const Matrix& b);
inline bool operator!=(const Matrix& a, const Matrix& b) { return !(a == b); }

// Length-k row of per-column scalars (the magnitude vector of the
// decomposition). Thin wrapper so intent shows up in signatures.
class RowVector {
 public:
  RowVector() = default;
  explicit RowVector(std::size_t cols) : data_(cols, 0.0) {}
  explicit RowVector(std::vector<double> data) : data_(std::move(data)) {}

  std::size_t cols() const { return data_.size(); }
  double& operator[](std::size_t j) { return data_[j]; }
  double operator[](std::size_t j) const { return data_[j]; }
  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  Matrix to_matrix() const { return Matrix(1, data_.size(), data_); }
  static RowVector from_matrix(const Matrix& m);

 private:
  std::vector<double> data_;
};

// ----- elementwise and product ops -----

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double c);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

// ----- column geometry -----

double dot(const std::vector<double>& u, const std::vector<double>& v);
double norm(const std::vector<double>& u);

// Euclidean norm of each column, as a length-k row.
RowVector column_norms(const Matrix& w);

// Each column divided by max(its norm, eps). Never divides by zero; a zero
// column maps to a zero column with eps = kDefaultEps.
Matrix normalize_columns(const Matrix& w, double eps = kDefaultEps);

// cos(u, v) = u.v / max(|u||v|, eps), clamped to [-1, 1]. Exact 1.0 / -1.0
// when u == v / u == -v elementwise: the formula only reaches 1 +/- ulp and
// downstream zero-drift checks need the exact value.
double column_cosine(const std::vector<double>& u, const std::vector<double>& v,
                     double eps = kDefaultEps);

// Numerically stable column softmax / log-softmax (max-subtracted).
Matrix softmax_columns(const Matrix& a);
Matrix log_softmax_columns(const Matrix& a);

// ----- summary statistics -----

// Pearson correlation. Throws DegenerateVarianceError naming the constant
// sequence ("xs" or "ys").
double pearson(const std::vector<double>& xs, const std::vector<double>& ys);

// Least-squares slope of ys on xs. Throws DegenerateVarianceError when xs is
// constant.
double ls_slope(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace dora
