// SPDX-License-Identifier: Apache-2.0
#include "dora/matrix.hpp"

#include <algorithm>
#include <cmath>

namespace dora {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                     " does not fill " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Matrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
    std::size_t j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

std::vector<double> Matrix::col(std::size_t j) const {
  std::vector<double> out(rows_);
  for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
  return out;
}

void Matrix::set_col(std::size_t j, const std::vector<double>& v) {
  if (v.size() != rows_) {
    throw ShapeError("Matrix::set_col: column length " + std::to_string(v.size()) +
                     " vs " + std::to_string(rows_) + " rows");
  }
  for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = v[i];
}

std::string Matrix::shape_str() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

bool Matrix::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool operator==(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && a.data() == b.data();
}

RowVector RowVector::from_matrix(const Matrix& m) {
  if (m.rows() != 1) throw ShapeError("RowVector::from_matrix: expected 1 row, got " + m.shape_str());
  return RowVector(m.data());
}

// ----- elementwise and product ops -----

namespace {
void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}
}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t l = 0; l < a.cols(); ++l) {
      const double ail = a(i, l);
      if (ail == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += ail * b(l, j);
    }
  }
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

Matrix scale(const Matrix& a, double c) {
  Matrix out = a;
  for (double& v : out.data()) v *= c;
  return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

// ----- column geometry -----

double dot(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size()) {
    throw ShapeError("dot: length mismatch " + std::to_string(u.size()) + " vs " +
                     std::to_string(v.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

double norm(const std::vector<double>& u) { return std::sqrt(dot(u, u)); }

RowVector column_norms(const Matrix& w) {
  RowVector out(w.cols());
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < w.rows(); ++i) s += w(i, j) * w(i, j);
    out[j] = std::sqrt(s);
  }
  return out;
}

Matrix normalize_columns(const Matrix& w, double eps) {
  const RowVector n = column_norms(w);
  Matrix out = w;
  for (std::size_t j = 0; j < w.cols(); ++j) {
    const double d = std::max(n[j], eps);
    for (std::size_t i = 0; i < w.rows(); ++i) out(i, j) /= d;
  }
  return out;
}

double column_cosine(const std::vector<double>& u, const std::vector<double>& v, double eps) {
  if (u.size() != v.size()) {
    throw ShapeError("column_cosine: length mismatch " + std::to_string(u.size()) + " vs " +
                     std::to_string(v.size()));
  }
  bool same = true, anti = true;
  for (std::size_t i = 0; i < u.size() && (same || anti); ++i) {
    if (u[i] != v[i]) same = false;
    if (u[i] != -v[i]) anti = false;
  }
  const bool zero_u = std::all_of(u.begin(), u.end(), [](double x) { return x == 0.0; });
  if (!zero_u) {
    if (same) return 1.0;
    if (anti) return -1.0;
  }
  const double den = std::max(norm(u) * norm(v), eps);
  return std::clamp(dot(u, v) / den, -1.0, 1.0);
}

Matrix softmax_columns(const Matrix& a) {
  Matrix p(a.rows(), a.cols());
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double mx = a(0, j);
    for (std::size_t i = 1; i < a.rows(); ++i) mx = std::max(mx, a(i, j));
    double sum = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      const double e = std::exp(a(i, j) - mx);
      p(i, j) = e;
      sum += e;
    }
    for (std::size_t i = 0; i < a.rows(); ++i) p(i, j) /= sum;
  }
  return p;
}

Matrix log_softmax_columns(const Matrix& a) {
  Matrix ls(a.rows(), a.cols());
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double mx = a(0, j);
    for (std::size_t i = 1; i < a.rows(); ++i) mx = std::max(mx, a(i, j));
    double sum = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) sum += std::exp(a(i, j) - mx);
    const double lse = std::log(sum);
    for (std::size_t i = 0; i < a.rows(); ++i) ls(i, j) = a(i, j) - mx - lse;
  }
  return ls;
}

// ----- summary statistics -----

namespace {
struct Centered {
  double mean;
  bool constant;
};

Centered center_info(const std::vector<double>& xs) {
  double mn = xs[0], mx = xs[0], sum = 0.0;
  for (double x : xs) {
    mn = std::min(mn, x);
    mx = std::max(mx, x);
    sum += x;
  }
  return {sum / static_cast<double>(xs.size()), mn == mx};
}

void require_stat_input(const std::vector<double>& xs, const std::vector<double>& ys,
                        const char* op) {
  if (xs.size() != ys.size()) {
    throw ShapeError(std::string(op) + ": length mismatch " + std::to_string(xs.size()) +
                     " vs " + std::to_string(ys.size()));
  }
  if (xs.size() < 2) {
    throw DegenerateVarianceError(std::string(op) + ": need at least 2 points, got " +
                                  std::to_string(xs.size()));
  }
}
}  // namespace

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  require_stat_input(xs, ys, "pearson");
  const Centered cx = center_info(xs);
  const Centered cy = center_info(ys);
  if (cx.constant) throw DegenerateVarianceError("pearson: xs is constant");
  if (cy.constant) throw DegenerateVarianceError("pearson: ys is constant");
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - cx.mean;
    const double dy = ys[i] - cy.mean;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0) throw DegenerateVarianceError("pearson: xs is constant");
  if (syy == 0.0) throw DegenerateVarianceError("pearson: ys is constant");
  return sxy / std::sqrt(sxx * syy);
}

double ls_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  require_stat_input(xs, ys, "ls_slope");
  const Centered cx = center_info(xs);
  if (cx.constant) throw DegenerateVarianceError("ls_slope: xs is constant");
  const Centered cy = center_info(ys);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - cx.mean;
    sxx += dx * dx;
    sxy += dx * (ys[i] - cy.mean);
  }
  if (sxx == 0.0) throw DegenerateVarianceError("ls_slope: xs is constant");
  return sxy / sxx;
}

}  // namespace dora
