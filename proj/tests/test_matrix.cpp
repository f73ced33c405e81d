// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "dora/errors.hpp"
#include "dora/matrix.hpp"
#include "dora/rng.hpp"

using namespace dora;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double s = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = s * rng.gaussian();
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  REQUIRE(a.same_shape(b));
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  }
  return d;
}

// Independent triple-loop product, accumulated in long double.
Matrix matmul_oracle(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double acc = 0.0L;
      for (std::size_t l = 0; l < a.cols(); ++l) acc += (long double)a(i, l) * b(l, j);
      out(i, j) = (double)acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("matmul agrees with a long-double loop oracle on random shapes") {
  Rng rng(1);
  for (int it = 0; it < 25; ++it) {
    const std::size_t m = 1 + rng.next_below(9);
    const std::size_t k = 1 + rng.next_below(9);
    const std::size_t n = 1 + rng.next_below(9);
    const Matrix a = random_matrix(rng, m, k);
    const Matrix b = random_matrix(rng, k, n);
    CHECK(max_abs_diff(matmul(a, b), matmul_oracle(a, b)) < 1e-13);
  }
}

TEST_CASE("matmul by the identity is exact") {
  Rng rng(2);
  const Matrix a = random_matrix(rng, 6, 6);
  CHECK(matmul(a, Matrix::identity(6)) == a);
  CHECK(matmul(Matrix::identity(6), a) == a);
}

TEST_CASE("matmul rejects inner-dimension mismatch") {
  CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(4, 2)), ShapeError);
}

TEST_CASE("elementwise ops match loops and reject shape mismatch") {
  Rng rng(3);
  const Matrix a = random_matrix(rng, 4, 5);
  const Matrix b = random_matrix(rng, 4, 5);
  const Matrix s = add(a, b);
  const Matrix d = sub(a, b);
  const Matrix h = hadamard(a, b);
  const Matrix c = scale(a, -2.5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(s.data()[i] == a.data()[i] + b.data()[i]);
    CHECK(d.data()[i] == a.data()[i] - b.data()[i]);
    CHECK(h.data()[i] == a.data()[i] * b.data()[i]);
    CHECK(c.data()[i] == -2.5 * a.data()[i]);
  }
  CHECK_THROWS_AS(add(a, Matrix(5, 4)), ShapeError);
  CHECK_THROWS_AS(sub(a, Matrix(4, 4)), ShapeError);
  CHECK_THROWS_AS(hadamard(a, Matrix(3, 5)), ShapeError);
}

TEST_CASE("transpose is an involution and distributes over matmul") {
  Rng rng(4);
  const Matrix a = random_matrix(rng, 3, 7);
  const Matrix b = random_matrix(rng, 7, 2);
  CHECK(transpose(transpose(a)) == a);
  CHECK(max_abs_diff(transpose(matmul(a, b)), matmul(transpose(b), transpose(a))) == 0.0);
}

TEST_CASE("dot and norm match direct accumulation") {
  Rng rng(5);
  std::vector<double> u(9), v(9);
  for (double& x : u) x = rng.gaussian();
  for (double& x : v) x = rng.gaussian();
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
  CHECK(dot(u, v) == doctest::Approx(acc).epsilon(1e-15));
  CHECK(norm(u) == doctest::Approx(std::sqrt(dot(u, u))).epsilon(1e-15));
  CHECK_THROWS_AS(dot(u, std::vector<double>(3)), ShapeError);
}

TEST_CASE("column_norms matches the per-column loop") {
  Rng rng(6);
  const Matrix w = random_matrix(rng, 5, 8);
  const RowVector n = column_norms(w);
  REQUIRE(n.cols() == 8);
  for (std::size_t j = 0; j < 8; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 5; ++i) acc += w(i, j) * w(i, j);
    CHECK(n[j] == doctest::Approx(std::sqrt(acc)).epsilon(1e-15));
  }
}

TEST_CASE("normalize_columns yields unit columns and reconstructs the input") {
  Rng rng(7);
  const Matrix w = random_matrix(rng, 6, 4);
  const Matrix u = normalize_columns(w);
  const RowVector n = column_norms(w);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(norm(u.col(j)) == doctest::Approx(1.0).epsilon(1e-14));
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(u(i, j) * n[j] == doctest::Approx(w(i, j)).epsilon(1e-13));
    }
  }
}

TEST_CASE("normalize_columns maps a zero column to zero instead of dividing by zero") {
  Matrix w(3, 2);
  w(0, 1) = 4.0;
  const Matrix u = normalize_columns(w);
  CHECK(u(0, 0) == 0.0);
  CHECK(u(1, 0) == 0.0);
  CHECK(u(2, 0) == 0.0);
  CHECK(u(0, 1) == 1.0);
}

TEST_CASE("column_cosine returns exactly 1 and -1 on equal and opposite vectors") {
  Rng rng(8);
  for (int it = 0; it < 50; ++it) {
    std::vector<double> v(1 + rng.next_below(12));
    for (double& x : v) x = rng.gaussian() * std::pow(10.0, (double)rng.next_below(6) - 3.0);
    std::vector<double> neg(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) neg[i] = -v[i];
    CHECK(column_cosine(v, v) == 1.0);
    CHECK(column_cosine(v, neg) == -1.0);
    CHECK(column_cosine(neg, v) == -1.0);
  }
}

TEST_CASE("column_cosine basics: orthogonality, scale invariance, clamp, zeros") {
  std::vector<double> e1{1.0, 0.0, 0.0};
  std::vector<double> e2{0.0, 1.0, 0.0};
  CHECK(column_cosine(e1, e2) == 0.0);

  Rng rng(9);
  std::vector<double> u(6), v(6);
  for (double& x : u) x = rng.gaussian();
  for (double& x : v) x = rng.gaussian();
  std::vector<double> u3(6);
  for (std::size_t i = 0; i < 6; ++i) u3[i] = 3.0 * u[i];
  CHECK(std::abs(column_cosine(u3, v) - column_cosine(u, v)) < 1e-15);

  // Nearly parallel vectors must stay clamped inside [-1, 1].
  std::vector<double> a{1.0, 1e-9};
  std::vector<double> b{1.0, 0.0};
  const double c = column_cosine(a, b);
  CHECK(c <= 1.0);
  CHECK(c > 0.999999);

  const std::vector<double> z(3, 0.0);
  CHECK(column_cosine(z, z) == 0.0);
  CHECK(column_cosine(z, e1) == 0.0);
  CHECK_THROWS_AS(column_cosine(e1, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("pearson matches an independent two-pass oracle") {
  Rng rng(10);
  std::vector<double> xs(40), ys(40);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    xs[i] = rng.gaussian();
    ys[i] = 0.7 * xs[i] + 0.4 * rng.gaussian();
  }
  long double mx = 0.0L, my = 0.0L;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= (long double)xs.size();
  my /= (long double)ys.size();
  long double sxy = 0.0L, sxx = 0.0L, syy = 0.0L;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  const double oracle = (double)(sxy / std::sqrt(sxx * syy));
  CHECK(pearson(xs, ys) == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("pearson is exactly +/-1 on perfect lines and throws on degenerate input") {
  std::vector<double> xs{1.0, 2.0, 3.0, 4.0};
  std::vector<double> up{5.0, 7.0, 9.0, 11.0};
  std::vector<double> down{1.0, 0.0, -1.0, -2.0};
  CHECK(pearson(xs, up) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(pearson(xs, down) == doctest::Approx(-1.0).epsilon(1e-14));

  const std::vector<double> flat{2.0, 2.0, 2.0, 2.0};
  CHECK_THROWS_WITH_AS(pearson(flat, up), doctest::Contains("xs"), DegenerateVarianceError);
  CHECK_THROWS_WITH_AS(pearson(xs, flat), doctest::Contains("ys"), DegenerateVarianceError);
  CHECK_THROWS_AS(pearson(std::vector<double>{1.0}, std::vector<double>{2.0}),
                  DegenerateVarianceError);
  CHECK_THROWS_AS(pearson(xs, std::vector<double>{1.0, 2.0}), ShapeError);
}

TEST_CASE("ls_slope recovers the slope of a line and matches the normal equation") {
  std::vector<double> xs{0.0, 1.0, 2.0, 3.0, 4.0};
  std::vector<double> ys{1.0, 3.5, 6.0, 8.5, 11.0};
  CHECK(ls_slope(xs, ys) == doctest::Approx(2.5).epsilon(1e-14));

  Rng rng(11);
  std::vector<double> rx(30), ry(30);
  for (std::size_t i = 0; i < rx.size(); ++i) {
    rx[i] = rng.gaussian();
    ry[i] = -1.3 * rx[i] + rng.gaussian();
  }
  long double mx = 0.0L, my = 0.0L;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= (long double)rx.size();
  my /= (long double)ry.size();
  long double sxy = 0.0L, sxx = 0.0L;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
  }
  CHECK(ls_slope(rx, ry) == doctest::Approx((double)(sxy / sxx)).epsilon(1e-12));
  CHECK_THROWS_AS(ls_slope(std::vector<double>{1.0, 1.0}, std::vector<double>{0.0, 5.0}),
                  DegenerateVarianceError);
}

TEST_CASE("softmax_columns is a stable column distribution") {
  Rng rng(12);
  Matrix a = random_matrix(rng, 5, 6, 2.0);
  // Push one column to extreme magnitudes: stability must hold.
  for (std::size_t i = 0; i < 5; ++i) a(i, 0) += 1e6;
  const Matrix p = softmax_columns(a);
  CHECK(p.all_finite());
  for (std::size_t j = 0; j < 6; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(p(i, j) >= 0.0);
      s += p(i, j);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
  //

  // Shift invariance per column.
  Matrix b = a;
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 6; ++j) b(i, j) += 7.5;
  }
  CHECK(max_abs_diff(softmax_columns(b), p) < 1e-14);

  const Matrix ls = log_softmax_columns(a);
  CHECK(ls.all_finite());
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      CHECK(std::exp(ls(i, j)) == doctest::Approx(p(i, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("matrix constructors, equality, and finiteness checks") {
  CHECK_THROWS_AS(Matrix(2, 3, std::vector<double>{1.0, 2.0}), ShapeError);
  const Matrix i3 = Matrix::identity(3);
  CHECK(i3(0, 0) == 1.0);
  CHECK(i3(0, 1) == 0.0);

  const Matrix fr = Matrix::from_rows({{1.0, 2.0}, {3.0, 4.0}});
  CHECK(fr.rows() == 2);
  CHECK(fr(1, 0) == 3.0);
  CHECK_THROWS_AS(Matrix::from_rows({{1.0}, {2.0, 3.0}}), ShapeError);

  Matrix a(2, 2);
  Matrix b(2, 2);
  CHECK(a == b);
  b(1, 1) = 1e-300;
  CHECK(a != b);

  Matrix bad(1, 2);
  bad(0, 0) = std::nan("");
  CHECK_FALSE(bad.all_finite());
  bad(0, 0) = 1.0;
  CHECK(bad.all_finite());

  CHECK(a.shape_str() == "2x2");

  RowVector rv(std::vector<double>{1.0, 2.0, 3.0});
  const Matrix rm = rv.to_matrix();
  CHECK(rm.rows() == 1);
  CHECK(rm.cols() == 3);
  const RowVector back = RowVector::from_matrix(rm);
  CHECK(back.cols() == 3);
  CHECK(back[2] == 3.0);
  CHECK_THROWS_AS(RowVector::from_matrix(Matrix(2, 2)), ShapeError);
}

TEST_CASE("column access helpers round trip") {
  Rng rng(13);
  Matrix a = random_matrix(rng, 4, 3);
  const std::vector<double> c1 = a.col(1);
  REQUIRE(c1.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(c1[i] == a(i, 1));
  std::vector<double> repl{9.0, 8.0, 7.0, 6.0};
  a.set_col(2, repl);
  for (std::size_t i = 0; i < 4; ++i) CHECK(a(i, 2) == repl[i]);
  CHECK_THROWS_AS(a.set_col(2, std::vector<double>{1.0}), ShapeError);
}
