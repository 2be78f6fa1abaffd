// SPDX-License-Identifier: Apache-2.0
#include "clora/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "clora/errors.hpp"

namespace clora {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape());
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::gaussian(std::size_t rows, std::size_t cols, double stddev,
                        std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& v : m.data_) v = dist(rng);
  return m;
}

std::string Matrix::shape() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

bool Matrix::identical(const Matrix& other) const {
  return rows_ == other.rows_ && cols_ == other.cols_ &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(),
                      data_.size() * sizeof(double)) == 0);
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape() +
                     " vs " + b.shape());
  }
}

Matrix matmul(const Matrix& a, const Matrix& b, FlopMeter* meter) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + a.shape() + " * " +
                     b.shape());
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Matrix c(n, m);
  auto A = a.data();
  auto B = b.data();
  auto C = c.data();
  // i-k-j order keeps the inner loop contiguous in both B and C.
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = C.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = B.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  }
  if (meter) meter->matmul_flops += 2ull * n * k * m;
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

namespace {

template <typename F>
Matrix zip(const Matrix& a, const Matrix& b, const char* op, FlopMeter* meter,
           F f) {
  require_same_shape(a, b, op);
  Matrix c(a.rows(), a.cols());
  auto A = a.data();
  auto B = b.data();
  auto C = c.data();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = f(A[i], B[i]);
  if (meter) meter->other_flops += C.size();
  return c;
}

}  // namespace

Matrix add(const Matrix& a, const Matrix& b, FlopMeter* meter) {
  return zip(a, b, "add", meter, [](double x, double y) { return x + y; });
}

Matrix sub(const Matrix& a, const Matrix& b, FlopMeter* meter) {
  return zip(a, b, "sub", meter, [](double x, double y) { return x - y; });
}

Matrix hadamard(const Matrix& a, const Matrix& b, FlopMeter* meter) {
  return zip(a, b, "hadamard", meter, [](double x, double y) { return x * y; });
}

Matrix scale(const Matrix& a, double s, FlopMeter* meter) {
  Matrix c = a;
  for (double& v : c.data()) v *= s;
  if (meter) meter->other_flops += c.size();
  return c;
}

double frobenius_sq(const Matrix& a, FlopMeter* meter) {
  double acc = 0.0;
  for (double v : a.data()) acc += v * v;
  if (meter) meter->other_flops += 2 * a.size();
  return acc;
}

double frobenius(const Matrix& a) { return std::sqrt(frobenius_sq(a)); }

double sum(const Matrix& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return acc;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double relative_error(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "relative_error");
  const double diff = frobenius(sub(a, b));
  const double ref = frobenius(b);
  return ref > 0.0 ? diff / ref : diff;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  return max_abs(sub(a, b));
}

}  // namespace clora
