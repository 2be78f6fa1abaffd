// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace clora {

/// Operation-count accumulator.
///
/// Convention: one multiply-add is two FLOPs, so a product of an (a x b) and
/// a (b x c) matrix adds exactly 2abc to `matmul_flops`. Element-wise work is
/// charged to `other_flops` at a small constant per element (see each kernel).
/// Only forward evaluation is metered; reverse-mode sweeps are not counted.
struct FlopMeter {
  std::uint64_t matmul_flops = 0;
  std::uint64_t other_flops = 0;

  std::uint64_t total() const { return matmul_flops + other_flops; }
  void reset() { matmul_flops = other_flops = 0; }
};

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  /// Row-list literal, e.g. `Matrix{{1, 2}, {3, 4}}`.
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix gaussian(std::size_t rows, std::size_t cols, double stddev,
                         std::mt19937_64& rng);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::string shape() const;

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(data_).subspan(i * cols_, cols_);
  }

  bool all_finite() const;
  /// Bitwise equality of shape and every entry.
  bool identical(const Matrix& other) const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b, FlopMeter* meter = nullptr);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b, FlopMeter* meter = nullptr);
Matrix sub(const Matrix& a, const Matrix& b, FlopMeter* meter = nullptr);
Matrix scale(const Matrix& a, double s, FlopMeter* meter = nullptr);
Matrix hadamard(const Matrix& a, const Matrix& b, FlopMeter* meter = nullptr);

/// Sum of squared entries.
double frobenius_sq(const Matrix& a, FlopMeter* meter = nullptr);
double frobenius(const Matrix& a);
double sum(const Matrix& a);
double max_abs(const Matrix& a);

/// ||a - b||_F / ||b||_F, or the absolute Frobenius distance when b is zero.
double relative_error(const Matrix& a, const Matrix& b);
double max_abs_diff(const Matrix& a, const Matrix& b);

void require_same_shape(const Matrix& a, const Matrix& b, const char* op);

}  // namespace clora
