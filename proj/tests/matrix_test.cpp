#include "clora/matrix.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "clora/errors.hpp"

namespace clora {
namespace {

Matrix triple_loop(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

TEST(Matrix, ConstructionChecksLength) {
  EXPECT_THROW(Matrix(2, 3, std::vector<double>(5)), ShapeError);
  const Matrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m.size(), 6u);
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_EQ(m.shape(), "(2x3)");
}

TEST(Matrix, IdentityTimesMIsM) {
  std::mt19937_64 rng(1);
  const Matrix m = Matrix::gaussian(3, 3, 1.0, rng);
  EXPECT_TRUE(matmul(Matrix::identity(3), m).identical(m));
}

TEST(Matrix, HandArithmetic) {
  const Matrix c = matmul(Matrix{{1, 2}}, Matrix{{3}, {4}});
  ASSERT_EQ(c.shape(), "(1x1)");
  EXPECT_EQ(c(0, 0), 11.0);
}

TEST(Matrix, MatmulMatchesTripleLoop) {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Matrix a = Matrix::gaussian(5, 4, 1.0, rng);
    const Matrix b = Matrix::gaussian(4, 3, 1.0, rng);
    EXPECT_LT(max_abs_diff(matmul(a, b), triple_loop(a, b)), 1e-12);
  }
}

TEST(Matrix, MatmulShapeErrorNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(4, 5));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2x3)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(4x5)"), std::string::npos) << msg;
  }
}

TEST(Matrix, MatmulAssociative) {
  for (int seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const Matrix a = Matrix::gaussian(6, 5, 1.0, rng);
    const Matrix b = Matrix::gaussian(5, 7, 1.0, rng);
    const Matrix c = Matrix::gaussian(7, 4, 1.0, rng);
    EXPECT_LT(relative_error(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-9);
  }
}

TEST(FlopMeter, SquareMatmulIsTwoDCubed) {
  for (std::size_t d : {1u, 3u, 16u, 33u}) {
    FlopMeter meter;
    matmul(Matrix(d, d, 1.0), Matrix(d, d, 1.0), &meter);
    EXPECT_EQ(meter.matmul_flops, 2 * d * d * d);
    EXPECT_EQ(meter.other_flops, 0u);
  }
}

TEST(FlopMeter, RectangularMatmulIsTwoABC) {
  FlopMeter meter;
  matmul(Matrix(3, 5), Matrix(5, 7), &meter);
  EXPECT_EQ(meter.matmul_flops, 2u * 3 * 5 * 7);
  meter.reset();
  EXPECT_EQ(meter.total(), 0u);
}

TEST(Matrix, FrobeniusSq) {
  EXPECT_EQ(frobenius_sq(Matrix(3, 3)), 0.0);
  EXPECT_EQ(frobenius_sq(Matrix{{3, 4}}), 25.0);
  std::mt19937_64 rng(4);
  const Matrix a = Matrix::gaussian(4, 4, 1.0, rng);
  double s = 0;
  for (double v : a.data()) s += v * v;
  EXPECT_NEAR(frobenius_sq(a), s, 1e-12);
}

TEST(Matrix, ElementwiseOps) {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{5, 6}, {7, 8}};
  EXPECT_TRUE(add(a, b).identical(Matrix{{6, 8}, {10, 12}}));
  EXPECT_TRUE(sub(b, a).identical(Matrix{{4, 4}, {4, 4}}));
  EXPECT_TRUE(hadamard(a, b).identical(Matrix{{5, 12}, {21, 32}}));
  EXPECT_TRUE(scale(a, 2).identical(Matrix{{2, 4}, {6, 8}}));
  EXPECT_TRUE(transpose(Matrix{{1, 2, 3}}).identical(Matrix{{1}, {2}, {3}}));
  EXPECT_THROW(add(a, Matrix(2, 3)), ShapeError);
  EXPECT_EQ(sum(a), 10.0);
  EXPECT_EQ(max_abs(Matrix{{-9, 2}}), 9.0);
}

TEST(Matrix, FiniteOutputsFromFiniteInputs) {
  std::mt19937_64 rng(9);
  const Matrix a = Matrix::gaussian(8, 8, 10.0, rng);
  EXPECT_TRUE(matmul(a, a).all_finite());
  Matrix bad = a;
  bad(0, 0) = std::nan("");
  EXPECT_FALSE(bad.all_finite());
}

}  // namespace
}  // namespace clora
