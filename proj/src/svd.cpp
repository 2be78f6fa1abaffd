// SPDX-License-Identifier: Apache-2.0
#include "clora/svd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "clora/errors.hpp"

namespace clora {

std::vector<double> singular_values(const Matrix& a, int max_sweeps) {
  if (a.empty()) return {};
  // Work on columns of the orientation with rows >= cols.
  Matrix w = a.rows() >= a.cols() ? a : transpose(a);
  const std::size_t m = w.rows(), n = w.cols();

  // Column-major copy so each column is contiguous.
  std::vector<std::vector<double>> col(n, std::vector<double>(m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) col[j][i] = w(i, j);

  constexpr double eps = std::numeric_limits<double>::epsilon();
  bool converged = false;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += col[p][i] * col[p][i];
          beta += col[q][i] * col[q][i];
          gamma += col[p][i] * col[q][i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta))
          continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double xp = col[p][i], xq = col[q][i];
          col[p][i] = c * xp - s * xq;
          col[q][i] = s * xp + c * xq;
        }
      }
    }
  }
  if (!converged) {
    throw NumericError("singular_values: Jacobi SVD did not converge in " +
                       std::to_string(max_sweeps) + " sweeps for " + a.shape());
  }

  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s2 = 0;
    for (double v : col[j]) s2 += v * v;
    sv[j] = std::sqrt(s2);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

std::size_t numerical_rank(const Matrix& a, double tol) {
  if (!(tol > 0.0)) throw ContractError("numerical_rank: tol must be > 0");
  const auto sv = singular_values(a);
  if (sv.empty() || sv.front() == 0.0) return 0;
  const double cut = tol * sv.front();
  return static_cast<std::size_t>(
      std::count_if(sv.begin(), sv.end(), [&](double s) { return s > cut; }));
}

}  // namespace clora
