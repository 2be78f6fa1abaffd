// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "clora/matrix.hpp"

namespace clora {

/// Default relative tolerance for rank audits.
inline constexpr double kDefaultRankTol = 1e-8;

/// Singular values of `a` in descending order.
///
/// One-sided (Hestenes) Jacobi: columns of the taller orientation are
/// rotated pairwise until every pair is orthogonal to working precision;
/// the singular values are then the column norms. Throws NumericError if
/// `max_sweeps` sweeps do not converge.
std::vector<double> singular_values(const Matrix& a, int max_sweeps = 100);

/// Number of singular values strictly greater than `tol * sigma_max`.
/// A zero matrix has rank 0.
std::size_t numerical_rank(const Matrix& a, double tol = kDefaultRankTol);

}  // namespace clora
