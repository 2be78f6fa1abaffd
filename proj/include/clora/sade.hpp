// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "clora/matrix.hpp"
#include "clora/tape.hpp"

namespace clora {

/// Experts of one module: M_h = D_h Q_h^j U_h, each d x d, h = 1..p.
using ExpertSet = std::vector<Matrix>;

/// Cosine similarity between x M_h and x M_r for a single 1 x d token.
/// Indices are 1-based. Throws ContractError when h == r and NumericError
/// when either projection has zero magnitude.
double token_similarity(const Matrix& token, const ExpertSet& experts, std::size_t h,
                        std::size_t r);

/// Sample-dependent similarity penalty over every row of `tokens`:
/// sum_a sum_{h<r} s_{h,r}^a squared. A token whose projection vanishes for
/// either expert contributes 0 for that pair.
double sr_term(const Matrix& tokens, const ExpertSet& experts, FlopMeter* meter = nullptr);

/// Sample-agnostic replacement: sum_{h<r} ||M_h M_r^T||_F^2.
double rsr_term(const ExpertSet& experts, FlopMeter* meter = nullptr);

/// Column-orthogonality penalty sum_{f<v} ||G_f^T G_v||_F^2.
double column_orthogonality_term(std::span<const Matrix> g);

// Differentiable forms. sr_term evaluates each pair directly, projecting
// the tokens through both experts of the pair, so its cost per pair is
// 2 * (2 t d^2) multiply-add FLOPs against 2 d^3 for the rsr pair.
Var sr_term(Var tokens, std::span<const Var> experts);
Var rsr_term(std::span<const Var> experts);
Var column_orthogonality_term(std::span<const Var> g);

/// d rsr_term / d M_h for every h, obtained by a reverse sweep.
std::vector<Matrix> rsr_gradient(const ExpertSet& experts);

/// Symbolic cost of the two regularizers for one module:
///   sr  = (p^2 n + p^2 + p n + p) b d^2 = (p^2 + p)(n + 1) b d^2
///   rsr = (0.5 p^2 + 0.5 p) d^3
/// The ratio rsr / sr = d / (2 (n + 1) b) does not depend on p.
struct ComplexityProfile {
  std::size_t d = 0, n = 0, b = 0, p = 0;
  double sr_flops = 0;
  double rsr_flops = 0;
  double reduction = 0;  // 1 - rsr / sr
  double threshold = 0;  // d / (2 (n + 1)); rsr is cheaper when b exceeds it
  bool applicable() const { return double(b) > threshold; }
  /// Reduction in percent, rounded to one decimal.
  double reduction_percent() const;
};

/// Throws ContractError if any argument is zero.
ComplexityProfile complexity_profile(std::size_t d, std::size_t n, std::size_t b, std::size_t p);

struct Backbone {
  std::string name;
  std::size_t d;
  std::size_t n;  // patch tokens, excluding the class token
};

/// ViT-Base / Large / Huge at 16x16 patches on 224x224 input (n = 196).
const std::vector<Backbone>& standard_backbones();
const Backbone& find_backbone(const std::string& name);

/// Batch sizes of the reference reduction table.
inline constexpr std::size_t kReportBatches[] = {2, 4, 8, 16, 32, 64};

enum class TableFormat { text, csv };

/// Table with columns backbone, d, n, threshold and one reduction column
/// per batch size; "-" where rsr is not cheaper.
std::string render_complexity_table(std::span<const Backbone> backbones,
                                    std::span<const std::size_t> batches, TableFormat format,
                                    std::size_t p = 1);

}  // namespace clora
