// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "clora/matrix.hpp"
#include "clora/tape.hpp"

namespace clora {

/// How each module's update matrix dW_j is parameterized.
///
///  - lora:       dW_j = A_j B_j, independent pairs per module.
///  - naive_sum:  dW_j = sum_i A_i B_i, the same matrix for every module.
///  - lambda_sum: dW_j = sum_h sum_i D_h T_i^h L_{i,j}^h R_i^h U_h. Built
///                only as a construction; it is never trained directly.
///  - clora:      dW_j = sum_h D_h Q_h^j U_h over p shared base pairs.
enum class Variant { lora, naive_sum, lambda_sum, clora };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);

/// d: embedding dim, r: rank per factor, m: number of modules,
/// p: number of shared base pairs (ignored by lora / naive_sum).
struct AdapterConfig {
  std::size_t d = 0;
  std::size_t r = 0;
  std::size_t m = 0;
  std::size_t p = 1;
  Variant variant = Variant::clora;

  /// Throws ContractError unless 1 <= r < d, m >= 1, and for the
  /// base-space variants 1 <= p < m.
  void validate() const;
};

struct LoraBank {
  std::vector<Matrix> A;  // m of d x r
  std::vector<Matrix> B;  // m of r x d
  std::size_t modules() const { return A.size(); }
};

struct BaseSpace {
  std::vector<Matrix> D;  // p of d x r
  std::vector<Matrix> U;  // p of r x d
  std::size_t count() const { return D.size(); }
};

/// Per-module r x r coefficients over one shared BaseSpace.
struct LrmBank {
  BaseSpace base;
  std::vector<std::vector<Matrix>> Q;  // Q[j][h], j < m, h < p
  std::size_t modules() const { return Q.size(); }
};

/// Components of the transformed-sum construction. Lambda[i][j][h] is the
/// identity whenever i == j.
struct LambdaComponents {
  std::vector<std::vector<Matrix>> T;                    // [m][p], r x r
  std::vector<std::vector<Matrix>> R;                    // [m][p], r x r
  std::vector<std::vector<std::vector<Matrix>>> Lambda;  // [m][m][p], r x r
  std::size_t modules() const { return T.size(); }
};

// Module indices j below are 1-based.

Matrix delta_w_lora(const LoraBank& bank, std::size_t j);
Matrix delta_w_naive_sum(const LoraBank& bank);
Matrix delta_w_lambda(const LambdaComponents& c, const BaseSpace& base, std::size_t j);
Matrix delta_w_clora(const LrmBank& bank, std::size_t j);

/// The coefficient a base-space bank needs to reproduce delta_w_lambda:
/// Q_h^j = sum_i T_i^h L_{i,j}^h R_i^h.
LrmBank collapse_lambda(const LambdaComponents& c, const BaseSpace& base);

/// x + x dW for x of shape t x d.
Matrix lrm_forward(const Matrix& x, const Matrix& delta_w, FlopMeter* meter = nullptr);
Var lrm_forward(Var x, Var delta_w);

/// (I + dW) w for w of shape d x k, so that x (I + dW) w needs no adapter.
Matrix merge_into_weight(const Matrix& w, const Matrix& delta_w);

/// Trainable scalars introduced by an adapter layout plus `head_params`:
///   clora       (2dr + m r^2) p + c
///   lora/naive  2drm + c
///   lambda_sum  2drm + (m^2 - m) r^2 p + c   (identity blocks excluded)
std::size_t param_count(const AdapterConfig& config, std::size_t head_params);

// Bank construction. Random initialization draws D_h, U_h (or A_j) from
// N(0, 1/d) and sets Q (or B_j) to zero, so every dW starts at zero.
LoraBank make_lora_bank(const AdapterConfig& config, std::mt19937_64* rng);
BaseSpace make_base_space(const AdapterConfig& config, std::mt19937_64* rng);
LrmBank make_lrm_bank(const AdapterConfig& config, std::mt19937_64* rng);
/// Dense random components with identity diagonal Lambda blocks.
LambdaComponents make_lambda_components(const AdapterConfig& config, std::mt19937_64& rng);

/// Trainable layout of the transformed sum when learned directly: explicit
/// A_i, B_i pairs plus every Lambda block, identity blocks held fixed.
struct LambdaSumBank {
  std::vector<Matrix> A;                                 // m of d x r
  std::vector<Matrix> B;                                 // m of r x d
  std::vector<std::vector<std::vector<Matrix>>> Lambda;  // [m][m][p], r x r
  /// Trainable scalars: A, B and the non-identity Lambda blocks.
  std::size_t census() const;
};

LambdaSumBank allocate_lambda_sum(const AdapterConfig& config);

/// A named tensor reference, used for checkpoints and census.
struct NamedTensor {
  std::string name;
  const Matrix* tensor;
};

/// Owning, type-erased adapter bank for one model: a LoraBank for
/// lora / naive_sum, an LrmBank for clora.
class AdapterBank {
 public:
  AdapterBank() = default;
  /// Zero-filled storage with the exact layout of `config`.
  static AdapterBank allocate(const AdapterConfig& config);
  /// Standard initialization (see make_lrm_bank).
  static AdapterBank initialize(const AdapterConfig& config, std::mt19937_64& rng);
  /// Every tensor random, so dW is non-trivial; for merge and rank checks.
  static AdapterBank randomize(const AdapterConfig& config, std::mt19937_64& rng,
                               double stddev = -1.0);

  const AdapterConfig& config() const { return config_; }
  Variant variant() const { return config_.variant; }
  std::size_t modules() const { return config_.m; }
  /// Largest rank dW_j can reach: r, p r or min(m r, d).
  std::size_t rank_bound() const;

  Matrix delta_w(std::size_t j) const;
  /// Experts M_h = D_h Q_h^j U_h of module j (clora only).
  std::vector<Matrix> experts(std::size_t j) const;

  const LoraBank& lora() const { return std::get<LoraBank>(bank_); }
  const LrmBank& lrm() const { return std::get<LrmBank>(bank_); }
  LoraBank& lora() { return std::get<LoraBank>(bank_); }
  LrmBank& lrm() { return std::get<LrmBank>(bank_); }

  /// Trainable tensors in a fixed order (also the checkpoint order).
  std::vector<Matrix*> parameters();
  std::vector<NamedTensor> tensors(std::string_view prefix = "adapter/") const;
  /// Sum of allocated trainable scalars.
  std::size_t census() const;

 private:
  AdapterConfig config_;
  std::variant<LoraBank, LrmBank> bank_;
};

/// An AdapterBank mirrored onto a Tape as parameter leaves. dW_j and the
/// experts are built lazily and cached, so a batch of forwards on one
/// Tape shares them.
class BoundAdapters {
 public:
  BoundAdapters(Tape& tape, const AdapterBank& bank);

  const AdapterBank& bank() const { return *bank_; }
  std::size_t modules() const { return bank_->modules(); }
  Var delta_w(std::size_t j);
  std::vector<Var> experts(std::size_t j);
  /// Leaves in AdapterBank::parameters() order.
  const std::vector<Var>& leaves() const { return leaves_; }

 private:
  Tape* tape_;
  const AdapterBank* bank_;
  std::vector<Var> leaves_;
  std::vector<std::vector<Var>> experts_;
  std::vector<Var> delta_;
  std::vector<bool> built_;
};

struct RankReport {
  std::size_t rank = 0;
  std::size_t bound = 0;
  bool ok = true;
};

RankReport rank_audit(const AdapterBank& bank, std::size_t j, double tol = 1e-8);

}  // namespace clora
