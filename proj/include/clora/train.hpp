// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clora/adapters.hpp"
#include "clora/matrix.hpp"
#include "clora/sade.hpp"
#include "clora/tape.hpp"
#include "clora/vit.hpp"

namespace clora {

// ---------------------------------------------------------------------------
// Synthetic classification data

/// Class-conditioned patch sequences. Each class owns a random unit
/// pattern placed on the first `signal_tokens` patches, scaled by
/// `separation`; every patch then gets isotropic Gaussian noise. With two
/// classes the patterns are antipodal.
struct TaskConfig {
  std::size_t classes = 2;
  std::size_t tokens = 8;
  std::size_t patch_dim = 12;
  std::size_t signal_tokens = 1;
  std::size_t train_size = 256;
  std::size_t val_size = 128;
  std::size_t test_size = 128;
  double separation = 1.0;
  double noise = 1.0;

  void validate() const;
};

struct Sample {
  Matrix patches;  // tokens x patch_dim
  std::size_t label = 0;
};

struct SyntheticTask {
  TaskConfig config;
  std::vector<Matrix> patterns;  // per class, tokens x patch_dim
  std::vector<Sample> train, val, test;

  static SyntheticTask generate(const TaskConfig& config, std::uint64_t seed);
};

// ---------------------------------------------------------------------------
// Objective and optimizer

/// Mean cross-entropy plus (alpha / d^2) * sum over modules of rsr_term.
/// `experts` holds one ExpertSet per module and may be empty.
double objective(const Matrix& logits, std::span<const std::size_t> labels,
                 std::span<const ExpertSet> experts, double alpha, std::size_t d);
Var objective(Var logits, std::span<const std::size_t> labels,
              std::span<const std::vector<Var>> experts, double alpha, std::size_t d);

/// Linear warmup from 0 to `peak` over `warmup_steps`, then half-cosine
/// decay to 0 at `total_steps`. Throws ContractError if step > total_steps.
double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak);

/// Adam with decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
class AdamW {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  explicit AdamW(double weight_decay = 0.0) : weight_decay(weight_decay) {}

  /// Updates `params` in place. The parameter list must keep the same
  /// shapes and order across calls.
  void step(std::span<Matrix* const> params, std::span<const Matrix> grads, double lr);
  std::size_t steps() const { return t_; }

 private:
  std::size_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double alpha = 1.0;
  double lr = 0.01;
  double weight_decay = 0.01;
  std::size_t batch = 32;
  std::size_t epochs = 100;
  std::size_t warmup_epochs = 10;
  std::uint64_t seed = 0;
  std::size_t p = 4;
  std::size_t r = 8;

  bool sade_on = true;
  bool insert_mha = true;
  bool insert_ffn = true;
  bool qv_mode = false;
  bool naive_sum_mode = false;
  /// Replace the rsr term by the per-token similarity sum (mean over the
  /// batch, same alpha / d^2 weight).
  bool sample_dependent_sr = false;
  /// Train the head alone, no adapters.
  bool head_only = false;
  bool train_layer_norm = false;

  void validate() const;
  Placement placement() const;
  /// Adapter layout for a backbone with `layers` encoder layers of width d.
  AdapterConfig adapter_config(const VitConfig& vit) const;
  /// Whether a regularizer term enters the objective.
  bool regularized() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_acc = 0;
  double rsr_sum = 0;
  double lr = 0;
};

struct TrainedResult {
  AdapterBank adapters;  // empty layout when head_only
  VitWeights model;      // input backbone with the trained head (and norms)
  std::vector<EpochRecord> history;
  FlopMeter regularizer_flops;  // forward cost of the regularizer, whole run
  std::size_t steps = 0;
  std::string digest_before;
  std::string digest_after;
  double final_val_acc = 0;
};

/// Hex SHA-256 over the names, shapes and bytes of the frozen backbone
/// tensors. Layer-norm tensors are excluded when `skip_layer_norm` is set.
std::string backbone_digest(const VitWeights& weights, bool skip_layer_norm = false);

/// Zero-update adapters for `config`, drawn from the adapter stream of
/// config.seed.
AdapterBank make_adapters(const TrainConfig& config, const VitConfig& vit);

/// Fraction of `samples` classified correctly. Adapters, when given, are
/// merged first so evaluation runs at backbone cost.
double accuracy(const VitWeights& model, const AdapterBank* adapters, const Placement& placement,
                std::span<const Sample> samples);

/// Adapter fine-tuning: backbone frozen, adapters and head trained with
/// AdamW under the cosine schedule. `adapters` must start with every dW
/// equal to zero; it is ignored when config.head_only. Throws NumericError
/// on a non-finite loss.
TrainedResult train(const SyntheticTask& task, const VitWeights& model, AdapterBank adapters,
                    const TrainConfig& config);
TrainedResult train(const SyntheticTask& task, const VitWeights& model, const TrainConfig& config);

/// Mean pairwise |token_similarity| over every module of a clora bank on
/// the normalized inputs each module receives for `samples`.
double mean_expert_similarity(const VitWeights& model, const AdapterBank& adapters,
                              const Placement& placement, std::span<const Sample> samples);

std::string history_csv(std::span<const EpochRecord> history);

// ---------------------------------------------------------------------------
// Run configuration (key=value files)

/// Everything needed to reproduce a run from one seed: the backbone, the
/// task, adapter initialization and shuffling all derive from train.seed.
struct RunConfig {
  VitConfig vit;
  TaskConfig task;
  TrainConfig train;

  void validate() const;
  VitWeights make_backbone() const;
  SyntheticTask make_task() const;
};

/// Desk-scale defaults: d=32, L=2, p=2, r=4, 512 training samples,
/// 30 epochs with 3 of warmup.
RunConfig default_run_config();

/// Applies `key=value` lines ('#' starts a comment). Throws ContractError
/// on an unknown key or malformed value.
void apply_config(RunConfig& config, std::istream& in);
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
RunConfig load_run_config(const std::filesystem::path& path);
std::string render_run_config(const RunConfig& config);

// ---------------------------------------------------------------------------
// Ablation

struct AblationVariant {
  std::string name;
  bool sade_on;
  bool insert_mha;
  bool insert_ffn;
  bool qv_mode;
  bool naive_sum_mode;
  bool sample_dependent_sr;
};

/// CLoRA, CLoRAMF, CLoRAMS, CLoRAFS, CLoRA(QV), CLoRA#, CLoRA*.
const std::vector<AblationVariant>& ablation_variants();
TrainConfig apply_variant(TrainConfig base, const AblationVariant& v);

struct AblationRow {
  std::string variant;
  std::string attach;        // pre_block | qv_update
  std::string parameterization;  // to_string(Variant)
  bool before_mha = false;
  bool before_ffn = false;
  bool sade = false;
  std::string regularizer;   // none | rsr | sr
  std::size_t modules = 0;
  std::size_t param_count = 0;  // formula, head included
  std::size_t census = 0;       // allocated adapter scalars + head
  std::vector<double> val_acc;  // one per seed
  double mean_val_acc = 0;
  double regularizer_flops_per_step = 0;
};

/// Trains every variant on `seeds` (backbone and task regenerated per
/// seed) with identical budgets.
std::vector<AblationRow> ablate(const RunConfig& base, std::span<const std::uint64_t> seeds);
std::string ablation_csv(std::span<const AblationRow> rows);

}  // namespace clora
