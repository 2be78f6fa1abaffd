// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "clora/adapters.hpp"
#include "clora/matrix.hpp"
#include "clora/tape.hpp"

namespace clora {

/// Pre-LN ViT encoder dimensions. `tokens` counts patch tokens only; the
/// class token makes every sequence tokens + 1 rows.
struct VitConfig {
  std::size_t d = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t tokens = 8;
  std::size_t patch_dim = 12;  // 3 * patch_size^2 for real images
  std::size_t ffn_hidden = 64;
  std::size_t classes = 2;
  double ln_eps = 1e-6;

  void validate() const;
};

struct EncoderWeights {
  Matrix ln1_gamma, ln1_beta;  // 1 x d
  Matrix wq, wk, wv, wo;       // d x d
  Matrix ln2_gamma, ln2_beta;  // 1 x d
  Matrix w1, b1;               // d x ffn_hidden, 1 x ffn_hidden
  Matrix w2, b2;               // ffn_hidden x d, 1 x d
};

struct VitWeights {
  VitConfig config;
  Matrix w_embed;  // patch_dim x d
  Matrix x_class;  // 1 x d
  Matrix e_pos;    // (tokens + 1) x d
  std::vector<EncoderWeights> layers;
  Matrix ln_gamma, ln_beta;  // final norm ahead of the head
  Matrix head_w;             // d x classes
  Matrix head_b;             // 1 x classes
  /// Set once adapters have been folded into the projections.
  bool merged = false;

  /// Gaussian weights with variance 1 / fan_in, unit LN scales, zero biases.
  static VitWeights random(const VitConfig& config, std::mt19937_64& rng);

  /// Everything except the head, named under `prefix`.
  std::vector<NamedTensor> backbone_tensors(const std::string& prefix = "vit/") const;
  std::vector<NamedTensor> head_tensors(const std::string& prefix = "vit/") const;
  std::vector<NamedTensor> layer_norm_tensors(const std::string& prefix = "vit/") const;
};

enum class AttachMode {
  none,
  pre_block,  // x + x dW on the normalized input of MHA and/or FFN
  qv_update,  // W_q + dW and W_v + dW
};

/// Which adapter module serves which site. Modules are numbered layer by
/// layer: with both sites active, layer l owns modules 2l-1 and 2l.
struct Placement {
  AttachMode mode = AttachMode::none;
  bool before_mha = true;  // pre_block only
  bool before_ffn = true;  // pre_block only

  /// Number of modules the placement consumes for `layers` encoder layers.
  std::size_t modules(std::size_t layers) const;
  /// 1-based module for the MHA-input (or W_q) site of `layer`, if any.
  std::optional<std::size_t> first_site(std::size_t layer) const;
  /// 1-based module for the FFN-input (or W_v) site of `layer`, if any.
  std::optional<std::size_t> second_site(std::size_t layer) const;
};

/// Backbone tensors mirrored onto a Tape. Frozen tensors become constants;
/// the head (and optionally the layer norms) become parameters.
class BoundVit {
 public:
  BoundVit(Tape& tape, const VitWeights& weights, bool train_head = false,
           bool train_layer_norm = false);

  struct Layer {
    Var ln1_gamma, ln1_beta, wq, wk, wv, wo, ln2_gamma, ln2_beta, w1, b1, w2, b2;
  };

  Tape& tape() const { return *tape_; }
  const VitConfig& config() const { return weights_->config; }
  const VitWeights& weights() const { return *weights_; }

  Var w_embed, x_class, e_pos, ln_gamma, ln_beta, head_w, head_b;
  std::vector<Layer> layers;

 private:
  Tape* tape_;
  const VitWeights* weights_;
};

/// Intermediate values of one encoder layer.
struct LayerTrace {
  Var input;      // Z^{l-1}
  Var mha_norm;   // LN(Z^{l-1})
  Var mha_in;     // normalized input after the adapter, fed to MHA
  Var mha_out;    // MHA(.)
  Var mid;        // Z~^l = MHA(.) + Z^{l-1}
  Var ffn_norm;   // LN(Z~^l)
  Var ffn_in;
  Var ffn_out;
  Var output;     // Z^l = FFN(.) + Z~^l
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  /// Input tokens of every adapter module, indexed by module - 1.
  std::vector<Var> module_inputs;
};

Var patch_embed(const BoundVit& vit, Var patches);
Var multi_head_attention(const BoundVit& vit, std::size_t layer, Var x, Var wq, Var wv);
/// Layer is 1-based. `adapters` may be null only when the mode is none.
Var encoder_layer(const BoundVit& vit, Var z, std::size_t layer, BoundAdapters* adapters,
                  const Placement& placement, ForwardTrace* trace = nullptr);
/// 1 x classes logits for one sample of `tokens` x patch_dim patches.
Var forward(const BoundVit& vit, Var patches, BoundAdapters* adapters, const Placement& placement,
            ForwardTrace* trace = nullptr);

// Matrix-level conveniences; each records onto a private Tape.

Matrix patch_embed(const Matrix& patches, const VitWeights& weights);
Matrix encoder_layer(const Matrix& z, std::size_t layer, const VitWeights& weights,
                     const AdapterBank* adapters, const Placement& placement);
Matrix forward(const Matrix& patches, const VitWeights& weights, const AdapterBank* adapters,
               const Placement& placement, FlopMeter* meter = nullptr);

/// Folds every adapter into the backbone so the returned weights compute
/// the adapted function with mode none:
///   pre_block: W_{q,k,v} <- (I + dW) W_{q,k,v} for the MHA site,
///              W_1 <- (I + dW) W_1 for the FFN site;
///   qv_update: W_q <- W_q + dW, W_v <- W_v + dW.
/// Throws ContractError on mode none or on already-merged weights.
VitWeights merge_adapters(const VitWeights& weights, const AdapterBank& adapters,
                          const Placement& placement);

}  // namespace clora
