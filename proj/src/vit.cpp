// SPDX-License-Identifier: Apache-2.0
#include "clora/vit.hpp"

#include <cmath>

#include "clora/errors.hpp"

namespace clora {

void VitConfig::validate() const {
  if (d == 0 || layers == 0 || tokens == 0 || patch_dim == 0 || ffn_hidden == 0 || classes < 2) {
    throw ContractError("vit config: d, layers, tokens, patch_dim, ffn_hidden must be >= 1 and "
                        "classes >= 2");
  }
  if (heads == 0 || d % heads != 0) {
    throw ContractError("vit config: heads (" + std::to_string(heads) + ") must divide d (" +
                        std::to_string(d) + ")");
  }
  if (ffn_hidden < d) throw ContractError("vit config: ffn_hidden must be >= d");
  if (!(ln_eps > 0)) throw ContractError("vit config: ln_eps must be positive");
}

VitWeights VitWeights::random(const VitConfig& config, std::mt19937_64& rng) {
  config.validate();
  const std::size_t d = config.d;
  const double sd = 1.0 / std::sqrt(double(d));
  VitWeights w;
  w.config = config;
  w.w_embed = Matrix::gaussian(config.patch_dim, d, 1.0 / std::sqrt(double(config.patch_dim)), rng);
  w.x_class = Matrix::gaussian(1, d, sd, rng);
  w.e_pos = Matrix::gaussian(config.tokens + 1, d, sd, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    EncoderWeights e;
    e.ln1_gamma = Matrix(1, d, 1.0);
    e.ln1_beta = Matrix(1, d);
    e.wq = Matrix::gaussian(d, d, sd, rng);
    e.wk = Matrix::gaussian(d, d, sd, rng);
    e.wv = Matrix::gaussian(d, d, sd, rng);
    e.wo = Matrix::gaussian(d, d, sd, rng);
    e.ln2_gamma = Matrix(1, d, 1.0);
    e.ln2_beta = Matrix(1, d);
    e.w1 = Matrix::gaussian(d, config.ffn_hidden, sd, rng);
    e.b1 = Matrix(1, config.ffn_hidden);
    e.w2 = Matrix::gaussian(config.ffn_hidden, d, 1.0 / std::sqrt(double(config.ffn_hidden)), rng);
    e.b2 = Matrix(1, d);
    w.layers.push_back(std::move(e));
  }
  w.ln_gamma = Matrix(1, d, 1.0);
  w.ln_beta = Matrix(1, d);
  w.head_w = Matrix::gaussian(d, config.classes, sd, rng);
  w.head_b = Matrix(1, config.classes);
  return w;
}

std::vector<NamedTensor> VitWeights::backbone_tensors(const std::string& prefix) const {
  std::vector<NamedTensor> out = {{prefix + "embed/w", &w_embed},
                                  {prefix + "embed/class", &x_class},
                                  {prefix + "embed/pos", &e_pos}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const EncoderWeights& e = layers[l];
    const std::string p = prefix + "layer" + std::to_string(l + 1) + "/";
    for (const auto& [name, m] : std::initializer_list<std::pair<const char*, const Matrix*>>{
             {"ln1/gamma", &e.ln1_gamma}, {"ln1/beta", &e.ln1_beta}, {"wq", &e.wq},
             {"wk", &e.wk}, {"wv", &e.wv}, {"wo", &e.wo}, {"ln2/gamma", &e.ln2_gamma},
             {"ln2/beta", &e.ln2_beta}, {"w1", &e.w1}, {"b1", &e.b1}, {"w2", &e.w2},
             {"b2", &e.b2}}) {
      out.push_back({p + name, m});
    }
  }
  out.push_back({prefix + "norm/gamma", &ln_gamma});
  out.push_back({prefix + "norm/beta", &ln_beta});
  return out;
}

std::vector<NamedTensor> VitWeights::head_tensors(const std::string& prefix) const {
  return {{prefix + "head/w", &head_w}, {prefix + "head/b", &head_b}};
}

std::vector<NamedTensor> VitWeights::layer_norm_tensors(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const EncoderWeights& e = layers[l];
    const std::string p = prefix + "layer" + std::to_string(l + 1) + "/";
    out.push_back({p + "ln1/gamma", &e.ln1_gamma});
    out.push_back({p + "ln1/beta", &e.ln1_beta});
    out.push_back({p + "ln2/gamma", &e.ln2_gamma});
    out.push_back({p + "ln2/beta", &e.ln2_beta});
  }
  out.push_back({prefix + "norm/gamma", &ln_gamma});
  out.push_back({prefix + "norm/beta", &ln_beta});
  return out;
}

std::size_t Placement::modules(std::size_t layers) const {
  switch (mode) {
    case AttachMode::none:
      return 0;
    case AttachMode::qv_update:
      return 2 * layers;
    case AttachMode::pre_block:
      return (std::size_t(before_mha) + std::size_t(before_ffn)) * layers;
  }
  return 0;
}

std::optional<std::size_t> Placement::first_site(std::size_t layer) const {
  if (mode == AttachMode::none) return std::nullopt;
  if (mode == AttachMode::qv_update) return 2 * layer - 1;
  if (!before_mha) return std::nullopt;
  return before_ffn ? 2 * layer - 1 : layer;
}

std::optional<std::size_t> Placement::second_site(std::size_t layer) const {
  if (mode == AttachMode::none) return std::nullopt;
  if (mode == AttachMode::qv_update) return 2 * layer;
  if (!before_ffn) return std::nullopt;
  return before_mha ? 2 * layer : layer;
}

BoundVit::BoundVit(Tape& tape, const VitWeights& weights, bool train_head, bool train_layer_norm)
    : tape_(&tape), weights_(&weights) {
  auto frozen = [&](const Matrix& m) { return tape.constant(m); };
  auto head = [&](const Matrix& m) { return train_head ? tape.parameter(m) : tape.constant(m); };
  auto norm = [&](const Matrix& m) {
    return train_layer_norm ? tape.parameter(m) : tape.constant(m);
  };
  w_embed = frozen(weights.w_embed);
  x_class = frozen(weights.x_class);
  e_pos = frozen(weights.e_pos);
  for (const EncoderWeights& e : weights.layers) {
    layers.push_back({norm(e.ln1_gamma), norm(e.ln1_beta), frozen(e.wq), frozen(e.wk),
                      frozen(e.wv), frozen(e.wo), norm(e.ln2_gamma), norm(e.ln2_beta),
                      frozen(e.w1), frozen(e.b1), frozen(e.w2), frozen(e.b2)});
  }
  ln_gamma = norm(weights.ln_gamma);
  ln_beta = norm(weights.ln_beta);
  head_w = head(weights.head_w);
  head_b = head(weights.head_b);
}

Var patch_embed(const BoundVit& vit, Var patches) {
  const VitConfig& c = vit.config();
  if (patches.rows() != c.tokens || patches.cols() != c.patch_dim) {
    throw ShapeError("patch_embed: patches " + patches.value().shape() + ", expected (" +
                     std::to_string(c.tokens) + "x" + std::to_string(c.patch_dim) + ")");
  }
  const Var tokens = matmul(patches, vit.w_embed);
  const Var seq[] = {vit.x_class, tokens};
  return concat_rows(seq) + vit.e_pos;
}

Var multi_head_attention(const BoundVit& vit, std::size_t layer, Var x, Var wq, Var wv) {
  const BoundVit::Layer& w = vit.layers.at(layer - 1);
  const std::size_t heads = vit.config().heads;
  const std::size_t dh = vit.config().d / heads;
  const Var q = matmul(x, wq);
  const Var k = matmul(x, w.wk);
  const Var v = matmul(x, wv);
  const double inv = 1.0 / std::sqrt(double(dh));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = slice_cols(q, h * dh, (h + 1) * dh);
    const Var kh = slice_cols(k, h * dh, (h + 1) * dh);
    const Var vh = slice_cols(v, h * dh, (h + 1) * dh);
    const Var att = softmax_rows(scale(matmul(qh, transpose(kh)), inv));
    outs.push_back(matmul(att, vh));
  }
  return matmul(heads == 1 ? outs[0] : concat_cols(outs), w.wo);
}

namespace {

Var ffn(const BoundVit::Layer& w, Var x) {
  return add_row(matmul(gelu(add_row(matmul(x, w.w1), w.b1)), w.w2), w.b2);
}

void note_input(ForwardTrace* trace, std::size_t j, Var x) {
  if (!trace) return;
  if (trace->module_inputs.size() < j) trace->module_inputs.resize(j);
  trace->module_inputs[j - 1] = x;
}

}  // namespace

Var encoder_layer(const BoundVit& vit, Var z, std::size_t layer, BoundAdapters* adapters,
                  const Placement& placement, ForwardTrace* trace) {
  const VitConfig& c = vit.config();
  if (layer < 1 || layer > c.layers) {
    throw IndexError("encoder_layer: layer " + std::to_string(layer) + " outside [1, " +
                     std::to_string(c.layers) + "]");
  }
  if (z.rows() != c.tokens + 1 || z.cols() != c.d) {
    throw ShapeError("encoder_layer: input " + z.value().shape());
  }
  if (placement.mode != AttachMode::none) {
    if (vit.weights().merged) {
      throw ContractError("encoder_layer: adapters attached to weights that already merged them");
    }
    if (!adapters) throw ContractError("encoder_layer: placement needs an adapter bank");
    if (adapters->modules() != placement.modules(c.layers)) {
      throw ContractError("encoder_layer: bank has " + std::to_string(adapters->modules()) +
                          " modules, placement needs " +
                          std::to_string(placement.modules(c.layers)));
    }
  }
  const BoundVit::Layer& w = vit.layers[layer - 1];
  LayerTrace lt;
  lt.input = z;

  const auto first = placement.first_site(layer);
  const auto second = placement.second_site(layer);
  Var wq = w.wq, wv = w.wv;
  if (placement.mode == AttachMode::qv_update) {
    wq = w.wq + adapters->delta_w(*first);
    wv = w.wv + adapters->delta_w(*second);
  }

  lt.mha_norm = layer_norm_rows(z, w.ln1_gamma, w.ln1_beta, c.ln_eps);
  lt.mha_in = lt.mha_norm;
  if (placement.mode == AttachMode::pre_block && first) {
    lt.mha_in = lrm_forward(lt.mha_norm, adapters->delta_w(*first));
  }
  if (first) note_input(trace, *first, lt.mha_norm);
  lt.mha_out = multi_head_attention(vit, layer, lt.mha_in, wq, wv);
  lt.mid = lt.mha_out + z;

  lt.ffn_norm = layer_norm_rows(lt.mid, w.ln2_gamma, w.ln2_beta, c.ln_eps);
  lt.ffn_in = lt.ffn_norm;
  if (placement.mode == AttachMode::pre_block && second) {
    lt.ffn_in = lrm_forward(lt.ffn_norm, adapters->delta_w(*second));
    note_input(trace, *second, lt.ffn_norm);
  } else if (placement.mode == AttachMode::qv_update) {
    note_input(trace, *second, lt.mha_norm);
  }
  lt.ffn_out = ffn(w, lt.ffn_in);
  lt.output = lt.ffn_out + lt.mid;
  if (trace) trace->layers.push_back(lt);
  return lt.output;
}

Var forward(const BoundVit& vit, Var patches, BoundAdapters* adapters, const Placement& placement,
            ForwardTrace* trace) {
  Var z = patch_embed(vit, patches);
  for (std::size_t l = 1; l <= vit.config().layers; ++l) {
    z = encoder_layer(vit, z, l, adapters, placement, trace);
  }
  const Var cls = slice_rows(z, 0, 1);
  const Var normed = layer_norm_rows(cls, vit.ln_gamma, vit.ln_beta, vit.config().ln_eps);
  return add_row(matmul(normed, vit.head_w), vit.head_b);
}

Matrix patch_embed(const Matrix& patches, const VitWeights& weights) {
  Tape tape;
  BoundVit vit(tape, weights);
  return patch_embed(vit, tape.constant(patches)).value();
}

Matrix encoder_layer(const Matrix& z, std::size_t layer, const VitWeights& weights,
                     const AdapterBank* adapters, const Placement& placement) {
  Tape tape;
  BoundVit vit(tape, weights);
  std::optional<BoundAdapters> bound;
  if (adapters) bound.emplace(tape, *adapters);
  return encoder_layer(vit, tape.constant(z), layer, bound ? &*bound : nullptr, placement).value();
}

Matrix forward(const Matrix& patches, const VitWeights& weights, const AdapterBank* adapters,
               const Placement& placement, FlopMeter* meter) {
  Tape tape;
  BoundVit vit(tape, weights);
  std::optional<BoundAdapters> bound;
  if (adapters) bound.emplace(tape, *adapters);
  Matrix out = forward(vit, tape.constant(patches), bound ? &*bound : nullptr, placement).value();
  if (meter) {
    meter->matmul_flops += tape.meter().matmul_flops;
    meter->other_flops += tape.meter().other_flops;
  }
  return out;
}

VitWeights merge_adapters(const VitWeights& weights, const AdapterBank& adapters,
                          const Placement& placement) {
  if (weights.merged) throw ContractError("merge_adapters: weights already carry merged adapters");
  if (placement.mode == AttachMode::none) {
    throw ContractError("merge_adapters: placement has no adapter sites");
  }
  const std::size_t need = placement.modules(weights.config.layers);
  if (adapters.modules() != need) {
    throw ContractError("merge_adapters: bank has " + std::to_string(adapters.modules()) +
                        " modules, placement needs " + std::to_string(need));
  }
  VitWeights out = weights;
  for (std::size_t l = 1; l <= weights.config.layers; ++l) {
    EncoderWeights& e = out.layers[l - 1];
    const auto first = placement.first_site(l);
    const auto second = placement.second_site(l);
    if (placement.mode == AttachMode::qv_update) {
      e.wq = add(e.wq, adapters.delta_w(*first));
      e.wv = add(e.wv, adapters.delta_w(*second));
      continue;
    }
    if (first) {
      const Matrix dw = adapters.delta_w(*first);
      e.wq = merge_into_weight(e.wq, dw);
      e.wk = merge_into_weight(e.wk, dw);
      e.wv = merge_into_weight(e.wv, dw);
    }
    if (second) e.w1 = merge_into_weight(e.w1, adapters.delta_w(*second));
  }
  out.merged = true;
  return out;
}

}  // namespace clora
