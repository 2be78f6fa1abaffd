// SPDX-License-Identifier: Apache-2.0
#include "clora/train.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>

#include "clora/errors.hpp"
#include "clora/random.hpp"

namespace clora {

// ---------------------------------------------------------------------------
// Synthetic task

void TaskConfig::validate() const {
  if (classes < 2) throw ContractError("task: classes must be >= 2");
  if (tokens == 0 || patch_dim == 0) throw ContractError("task: tokens and patch_dim must be >= 1");
  if (signal_tokens == 0 || signal_tokens > tokens) {
    throw ContractError("task: signal_tokens must lie in [1, tokens]");
  }
  if (train_size == 0 || val_size == 0) throw ContractError("task: train and val splits are empty");
  if (!(separation >= 0) || !(noise >= 0)) {
    throw ContractError("task: separation and noise must be non-negative");
  }
}

SyntheticTask SyntheticTask::generate(const TaskConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng = make_rng(seed, kStreamTask);
  SyntheticTask task;
  task.config = config;

  // Class patterns: unit rows on the signal tokens.
  auto unit_row = [&](std::size_t dim) {
    Matrix v = Matrix::gaussian(1, dim, 1.0, rng);
    return scale(v, 1.0 / frobenius(v));
  };
  std::vector<std::vector<Matrix>> rows(config.classes);
  for (std::size_t t = 0; t < config.signal_tokens; ++t) {
    const Matrix base = unit_row(config.patch_dim);
    for (std::size_t c = 0; c < config.classes; ++c) {
      if (config.classes == 2) {
        rows[c].push_back(c == 0 ? base : scale(base, -1.0));
      } else {
        rows[c].push_back(c == 0 ? base : unit_row(config.patch_dim));
      }
    }
  }
  for (std::size_t c = 0; c < config.classes; ++c) {
    Matrix p(config.tokens, config.patch_dim);
    for (std::size_t t = 0; t < config.signal_tokens; ++t)
      for (std::size_t k = 0; k < config.patch_dim; ++k) p(t, k) = config.separation * rows[c][t](0, k);
    task.patterns.push_back(std::move(p));
  }

  std::uniform_int_distribution<std::size_t> pick(0, config.classes - 1);
  auto draw = [&](std::size_t count) {
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      Sample s;
      s.label = pick(rng);
      s.patches = add(task.patterns[s.label],
                      Matrix::gaussian(config.tokens, config.patch_dim, config.noise, rng));
      out.push_back(std::move(s));
    }
    return out;
  };
  task.train = draw(config.train_size);
  task.val = draw(config.val_size);
  task.test = draw(config.test_size);
  return task;
}

// ---------------------------------------------------------------------------
// Objective

namespace {

double mean_cross_entropy(const Matrix& logits, std::span<const std::size_t> labels) {
  if (labels.size() != logits.rows()) {
    throw ShapeError("objective: " + std::to_string(labels.size()) + " labels for logits " +
                     logits.shape());
  }
  double total = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (labels[i] >= logits.cols()) {
      throw IndexError("objective: label " + std::to_string(labels[i]) + " outside [0, " +
                       std::to_string(logits.cols()) + ")");
    }
    double mx = logits(i, 0);
    for (std::size_t k = 1; k < logits.cols(); ++k) mx = std::max(mx, logits(i, k));
    double z = 0;
    for (std::size_t k = 0; k < logits.cols(); ++k) z += std::exp(logits(i, k) - mx);
    total += mx + std::log(z) - logits(i, labels[i]);
  }
  return total / double(logits.rows());
}

Var weighted_regularizer(Tape& tape, std::span<const std::vector<Var>> experts, double alpha,
                         std::size_t d) {
  std::vector<Var> terms;
  for (const auto& set : experts) terms.push_back(rsr_term(set));
  if (terms.empty()) return tape.constant(Matrix(1, 1));
  return scale(add_all(terms), alpha / double(d * d));
}

}  // namespace

double objective(const Matrix& logits, std::span<const std::size_t> labels,
                 std::span<const ExpertSet> experts, double alpha, std::size_t d) {
  double reg = 0;
  for (const auto& set : experts) reg += rsr_term(set);
  return mean_cross_entropy(logits, labels) + alpha / double(d * d) * reg;
}

Var objective(Var logits, std::span<const std::size_t> labels,
              std::span<const std::vector<Var>> experts, double alpha, std::size_t d) {
  return cross_entropy(logits, labels) + weighted_regularizer(*logits.tape, experts, alpha, d);
}

double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                 double peak) {
  if (step > total_steps) {
    throw ContractError("cosine_lr: step " + std::to_string(step) + " beyond total " +
                        std::to_string(total_steps));
  }
  if (step < warmup_steps) return peak * double(step) / double(warmup_steps);
  if (total_steps == warmup_steps) return peak;
  const double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void AdamW::step(std::span<Matrix* const> params, std::span<const Matrix> grads, double lr) {
  if (params.size() != grads.size()) {
    throw ContractError("AdamW: " + std::to_string(params.size()) + " parameters, " +
                        std::to_string(grads.size()) + " gradients");
  }
  if (t_ == 0) {
    for (const Matrix* p : params) {
      m_.emplace_back(p->rows(), p->cols());
      v_.emplace_back(p->rows(), p->cols());
    }
  } else if (m_.size() != params.size()) {
    throw ContractError("AdamW: parameter list changed between steps");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1, double(t_));
  const double c2 = 1.0 - std::pow(beta2, double(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], grads[i], "AdamW");
    require_same_shape(*params[i], m_[i], "AdamW");
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
      p[k] -= lr * (update + weight_decay * p[k]);
    }
  }
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (!(alpha >= 0)) throw ContractError("train: alpha must be >= 0");
  if (!(lr >= 0) || !(weight_decay >= 0)) throw ContractError("train: lr and weight_decay must be >= 0");
  if (batch == 0) throw ContractError("train: batch must be >= 1");
  if (warmup_epochs > epochs) throw ContractError("train: warmup_epochs exceeds epochs");
  if (head_only) return;
  if (qv_mode && (!insert_mha || !insert_ffn)) {
    throw ContractError("train: qv_mode adapts W_q and W_v of every layer; "
                        "insert_mha/insert_ffn must stay on");
  }
  if (!insert_mha && !insert_ffn) throw ContractError("train: no adapter site enabled");
  if (naive_sum_mode && qv_mode) throw ContractError("train: naive_sum_mode and qv_mode conflict");
  if (sample_dependent_sr && (qv_mode || naive_sum_mode || !sade_on)) {
    throw ContractError("train: sample_dependent_sr needs sade_on with base-space adapters before "
                        "the blocks");
  }
}

Placement TrainConfig::placement() const {
  if (head_only) return {};
  Placement p;
  p.mode = qv_mode ? AttachMode::qv_update : AttachMode::pre_block;
  p.before_mha = insert_mha;
  p.before_ffn = insert_ffn;
  return p;
}

AdapterConfig TrainConfig::adapter_config(const VitConfig& vit) const {
  AdapterConfig c;
  c.d = vit.d;
  c.r = r;
  c.m = placement().modules(vit.layers);
  c.p = p;
  c.variant = naive_sum_mode ? Variant::naive_sum : Variant::clora;
  return c;
}

bool TrainConfig::regularized() const { return sade_on && !head_only && !naive_sum_mode; }

namespace {

struct Digest {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx{EVP_MD_CTX_new(), EVP_MD_CTX_free};
  Digest() {
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
      throw NumericError("sha256: digest initialization failed");
    }
  }
  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx.get(), data, n); }
  std::string hex() {
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), out, &len);
    std::string s;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
      std::snprintf(buf, sizeof buf, "%02x", out[i]);
      s += buf;
    }
    return s;
  }
};

bool is_layer_norm(const std::string& name) {
  return name.find("/ln1/") != std::string::npos || name.find("/ln2/") != std::string::npos ||
         name.find("/norm/") != std::string::npos;
}

// Trainable tensor of the model paired with its tape leaf.
struct Slot {
  Matrix* target;
  Var leaf;
};

std::vector<Slot> model_slots(VitWeights& w, const BoundVit& vit, bool train_layer_norm) {
  std::vector<Slot> out = {{&w.head_w, vit.head_w}, {&w.head_b, vit.head_b}};
  if (!train_layer_norm) return out;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    out.push_back({&w.layers[l].ln1_gamma, vit.layers[l].ln1_gamma});
    out.push_back({&w.layers[l].ln1_beta, vit.layers[l].ln1_beta});
    out.push_back({&w.layers[l].ln2_gamma, vit.layers[l].ln2_gamma});
    out.push_back({&w.layers[l].ln2_beta, vit.layers[l].ln2_beta});
  }
  out.push_back({&w.ln_gamma, vit.ln_gamma});
  out.push_back({&w.ln_beta, vit.ln_beta});
  return out;
}

double rsr_sum(const AdapterBank& bank) {
  if (bank.variant() != Variant::clora) return 0;
  double s = 0;
  for (std::size_t j = 1; j <= bank.modules(); ++j) s += rsr_term(bank.experts(j));
  return s;
}

}  // namespace

std::string backbone_digest(const VitWeights& weights, bool skip_layer_norm) {
  Digest dg;
  for (const NamedTensor& t : weights.backbone_tensors()) {
    if (skip_layer_norm && is_layer_norm(t.name)) continue;
    const std::string head = t.name + "\t" + t.tensor->shape() + "\n";
    dg.update(head.data(), head.size());
    const auto data = t.tensor->data();
    dg.update(data.data(), data.size_bytes());
  }
  return dg.hex();
}

AdapterBank make_adapters(const TrainConfig& config, const VitConfig& vit) {
  if (config.head_only) return {};
  std::mt19937_64 rng = make_rng(config.seed, kStreamAdapters);
  return AdapterBank::initialize(config.adapter_config(vit), rng);
}

double accuracy(const VitWeights& model, const AdapterBank* adapters, const Placement& placement,
                std::span<const Sample> samples) {
  if (samples.empty()) return 0;
  std::optional<VitWeights> merged;
  if (adapters && placement.mode != AttachMode::none) {
    merged = merge_adapters(model, *adapters, placement);
  }
  const VitWeights& w = merged ? *merged : model;
  std::size_t correct = 0;
  for (const Sample& s : samples) {
    const Matrix logits = forward(s.patches, w, nullptr, Placement{});
    const auto row = logits.row(0);
    const auto best = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == s.label;
  }
  return double(correct) / double(samples.size());
}

TrainedResult train(const SyntheticTask& task, const VitWeights& model, const TrainConfig& config) {
  return train(task, model, make_adapters(config, model.config), config);
}

TrainedResult train(const SyntheticTask& task, const VitWeights& model, AdapterBank adapters,
                    const TrainConfig& config) {
  config.validate();
  if (model.merged) throw ContractError("train: backbone already carries merged adapters");
  const VitConfig& vc = model.config;
  if (task.config.tokens != vc.tokens || task.config.patch_dim != vc.patch_dim ||
      task.config.classes != vc.classes) {
    throw ContractError("train: task shape does not match the backbone");
  }
  const Placement placement = config.placement();
  const bool use_adapters = !config.head_only;
  if (use_adapters) {
    const AdapterConfig want = config.adapter_config(vc);
    const AdapterConfig& have = adapters.config();
    if (have.d != want.d || have.r != want.r || have.m != want.m || have.p != want.p ||
        have.variant != want.variant) {
      throw ContractError("train: adapter bank layout does not match the configuration");
    }
    for (std::size_t j = 1; j <= adapters.modules(); ++j) {
      if (max_abs(adapters.delta_w(j)) != 0.0) {
        throw ContractError("train: adapters must start with dW = 0 (module " +
                            std::to_string(j) + ")");
      }
    }
  }

  TrainedResult res;
  res.model = model;
  res.adapters = std::move(adapters);
  res.digest_before = backbone_digest(model, config.train_layer_norm);

  std::mt19937_64 shuffle = make_rng(config.seed, kStreamShuffle);
  const std::size_t n = task.train.size();
  const std::size_t per_epoch = (n + config.batch - 1) / config.batch;
  const std::size_t total = per_epoch * config.epochs;
  const std::size_t warmup = per_epoch * config.warmup_epochs;
  const double reg_weight = config.alpha / double(vc.d * vc.d);

  AdamW opt(config.weight_decay);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  double lr = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle);
    double loss_sum = 0;
    for (std::size_t start = 0; start < n; start += config.batch) {
      const std::size_t stop = std::min(n, start + config.batch);
      lr = cosine_lr(step + 1, total, warmup, config.lr);

      Tape tape;
      BoundVit vit(tape, res.model, true, config.train_layer_norm);
      std::optional<BoundAdapters> bound;
      if (use_adapters) bound.emplace(tape, res.adapters);
      BoundAdapters* ad = bound ? &*bound : nullptr;

      std::vector<Var> logits;
      std::vector<std::size_t> labels;
      std::vector<ForwardTrace> traces(config.sample_dependent_sr ? stop - start : 0);
      for (std::size_t i = start; i < stop; ++i) {
        const Sample& s = task.train[order[i]];
        ForwardTrace* tr = config.sample_dependent_sr ? &traces[i - start] : nullptr;
        logits.push_back(forward(vit, tape.constant(s.patches), ad, placement, tr));
        labels.push_back(s.label);
      }
      Var loss = cross_entropy(concat_rows(logits), labels);

      if (config.regularized()) {
        const FlopMeter before = tape.meter();
        Var reg;
        if (config.sample_dependent_sr) {
          std::vector<Var> terms;
          for (const ForwardTrace& tr : traces)
            for (std::size_t j = 1; j <= ad->modules(); ++j)
              terms.push_back(sr_term(tr.module_inputs[j - 1], ad->experts(j)));
          reg = scale(add_all(terms), reg_weight / double(traces.size()));
        } else {
          std::vector<std::vector<Var>> experts;
          for (std::size_t j = 1; j <= ad->modules(); ++j) experts.push_back(ad->experts(j));
          reg = weighted_regularizer(tape, experts, config.alpha, vc.d);
        }
        res.regularizer_flops.matmul_flops += tape.meter().matmul_flops - before.matmul_flops;
        res.regularizer_flops.other_flops += tape.meter().other_flops - before.other_flops;
        loss = loss + reg;
      }

      const double value = loss.value()(0, 0);
      if (!std::isfinite(value)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step + 1) + " (lr " + std::to_string(lr) + ")");
      }
      tape.backward(loss);

      std::vector<Matrix*> params;
      std::vector<Matrix> grads;
      if (use_adapters) {
        const auto targets = res.adapters.parameters();
        for (std::size_t k = 0; k < targets.size(); ++k) {
          params.push_back(targets[k]);
          grads.push_back(tape.grad(ad->leaves()[k]));
        }
      }
      for (const Slot& s : model_slots(res.model, vit, config.train_layer_norm)) {
        params.push_back(s.target);
        grads.push_back(tape.grad(s.leaf));
      }
      opt.step(params, grads, lr);

      loss_sum += value * double(stop - start);
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(n);
    rec.val_acc = accuracy(res.model, use_adapters ? &res.adapters : nullptr, placement, task.val);
    rec.rsr_sum = use_adapters ? rsr_sum(res.adapters) : 0.0;
    rec.lr = lr;
    res.history.push_back(rec);
  }

  res.steps = step;
  res.final_val_acc = res.history.empty()
                          ? accuracy(res.model, use_adapters ? &res.adapters : nullptr, placement,
                                     task.val)
                          : res.history.back().val_acc;
  res.digest_after = backbone_digest(res.model, config.train_layer_norm);
  if (res.digest_after != res.digest_before) {
    throw ContractError("train: frozen backbone tensors changed during training");
  }
  return res;
}

double mean_expert_similarity(const VitWeights& model, const AdapterBank& adapters,
                              const Placement& placement, std::span<const Sample> samples) {
  if (adapters.variant() != Variant::clora) {
    throw ContractError("mean_expert_similarity: needs a clora bank");
  }
  std::vector<ExpertSet> experts;
  for (std::size_t j = 1; j <= adapters.modules(); ++j) experts.push_back(adapters.experts(j));
  double total = 0;
  std::size_t count = 0;
  for (const Sample& s : samples) {
    Tape tape;
    BoundVit vit(tape, model);
    BoundAdapters bound(tape, adapters);
    ForwardTrace trace;
    forward(vit, tape.constant(s.patches), &bound, placement, &trace);
    for (std::size_t j = 0; j < experts.size(); ++j) {
      const Matrix& x = trace.module_inputs[j].value();
      const ExpertSet& e = experts[j];
      std::vector<Matrix> proj;
      for (const Matrix& m : e) proj.push_back(matmul(x, m));
      for (std::size_t h = 0; h < e.size(); ++h) {
        for (std::size_t r = h + 1; r < e.size(); ++r) {
          for (std::size_t a = 0; a < x.rows(); ++a) {
            const auto u = proj[h].row(a), v = proj[r].row(a);
            double uv = 0, uu = 0, vv = 0;
            for (std::size_t k = 0; k < u.size(); ++k) {
              uv += u[k] * v[k];
              uu += u[k] * u[k];
              vv += v[k] * v[k];
            }
            if (uu == 0 || vv == 0) continue;
            total += std::abs(uv) / std::sqrt(uu * vv);
            ++count;
          }
        }
      }
    }
  }
  return count ? total / double(count) : 0.0;
}

std::string history_csv(std::span<const EpochRecord> history) {
  std::ostringstream out;
  out << "epoch,train_loss,val_acc,rsr_sum,lr\n";
  char buf[160];
  for (const EpochRecord& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.6f,%.10g,%.10g\n", r.epoch, r.train_loss,
                  r.val_acc, r.rsr_sum, r.lr);
    out << buf;
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Run configuration

void RunConfig::validate() const {
  vit.validate();
  task.validate();
  train.validate();
  if (task.tokens != vit.tokens || task.patch_dim != vit.patch_dim || task.classes != vit.classes) {
    throw ContractError("config: task tokens/patch_dim/classes must match the backbone");
  }
  if (!train.head_only) train.adapter_config(vit).validate();
}

VitWeights RunConfig::make_backbone() const {
  std::mt19937_64 rng = make_rng(train.seed, kStreamBackbone);
  return VitWeights::random(vit, rng);
}

SyntheticTask RunConfig::make_task() const { return SyntheticTask::generate(task, train.seed); }

RunConfig default_run_config() {
  RunConfig c;
  c.vit.d = 32;
  c.vit.layers = 2;
  c.vit.heads = 4;
  c.vit.tokens = 8;
  c.vit.patch_dim = 12;
  c.vit.ffn_hidden = 64;
  c.vit.classes = 2;
  c.task.tokens = c.vit.tokens;
  c.task.patch_dim = c.vit.patch_dim;
  c.task.classes = c.vit.classes;
  c.task.train_size = 512;
  c.task.val_size = 256;
  c.task.test_size = 256;
  c.task.separation = 4.0;
  c.task.noise = 1.0;
  c.train.p = 2;
  c.train.r = 4;
  c.train.epochs = 30;
  c.train.warmup_epochs = 3;
  return c;
}

namespace {

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) {
    throw ContractError("config: bad value '" + value + "' for key '" + key + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "off" || value == "no") return false;
  throw ContractError("config: bad boolean '" + value + "' for key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  auto size = [&] { return parse_number<std::size_t>(key, value); };
  auto real = [&] { return parse_number<double>(key, value); };
  auto flag = [&] { return parse_bool(key, value); };
  if (key == "d") c.vit.d = size();
  else if (key == "layers" || key == "L") c.vit.layers = size();
  else if (key == "heads") c.vit.heads = size();
  else if (key == "tokens" || key == "n") c.vit.tokens = c.task.tokens = size();
  else if (key == "patch_dim") c.vit.patch_dim = c.task.patch_dim = size();
  else if (key == "ffn_hidden") c.vit.ffn_hidden = size();
  else if (key == "classes") c.vit.classes = c.task.classes = size();
  else if (key == "ln_eps") c.vit.ln_eps = real();
  else if (key == "signal_tokens") c.task.signal_tokens = size();
  else if (key == "train_size") c.task.train_size = size();
  else if (key == "val_size") c.task.val_size = size();
  else if (key == "test_size") c.task.test_size = size();
  else if (key == "separation") c.task.separation = real();
  else if (key == "noise") c.task.noise = real();
  else if (key == "alpha") c.train.alpha = real();
  else if (key == "lr") c.train.lr = real();
  else if (key == "weight_decay") c.train.weight_decay = real();
  else if (key == "batch" || key == "b") c.train.batch = size();
  else if (key == "epochs") c.train.epochs = size();
  else if (key == "warmup_epochs") c.train.warmup_epochs = size();
  else if (key == "seed") c.train.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "p") c.train.p = size();
  else if (key == "r") c.train.r = size();
  else if (key == "sade") c.train.sade_on = flag();
  else if (key == "insert_mha") c.train.insert_mha = flag();
  else if (key == "insert_ffn") c.train.insert_ffn = flag();
  else if (key == "qv_mode") c.train.qv_mode = flag();
  else if (key == "naive_sum") c.train.naive_sum_mode = flag();
  else if (key == "sample_dependent_sr") c.train.sample_dependent_sr = flag();
  else if (key == "head_only") c.train.head_only = flag();
  else if (key == "train_layer_norm") c.train.train_layer_norm = flag();
  else throw ContractError("config: unknown key '" + key + "'");
}

void apply_config(RunConfig& config, std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ContractError("config: line " + std::to_string(lineno) + " is not key=value");
    }
    apply_setting(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("config: cannot read " + path.string());
  RunConfig c = default_run_config();
  apply_config(c, in);
  return c;
}

std::string render_run_config(const RunConfig& c) {
  std::ostringstream o;
  o.precision(17);
  auto b = [](bool v) { return v ? "true" : "false"; };
  o << "d=" << c.vit.d << "\nlayers=" << c.vit.layers << "\nheads=" << c.vit.heads
    << "\ntokens=" << c.vit.tokens << "\npatch_dim=" << c.vit.patch_dim
    << "\nffn_hidden=" << c.vit.ffn_hidden << "\nclasses=" << c.vit.classes
    << "\nln_eps=" << c.vit.ln_eps << "\nsignal_tokens=" << c.task.signal_tokens
    << "\ntrain_size=" << c.task.train_size << "\nval_size=" << c.task.val_size
    << "\ntest_size=" << c.task.test_size << "\nseparation=" << c.task.separation
    << "\nnoise=" << c.task.noise << "\nalpha=" << c.train.alpha << "\nlr=" << c.train.lr
    << "\nweight_decay=" << c.train.weight_decay << "\nbatch=" << c.train.batch
    << "\nepochs=" << c.train.epochs << "\nwarmup_epochs=" << c.train.warmup_epochs
    << "\nseed=" << c.train.seed << "\np=" << c.train.p << "\nr=" << c.train.r
    << "\nsade=" << b(c.train.sade_on) << "\ninsert_mha=" << b(c.train.insert_mha)
    << "\ninsert_ffn=" << b(c.train.insert_ffn) << "\nqv_mode=" << b(c.train.qv_mode)
    << "\nnaive_sum=" << b(c.train.naive_sum_mode)
    << "\nsample_dependent_sr=" << b(c.train.sample_dependent_sr)
    << "\nhead_only=" << b(c.train.head_only)
    << "\ntrain_layer_norm=" << b(c.train.train_layer_norm) << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Ablation

const std::vector<AblationVariant>& ablation_variants() {
  //                                 sade   mha    ffn    qv     naive  sr
  static const std::vector<AblationVariant> list = {
      {"CLoRA", true, true, true, false, false, false},
      {"CLoRAMF", false, true, true, false, false, false},
      {"CLoRAMS", true, true, false, false, false, false},
      {"CLoRAFS", true, false, true, false, false, false},
      {"CLoRA(QV)", true, true, true, true, false, false},
      {"CLoRA#", false, true, true, false, true, false},
      {"CLoRA*", true, true, true, false, false, true},
  };
  return list;
}

TrainConfig apply_variant(TrainConfig base, const AblationVariant& v) {
  base.head_only = false;
  base.sade_on = v.sade_on;
  base.insert_mha = v.insert_mha;
  base.insert_ffn = v.insert_ffn;
  base.qv_mode = v.qv_mode;
  base.naive_sum_mode = v.naive_sum_mode;
  base.sample_dependent_sr = v.sample_dependent_sr;
  return base;
}

std::vector<AblationRow> ablate(const RunConfig& base, std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw ContractError("ablate: no seeds");
  std::vector<AblationRow> rows;
  for (const AblationVariant& v : ablation_variants()) {
    RunConfig rc = base;
    rc.train = apply_variant(base.train, v);
    rc.validate();
    const AdapterConfig ac = rc.train.adapter_config(rc.vit);
    const Placement pl = rc.train.placement();
    AblationRow row;
    row.variant = v.name;
    row.attach = pl.mode == AttachMode::qv_update ? "qv_update" : "pre_block";
    row.parameterization = std::string(to_string(ac.variant));
    row.before_mha = pl.mode == AttachMode::pre_block && pl.before_mha;
    row.before_ffn = pl.mode == AttachMode::pre_block && pl.before_ffn;
    row.sade = rc.train.regularized();
    row.regularizer = !row.sade ? "none" : rc.train.sample_dependent_sr ? "sr" : "rsr";
    row.modules = ac.m;
    const std::size_t head = rc.vit.d * rc.vit.classes + rc.vit.classes;
    row.param_count = param_count(ac, head);
    row.census = AdapterBank::allocate(ac).census() + head;
    double flops = 0;
    for (std::uint64_t seed : seeds) {
      rc.train.seed = seed;
      const VitWeights model = rc.make_backbone();
      const SyntheticTask task = rc.make_task();
      const TrainedResult res = train(task, model, rc.train);
      row.val_acc.push_back(res.final_val_acc);
      flops += res.steps ? double(res.regularizer_flops.total()) / double(res.steps) : 0.0;
    }
    row.mean_val_acc =
        std::accumulate(row.val_acc.begin(), row.val_acc.end(), 0.0) / double(row.val_acc.size());
    row.regularizer_flops_per_step = flops / double(seeds.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream out;
  out << "variant,attach,parameterization,before_mha,before_ffn,sade,regularizer,modules,"
         "param_count,census,mean_val_acc";
  const std::size_t seeds = rows.empty() ? 0 : rows[0].val_acc.size();
  for (std::size_t s = 0; s < seeds; ++s) out << ",val_acc_" << s + 1;
  out << ",regularizer_flops_per_step\n";
  char buf[64];
  for (const AblationRow& r : rows) {
    out << r.variant << ',' << r.attach << ',' << r.parameterization << ','
        << (r.before_mha ? 1 : 0) << ',' << (r.before_ffn ? 1 : 0) << ',' << (r.sade ? 1 : 0)
        << ',' << r.regularizer << ',' << r.modules << ',' << r.param_count << ',' << r.census;
    std::snprintf(buf, sizeof buf, ",%.6f", r.mean_val_acc);
    out << buf;
    for (double a : r.val_acc) {
      std::snprintf(buf, sizeof buf, ",%.6f", a);
      out << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.0f\n", r.regularizer_flops_per_step);
    out << buf;
  }
  return out.str();
}

}  // namespace clora
