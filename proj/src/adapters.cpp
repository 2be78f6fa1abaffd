// SPDX-License-Identifier: Apache-2.0
#include "clora/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "clora/errors.hpp"
#include "clora/svd.hpp"

namespace clora {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::lora: return "lora";
    case Variant::naive_sum: return "naive_sum";
    case Variant::lambda_sum: return "lambda_sum";
    case Variant::clora: return "clora";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  if (name == "lora") return Variant::lora;
  if (name == "naive_sum") return Variant::naive_sum;
  if (name == "lambda_sum") return Variant::lambda_sum;
  if (name == "clora") return Variant::clora;
  throw ContractError("unknown adapter variant '" + std::string(name) + "'");
}

void AdapterConfig::validate() const {
  if (r < 1 || r >= d) {
    throw ContractError("adapter config: need 1 <= r < d, got r=" + std::to_string(r) +
                        " d=" + std::to_string(d));
  }
  if (m < 1) throw ContractError("adapter config: need m >= 1");
  if (variant == Variant::clora || variant == Variant::lambda_sum) {
    if (p < 1 || p >= m) {
      throw ContractError("adapter config: base-space sharing needs 1 <= p < m, got p=" +
                          std::to_string(p) + " m=" + std::to_string(m));
    }
  }
}

namespace {

void check_module(std::size_t j, std::size_t m) {
  if (j < 1 || j > m) {
    throw IndexError("module index " + std::to_string(j) + " outside 1.." + std::to_string(m));
  }
}

}  // namespace

Matrix delta_w_lora(const LoraBank& bank, std::size_t j) {
  check_module(j, bank.modules());
  return matmul(bank.A[j - 1], bank.B[j - 1]);
}

Matrix delta_w_naive_sum(const LoraBank& bank) {
  if (bank.modules() == 0) throw ContractError("delta_w_naive_sum: empty bank");
  Matrix acc = matmul(bank.A[0], bank.B[0]);
  for (std::size_t i = 1; i < bank.modules(); ++i) acc = add(acc, matmul(bank.A[i], bank.B[i]));
  return acc;
}

Matrix delta_w_lambda(const LambdaComponents& c, const BaseSpace& base, std::size_t j) {
  const std::size_t m = c.modules();
  check_module(j, m);
  const std::size_t p = base.count();
  if (base.U.size() != p) throw ShapeError("delta_w_lambda: |D| != |U|");
  const std::size_t d = base.D.at(0).rows();
  Matrix acc(d, d);
  for (std::size_t h = 0; h < p; ++h) {
    for (std::size_t i = 0; i < m; ++i) {
      if (c.T[i].size() != p || c.R[i].size() != p || c.Lambda[i][j - 1].size() != p) {
        throw ShapeError("delta_w_lambda: component grids do not have p entries");
      }
      const Matrix left = matmul(base.D[h], c.T[i][h]);
      const Matrix mid = matmul(matmul(left, c.Lambda[i][j - 1][h]), c.R[i][h]);
      acc = add(acc, matmul(mid, base.U[h]));
    }
  }
  return acc;
}

Matrix delta_w_clora(const LrmBank& bank, std::size_t j) {
  check_module(j, bank.modules());
  const BaseSpace& base = bank.base;
  const std::size_t d = base.D.at(0).rows();
  Matrix acc(d, d);
  for (std::size_t h = 0; h < base.count(); ++h)
    acc = add(acc, matmul(matmul(base.D[h], bank.Q[j - 1][h]), base.U[h]));
  return acc;
}

LrmBank collapse_lambda(const LambdaComponents& c, const BaseSpace& base) {
  const std::size_t m = c.modules(), p = base.count();
  LrmBank out{base, {}};
  out.Q.assign(m, std::vector<Matrix>(p));
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t h = 0; h < p; ++h) {
      Matrix q(c.T[0][h].rows(), c.R[0][h].cols());
      for (std::size_t i = 0; i < m; ++i)
        q = add(q, matmul(matmul(c.T[i][h], c.Lambda[i][j][h]), c.R[i][h]));
      out.Q[j][h] = std::move(q);
    }
  }
  return out;
}

Matrix lrm_forward(const Matrix& x, const Matrix& delta_w, FlopMeter* meter) {
  if (delta_w.rows() != delta_w.cols() || x.cols() != delta_w.rows()) {
    throw ShapeError("lrm_forward: input " + x.shape() + " incompatible with update " +
                     delta_w.shape());
  }
  return add(x, matmul(x, delta_w, meter), meter);
}

Var lrm_forward(Var x, Var delta_w) {
  if (delta_w.rows() != delta_w.cols() || x.cols() != delta_w.rows()) {
    throw ShapeError("lrm_forward: input " + x.value().shape() + " incompatible with update " +
                     delta_w.value().shape());
  }
  return add(x, matmul(x, delta_w));
}

Matrix merge_into_weight(const Matrix& w, const Matrix& delta_w) {
  if (delta_w.rows() != delta_w.cols() || w.rows() != delta_w.rows()) {
    throw ShapeError("merge_into_weight: weight " + w.shape() + " incompatible with update " +
                     delta_w.shape());
  }
  return add(w, matmul(delta_w, w));
}

std::size_t param_count(const AdapterConfig& c, std::size_t head_params) {
  // Counting needs no sharing (p < m); only the factor shapes must exist.
  if (c.r < 1 || c.r >= c.d || c.m < 1 || c.p < 1) {
    throw ContractError("param_count: need 1 <= r < d, m >= 1, p >= 1");
  }
  switch (c.variant) {
    case Variant::clora:
      return (2 * c.d * c.r + c.m * c.r * c.r) * c.p + head_params;
    case Variant::lora:
    case Variant::naive_sum:
      return 2 * c.d * c.r * c.m + head_params;
    case Variant::lambda_sum:
      return 2 * c.d * c.r * c.m + (c.m * c.m - c.m) * c.r * c.r * c.p + head_params;
  }
  return 0;
}

namespace {

Matrix draw(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64* rng) {
  return rng ? Matrix::gaussian(rows, cols, stddev, *rng) : Matrix(rows, cols);
}

}  // namespace

LoraBank make_lora_bank(const AdapterConfig& c, std::mt19937_64* rng) {
  c.validate();
  const double sd = 1.0 / std::sqrt(double(c.d));
  LoraBank bank;
  for (std::size_t j = 0; j < c.m; ++j) {
    bank.A.push_back(draw(c.d, c.r, sd, rng));
    bank.B.emplace_back(c.r, c.d);
  }
  return bank;
}

BaseSpace make_base_space(const AdapterConfig& c, std::mt19937_64* rng) {
  const double sd = 1.0 / std::sqrt(double(c.d));
  BaseSpace base;
  for (std::size_t h = 0; h < c.p; ++h) {
    base.D.push_back(draw(c.d, c.r, sd, rng));
    base.U.push_back(draw(c.r, c.d, sd, rng));
  }
  return base;
}

LrmBank make_lrm_bank(const AdapterConfig& c, std::mt19937_64* rng) {
  c.validate();
  LrmBank bank{make_base_space(c, rng), {}};
  bank.Q.assign(c.m, std::vector<Matrix>(c.p, Matrix(c.r, c.r)));
  return bank;
}

LambdaComponents make_lambda_components(const AdapterConfig& c, std::mt19937_64& rng) {
  c.validate();
  LambdaComponents out;
  out.T.assign(c.m, {});
  out.R.assign(c.m, {});
  out.Lambda.assign(c.m, std::vector<std::vector<Matrix>>(c.m));
  for (std::size_t i = 0; i < c.m; ++i) {
    for (std::size_t h = 0; h < c.p; ++h) {
      out.T[i].push_back(Matrix::gaussian(c.r, c.r, 1.0, rng));
      out.R[i].push_back(Matrix::gaussian(c.r, c.r, 1.0, rng));
    }
    for (std::size_t j = 0; j < c.m; ++j)
      for (std::size_t h = 0; h < c.p; ++h)
        out.Lambda[i][j].push_back(i == j ? Matrix::identity(c.r)
                                          : Matrix::gaussian(c.r, c.r, 1.0, rng));
  }
  return out;
}

LambdaSumBank allocate_lambda_sum(const AdapterConfig& c) {
  c.validate();
  LambdaSumBank out;
  for (std::size_t i = 0; i < c.m; ++i) {
    out.A.emplace_back(c.d, c.r);
    out.B.emplace_back(c.r, c.d);
  }
  out.Lambda.assign(c.m, std::vector<std::vector<Matrix>>(c.m));
  for (std::size_t i = 0; i < c.m; ++i)
    for (std::size_t j = 0; j < c.m; ++j)
      for (std::size_t h = 0; h < c.p; ++h)
        out.Lambda[i][j].push_back(i == j ? Matrix::identity(c.r) : Matrix(c.r, c.r));
  return out;
}

std::size_t LambdaSumBank::census() const {
  std::size_t n = 0;
  for (const Matrix& a : A) n += a.size();
  for (const Matrix& b : B) n += b.size();
  for (std::size_t i = 0; i < Lambda.size(); ++i)
    for (std::size_t j = 0; j < Lambda[i].size(); ++j)
      if (i != j)
        for (const Matrix& l : Lambda[i][j]) n += l.size();
  return n;
}

AdapterBank AdapterBank::allocate(const AdapterConfig& config) {
  config.validate();
  AdapterBank out;
  out.config_ = config;
  switch (config.variant) {
    case Variant::lora:
    case Variant::naive_sum:
      out.bank_ = make_lora_bank(config, nullptr);
      break;
    case Variant::clora:
      out.bank_ = make_lrm_bank(config, nullptr);
      break;
    case Variant::lambda_sum:
      throw ContractError("lambda_sum is a construction only; it has no trainable bank");
  }
  return out;
}

AdapterBank AdapterBank::initialize(const AdapterConfig& config, std::mt19937_64& rng) {
  AdapterBank out = allocate(config);
  if (config.variant == Variant::clora) {
    out.bank_ = make_lrm_bank(config, &rng);
  } else {
    out.bank_ = make_lora_bank(config, &rng);
  }
  return out;
}

AdapterBank AdapterBank::randomize(const AdapterConfig& config, std::mt19937_64& rng,
                                   double stddev) {
  AdapterBank out = allocate(config);
  const double factor_sd = stddev > 0 ? stddev : 1.0 / std::sqrt(double(config.d));
  const double coef_sd = stddev > 0 ? stddev : 1.0;
  for (Matrix* t : out.parameters()) {
    // Q blocks are the only r x r tensors.
    const bool coef = t->rows() == config.r && t->cols() == config.r;
    *t = Matrix::gaussian(t->rows(), t->cols(), coef ? coef_sd : factor_sd, rng);
  }
  return out;
}

std::size_t AdapterBank::rank_bound() const {
  switch (config_.variant) {
    case Variant::lora: return config_.r;
    case Variant::naive_sum: return std::min(config_.m * config_.r, config_.d);
    case Variant::clora:
    case Variant::lambda_sum: return std::min(config_.p * config_.r, config_.d);
  }
  return 0;
}

Matrix AdapterBank::delta_w(std::size_t j) const {
  switch (config_.variant) {
    case Variant::lora: return delta_w_lora(lora(), j);
    case Variant::naive_sum:
      check_module(j, config_.m);
      return delta_w_naive_sum(lora());
    case Variant::clora: return delta_w_clora(lrm(), j);
    case Variant::lambda_sum: break;
  }
  throw ContractError("delta_w: unsupported variant");
}

std::vector<Matrix> AdapterBank::experts(std::size_t j) const {
  if (config_.variant != Variant::clora) {
    throw ContractError("experts: only defined for the clora variant");
  }
  check_module(j, config_.m);
  const LrmBank& b = lrm();
  std::vector<Matrix> out;
  for (std::size_t h = 0; h < b.base.count(); ++h)
    out.push_back(matmul(matmul(b.base.D[h], b.Q[j - 1][h]), b.base.U[h]));
  return out;
}

std::vector<Matrix*> AdapterBank::parameters() {
  std::vector<Matrix*> out;
  if (auto* l = std::get_if<LoraBank>(&bank_)) {
    for (auto& a : l->A) out.push_back(&a);
    for (auto& b : l->B) out.push_back(&b);
  } else {
    auto& b = std::get<LrmBank>(bank_);
    for (auto& d : b.base.D) out.push_back(&d);
    for (auto& u : b.base.U) out.push_back(&u);
    for (auto& row : b.Q)
      for (auto& q : row) out.push_back(&q);
  }
  return out;
}

std::vector<NamedTensor> AdapterBank::tensors(std::string_view prefix) const {
  const std::string p(prefix);
  std::vector<NamedTensor> out;
  if (const auto* l = std::get_if<LoraBank>(&bank_)) {
    for (std::size_t j = 0; j < l->A.size(); ++j)
      out.push_back({p + "A/" + std::to_string(j + 1), &l->A[j]});
    for (std::size_t j = 0; j < l->B.size(); ++j)
      out.push_back({p + "B/" + std::to_string(j + 1), &l->B[j]});
  } else {
    const auto& b = std::get<LrmBank>(bank_);
    for (std::size_t h = 0; h < b.base.count(); ++h)
      out.push_back({p + "D/" + std::to_string(h + 1), &b.base.D[h]});
    for (std::size_t h = 0; h < b.base.count(); ++h)
      out.push_back({p + "U/" + std::to_string(h + 1), &b.base.U[h]});
    for (std::size_t j = 0; j < b.Q.size(); ++j)
      for (std::size_t h = 0; h < b.Q[j].size(); ++h)
        out.push_back({p + "Q/" + std::to_string(j + 1) + "/" + std::to_string(h + 1),
                       &b.Q[j][h]});
  }
  return out;
}

std::size_t AdapterBank::census() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.tensor->size();
  return n;
}

BoundAdapters::BoundAdapters(Tape& tape, const AdapterBank& bank)
    : tape_(&tape), bank_(&bank) {
  for (const auto& t : bank.tensors()) leaves_.push_back(tape.parameter(*t.tensor));
  experts_.resize(bank.modules());
  delta_.resize(bank.modules());
  built_.assign(bank.modules(), false);
}

std::vector<Var> BoundAdapters::experts(std::size_t j) {
  check_module(j, modules());
  if (bank_->variant() != Variant::clora) {
    throw ContractError("experts: only defined for the clora variant");
  }
  auto& cached = experts_[j - 1];
  if (cached.empty()) {
    const std::size_t p = bank_->config().p;
    for (std::size_t h = 0; h < p; ++h) {
      const Var d = leaves_[h];
      const Var u = leaves_[p + h];
      const Var q = leaves_[2 * p + (j - 1) * p + h];
      cached.push_back(matmul(matmul(d, q), u));
    }
  }
  return cached;
}

Var BoundAdapters::delta_w(std::size_t j) {
  check_module(j, modules());
  if (built_[j - 1]) return delta_[j - 1];
  const std::size_t m = modules();
  Var dw;
  switch (bank_->variant()) {
    case Variant::lora:
      dw = matmul(leaves_[j - 1], leaves_[m + j - 1]);
      break;
    case Variant::naive_sum: {
      std::vector<Var> terms;
      for (std::size_t i = 0; i < m; ++i) terms.push_back(matmul(leaves_[i], leaves_[m + i]));
      dw = add_all(terms);
      // One shared update serves every module.
      std::fill(delta_.begin(), delta_.end(), dw);
      std::fill(built_.begin(), built_.end(), true);
      return dw;
    }
    case Variant::clora:
      dw = add_all(experts(j));
      break;
    case Variant::lambda_sum:
      throw ContractError("delta_w: lambda_sum cannot be bound to a tape");
  }
  delta_[j - 1] = dw;
  built_[j - 1] = true;
  return dw;
}

RankReport rank_audit(const AdapterBank& bank, std::size_t j, double tol) {
  RankReport rep;
  rep.rank = numerical_rank(bank.delta_w(j), tol);
  rep.bound = bank.rank_bound();
  rep.ok = rep.rank <= rep.bound;
  return rep;
}

}  // namespace clora
