// SPDX-License-Identifier: Apache-2.0
#include "clora/sade.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "clora/errors.hpp"

namespace clora {

namespace {

void check_experts(const ExpertSet& experts) {
  if (experts.empty()) throw ContractError("expert set is empty");
  const std::size_t d = experts[0].rows();
  for (const Matrix& m : experts) {
    if (m.rows() != d || m.cols() != d) {
      throw ShapeError("expert " + m.shape() + " is not " + std::to_string(d) + "x" +
                       std::to_string(d));
    }
  }
}

double dot_row(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

double token_similarity(const Matrix& token, const ExpertSet& experts, std::size_t h,
                        std::size_t r) {
  check_experts(experts);
  if (token.rows() != 1 || token.cols() != experts[0].rows()) {
    throw ShapeError("token_similarity: token " + token.shape() + " vs experts of dim " +
                     std::to_string(experts[0].rows()));
  }
  if (h < 1 || h > experts.size() || r < 1 || r > experts.size()) {
    throw IndexError("token_similarity: expert index out of range");
  }
  if (h == r) throw ContractError("token_similarity: h and r must differ");
  const Matrix a = matmul(token, experts[h - 1]);
  const Matrix b = matmul(token, experts[r - 1]);
  const double na = frobenius(a), nb = frobenius(b);
  if (na == 0.0 || nb == 0.0) {
    throw NumericError("token_similarity: degenerate similarity, projected token has zero magnitude");
  }
  return dot_row(a.data(), b.data()) / (na * nb);
}

double sr_term(const Matrix& tokens, const ExpertSet& experts, FlopMeter* meter) {
  check_experts(experts);
  if (tokens.cols() != experts[0].rows()) {
    throw ShapeError("sr_term: tokens " + tokens.shape() + " vs experts of dim " +
                     std::to_string(experts[0].rows()));
  }
  const std::size_t p = experts.size();
  double total = 0;
  for (std::size_t h = 0; h < p; ++h) {
    for (std::size_t r = h + 1; r < p; ++r) {
      const Matrix a = matmul(tokens, experts[h], meter);
      const Matrix b = matmul(tokens, experts[r], meter);
      for (std::size_t i = 0; i < tokens.rows(); ++i) {
        const double na = std::sqrt(dot_row(a.row(i), a.row(i)));
        const double nb = std::sqrt(dot_row(b.row(i), b.row(i)));
        if (na == 0.0 || nb == 0.0) continue;
        const double s = dot_row(a.row(i), b.row(i)) / (na * nb);
        total += s * s;
      }
      if (meter) meter->other_flops += 6 * a.size() + 5 * tokens.rows();
    }
  }
  return total;
}

double rsr_term(const ExpertSet& experts, FlopMeter* meter) {
  check_experts(experts);
  double total = 0;
  for (std::size_t h = 0; h < experts.size(); ++h)
    for (std::size_t r = h + 1; r < experts.size(); ++r)
      total += frobenius_sq(matmul(experts[h], transpose(experts[r]), meter), meter);
  return total;
}

double column_orthogonality_term(std::span<const Matrix> g) {
  double total = 0;
  for (std::size_t f = 0; f < g.size(); ++f) {
    for (std::size_t v = f + 1; v < g.size(); ++v) {
      require_same_shape(g[f], g[v], "column_orthogonality_term");
      total += frobenius_sq(matmul(transpose(g[f]), g[v]));
    }
  }
  return total;
}

Var sr_term(Var tokens, std::span<const Var> experts) {
  if (experts.empty()) throw ContractError("sr_term: expert set is empty");
  Tape& t = *tokens.tape;
  std::vector<Var> terms;
  for (std::size_t h = 0; h < experts.size(); ++h) {
    for (std::size_t r = h + 1; r < experts.size(); ++r) {
      const Var s = cosine_rows(matmul(tokens, experts[h]), matmul(tokens, experts[r]));
      terms.push_back(frobenius_sq(s));
    }
  }
  if (terms.empty()) return t.constant(Matrix(1, 1));
  return add_all(terms);
}

Var rsr_term(std::span<const Var> experts) {
  if (experts.empty()) throw ContractError("rsr_term: expert set is empty");
  Tape& t = *experts[0].tape;
  std::vector<Var> terms;
  for (std::size_t h = 0; h < experts.size(); ++h)
    for (std::size_t r = h + 1; r < experts.size(); ++r)
      terms.push_back(frobenius_sq(matmul(experts[h], transpose(experts[r]))));
  if (terms.empty()) return t.constant(Matrix(1, 1));
  return add_all(terms);
}

Var column_orthogonality_term(std::span<const Var> g) {
  if (g.empty()) throw ContractError("column_orthogonality_term: empty list");
  std::vector<Var> terms;
  for (std::size_t f = 0; f < g.size(); ++f) {
    for (std::size_t v = f + 1; v < g.size(); ++v) {
      require_same_shape(g[f].value(), g[v].value(), "column_orthogonality_term");
      terms.push_back(frobenius_sq(matmul(transpose(g[f]), g[v])));
    }
  }
  if (terms.empty()) return g[0].tape->constant(Matrix(1, 1));
  return add_all(terms);
}

std::vector<Matrix> rsr_gradient(const ExpertSet& experts) {
  check_experts(experts);
  Tape tape;
  std::vector<Var> leaves;
  for (const Matrix& m : experts) leaves.push_back(tape.parameter(m));
  return tape.gradients(rsr_term(leaves), leaves);
}

double ComplexityProfile::reduction_percent() const {
  const double v = std::round(reduction * 1000.0) / 10.0;
  return v == 0.0 ? 0.0 : v;
}

ComplexityProfile complexity_profile(std::size_t d, std::size_t n, std::size_t b,
                                     std::size_t p) {
  if (d == 0 || n == 0 || b == 0 || p == 0) {
    throw ContractError("complexity_profile: d, n, b, p must all be >= 1");
  }
  ComplexityProfile c{d, n, b, p};
  const double dd = double(d), nn = double(n), bb = double(b), pp = double(p);
  c.sr_flops = (pp * pp * nn + pp * pp + pp * nn + pp) * bb * dd * dd;
  c.rsr_flops = (0.5 * pp * pp + 0.5 * pp) * dd * dd * dd;
  c.reduction = 1.0 - c.rsr_flops / c.sr_flops;
  c.threshold = dd / (2.0 * (nn + 1.0));
  return c;
}

const std::vector<Backbone>& standard_backbones() {
  static const std::vector<Backbone> list = {
      {"vit-base", 768, 196}, {"vit-large", 1024, 196}, {"vit-huge", 1280, 196}};
  return list;
}

const Backbone& find_backbone(const std::string& name) {
  for (const auto& b : standard_backbones())
    if (b.name == name) return b;
  throw ContractError("unknown backbone '" + name + "' (expected vit-base, vit-large or vit-huge)");
}

std::string render_complexity_table(std::span<const Backbone> backbones,
                                    std::span<const std::size_t> batches, TableFormat format,
                                    std::size_t p) {
  std::ostringstream out;
  char buf[64];
  const bool csv = format == TableFormat::csv;
  if (csv) {
    out << "backbone,d,n,threshold";
    for (auto b : batches) out << ",b=" << b;
    out << '\n';
  } else {
    std::snprintf(buf, sizeof buf, "%-10s %5s %4s %9s", "backbone", "d", "n", "d/(2(n+1))");
    out << buf;
    for (auto b : batches) {
      std::snprintf(buf, sizeof buf, " %8s", ("b=" + std::to_string(b)).c_str());
      out << buf;
    }
    out << '\n';
  }
  for (const auto& bb : backbones) {
    const double thr = complexity_profile(bb.d, bb.n, 1, p).threshold;
    if (csv) {
      std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.2f", bb.name.c_str(), bb.d, bb.n, thr);
    } else {
      std::snprintf(buf, sizeof buf, "%-10s %5zu %4zu %10.2f", bb.name.c_str(), bb.d, bb.n, thr);
    }
    out << buf;
    for (auto b : batches) {
      const auto prof = complexity_profile(bb.d, bb.n, b, p);
      std::string cell = "-";
      if (prof.applicable()) {
        std::snprintf(buf, sizeof buf, "%.1f%%", prof.reduction_percent());
        cell = buf;
      }
      if (csv) {
        out << ',' << cell;
      } else {
        std::snprintf(buf, sizeof buf, " %8s", cell.c_str());
        out << buf;
      }
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace clora
