// SPDX-License-Identifier: Apache-2.0
#include "clora/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "clora/errors.hpp"

namespace clora {

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::push_leaf(Matrix value, bool requires_grad) {
  if (backward_done_) throw ContractError("tape: cannot record after backward()");
  nodes_.push_back(Node{std::move(value), Matrix{}, requires_grad, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Matrix value) { return push_leaf(std::move(value), false); }
Var Tape::parameter(Matrix value) { return push_leaf(std::move(value), true); }

Var Tape::record(Matrix value, std::span<const Var> inputs, Backward backward) {
  if (backward_done_) throw ContractError("tape: cannot record after backward()");
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape != this) throw ContractError("tape: operand belongs to another tape");
    needs = needs || nodes_[in.id].requires_grad;
  }
  if (!needs) backward = nullptr;
  nodes_.push_back(Node{std::move(value), Matrix{}, needs, std::move(backward)});
  return Var{this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t id, const Matrix& contribution) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = contribution;
    return;
  }
  auto g = n.grad.data();
  auto c = contribution.data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += c[i];
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
  const Matrix& lv = nodes_[loss.id].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward: objective must be scalar (1x1), got " + lv.shape());
  }
  if (backward_done_) {
    throw ContractError("backward: already ran on this tape; record a new forward pass");
  }
  backward_done_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad = Matrix(1, 1, 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

std::vector<Matrix> Tape::gradients(Var f, std::span<const Var> params) {
  backward(f);
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (const Var& p : params) out.push_back(grad(p));
  return out;
}

namespace {

void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("operands live on different tapes");
}

// Sums the rows of `g` into a 1 x cols row.
Matrix column_sums(const Matrix& g) {
  Matrix s(1, g.cols());
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) s(0, j) += g(i, j);
  return s;
}

}  // namespace

Var matmul(Var a, Var b) {
  same_tape(a, b);
  Tape& t = *a.tape;
  Matrix out = matmul(a.value(), b.value(), &t.meter());
  const Var in[] = {a, b};
  return t.record(std::move(out), in, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    const Matrix& av = t.value(Var{&t, a});
    const Matrix& bv = t.value(Var{&t, b});
    if (t.requires_grad(Var{&t, a})) t.accumulate(a, matmul(g, transpose(bv)));
    if (t.requires_grad(Var{&t, b})) t.accumulate(b, matmul(transpose(av), g));
  });
}

Var add(Var a, Var b) {
  same_tape(a, b);
  Tape& t = *a.tape;
  Matrix out = add(a.value(), b.value(), &t.meter());
  const Var in[] = {a, b};
  return t.record(std::move(out), in, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    t.accumulate(a, t.adjoint(self));
    t.accumulate(b, t.adjoint(self));
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  Tape& t = *a.tape;
  Matrix out = sub(a.value(), b.value(), &t.meter());
  const Var in[] = {a, b};
  return t.record(std::move(out), in, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    t.accumulate(a, t.adjoint(self));
    t.accumulate(b, scale(t.adjoint(self), -1.0));
  });
}

Var hadamard(Var a, Var b) {
  same_tape(a, b);
  Tape& t = *a.tape;
  Matrix out = hadamard(a.value(), b.value(), &t.meter());
  const Var in[] = {a, b};
  return t.record(std::move(out), in, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    t.accumulate(a, hadamard(g, t.value(Var{&t, b})));
    t.accumulate(b, hadamard(g, t.value(Var{&t, a})));
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Matrix out = scale(a.value(), s, &t.meter());
  const Var in[] = {a};
  return t.record(std::move(out), in, [a = a.id, s](Tape& t, std::size_t self) {
    t.accumulate(a, scale(t.adjoint(self), s));
  });
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  const Var in[] = {a};
  return t.record(transpose(a.value()), in, [a = a.id](Tape& t, std::size_t self) {
    t.accumulate(a, transpose(t.adjoint(self)));
  });
}

Var add_row(Var a, Var row) {
  same_tape(a, row);
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ShapeError("add_row: row " + rv.shape() + " does not broadcast over " + av.shape());
  }
  Tape& t = *a.tape;
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv(0, j);
  t.meter().other_flops += out.size();
  const Var in[] = {a, row};
  return t.record(std::move(out), in, [a = a.id, r = row.id](Tape& t, std::size_t self) {
    t.accumulate(a, t.adjoint(self));
    t.accumulate(r, column_sums(t.adjoint(self)));
  });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  t.meter().other_flops += a.value().size();
  const Var in[] = {a};
  return t.record(Matrix(1, 1, sum(a.value())), in, [a = a.id](Tape& t, std::size_t self) {
    const Matrix& av = t.value(Var{&t, a});
    t.accumulate(a, Matrix(av.rows(), av.cols(), t.adjoint(self)(0, 0)));
  });
}

Var frobenius_sq(Var a) {
  Tape& t = *a.tape;
  Matrix out(1, 1, frobenius_sq(a.value(), &t.meter()));
  const Var in[] = {a};
  return t.record(std::move(out), in, [a = a.id](Tape& t, std::size_t self) {
    t.accumulate(a, scale(t.value(Var{&t, a}), 2.0 * t.adjoint(self)(0, 0)));
  });
}

Var add_all(std::span<const Var> terms) {
  if (terms.empty()) throw ContractError("add_all: empty term list");
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Matrix& av = a.value();
  if (begin > end || end > av.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for " + av.shape());
  }
  Matrix out(av.rows(), end - begin);
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = av(i, j);
  const Var in[] = {a};
  return a.tape->record(std::move(out), in, [a = a.id, begin](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    const Matrix& av = t.value(Var{&t, a});
    Matrix full(av.rows(), av.cols());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) full(i, begin + j) = g(i, j);
    t.accumulate(a, full);
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Matrix& av = a.value();
  if (begin > end || end > av.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for " + av.shape());
  }
  Matrix out(end - begin, av.cols());
  for (std::size_t i = begin; i < end; ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) out(i - begin, j) = av(i, j);
  const Var in[] = {a};
  return a.tape->record(std::move(out), in, [a = a.id, begin](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    const Matrix& av = t.value(Var{&t, a});
    Matrix full(av.rows(), av.cols());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) full(begin + i, j) = g(i, j);
    t.accumulate(a, full);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Matrix& pv = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += pv.cols();
  }
  return parts[0].tape->record(
      std::move(out), parts, [ids, offsets](Tape& t, std::size_t self) {
        const Matrix& g = t.adjoint(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(Var{&t, ids[k]})) continue;
          const Matrix& pv = t.value(Var{&t, ids[k]});
          Matrix part(pv.rows(), pv.cols());
          for (std::size_t i = 0; i < pv.rows(); ++i)
            for (std::size_t j = 0; j < pv.cols(); ++j) part(i, j) = g(i, offsets[k] + j);
          t.accumulate(ids[k], part);
        }
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    auto d = p.value().data();
    data.insert(data.end(), d.begin(), d.end());
    ids.push_back(p.id);
    offsets.push_back(off);
    off += p.rows();
  }
  return parts[0].tape->record(
      Matrix(rows, cols, std::move(data)), parts, [ids, offsets](Tape& t, std::size_t self) {
        const Matrix& g = t.adjoint(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(Var{&t, ids[k]})) continue;
          const Matrix& pv = t.value(Var{&t, ids[k]});
          Matrix part(pv.rows(), pv.cols());
          for (std::size_t i = 0; i < pv.rows(); ++i)
            for (std::size_t j = 0; j < pv.cols(); ++j) part(i, j) = g(offsets[k] + i, j);
          t.accumulate(ids[k], part);
        }
      });
}

Var softmax_rows(Var a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    auto r = av.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0;
    for (std::size_t j = 0; j < av.cols(); ++j) z += out(i, j) = std::exp(av(i, j) - mx);
    for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) /= z;
  }
  a.tape->meter().other_flops += 4 * av.size();
  const Var in[] = {a};
  return a.tape->record(std::move(out), in, [a = a.id](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    const Matrix& y = t.value(Var{&t, self});
    Matrix dx(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (g(i, j) - dot);
    }
    t.accumulate(a, dx);
  });
}

Var layer_norm_rows(Var a, Var gamma, Var beta, double eps) {
  same_tape(a, gamma);
  same_tape(a, beta);
  const Matrix& x = a.value();
  const Matrix& gv = gamma.value();
  const Matrix& bv = beta.value();
  const std::size_t n = x.rows(), d = x.cols();
  if (gv.rows() != 1 || gv.cols() != d || bv.rows() != 1 || bv.cols() != d) {
    throw ShapeError("layer_norm_rows: gamma " + gv.shape() + " / beta " + bv.shape() +
                     " do not match " + x.shape());
  }
  Matrix xhat(n, d), out(n, d);
  std::vector<double> inv_sigma(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= double(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= double(d);
    inv_sigma[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (x(i, j) - mean) * inv_sigma[i];
      out(i, j) = xhat(i, j) * gv(0, j) + bv(0, j);
    }
  }
  a.tape->meter().other_flops += 8 * x.size();
  const Var in[] = {a, gamma, beta};
  return a.tape->record(
      std::move(out), in,
      [a = a.id, g = gamma.id, b = beta.id, xhat = std::move(xhat),
       inv_sigma = std::move(inv_sigma)](Tape& t, std::size_t self) {
        const Matrix& dy = t.adjoint(self);
        const Matrix& gv = t.value(Var{&t, g});
        const std::size_t n = dy.rows(), d = dy.cols();
        if (t.requires_grad(Var{&t, g})) t.accumulate(g, column_sums(hadamard(dy, xhat)));
        if (t.requires_grad(Var{&t, b})) t.accumulate(b, column_sums(dy));
        if (!t.requires_grad(Var{&t, a})) return;
        Matrix dx(n, d);
        for (std::size_t i = 0; i < n; ++i) {
          double m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dy(i, j) * gv(0, j);
            m1 += dxh;
            m2 += dxh * xhat(i, j);
          }
          m1 /= double(d);
          m2 /= double(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dy(i, j) * gv(0, j);
            dx(i, j) = inv_sigma[i] * (dxh - m1 - xhat(i, j) * m2);
          }
        }
        t.accumulate(a, dx);
      });
}

Var gelu(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  auto X = x.data();
  auto Y = out.data();
  for (std::size_t i = 0; i < X.size(); ++i)
    Y[i] = X[i] * 0.5 * (1.0 + std::erf(X[i] / std::numbers::sqrt2));
  a.tape->meter().other_flops += 8 * x.size();
  const Var in[] = {a};
  return a.tape->record(std::move(out), in, [a = a.id](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    const Matrix& x = t.value(Var{&t, a});
    Matrix dx(x.rows(), x.cols());
    auto X = x.data();
    auto G = g.data();
    auto D = dx.data();
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < X.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(X[i] / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * X[i] * X[i]);
      D[i] = G[i] * (cdf + X[i] * pdf);
    }
    t.accumulate(a, dx);
  });
}

Var cosine_rows(Var a, Var b) {
  same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  require_same_shape(av, bv, "cosine_rows");
  const std::size_t n = av.rows(), d = av.cols();
  Matrix out(n, 1);
  std::vector<double> na(n), nb(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0, aa = 0, bb = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += av(i, j) * bv(i, j);
      aa += av(i, j) * av(i, j);
      bb += bv(i, j) * bv(i, j);
    }
    na[i] = std::sqrt(aa);
    nb[i] = std::sqrt(bb);
    out(i, 0) = (na[i] > 0 && nb[i] > 0) ? dot / (na[i] * nb[i]) : 0.0;
  }
  a.tape->meter().other_flops += 6 * av.size() + 3 * n;
  const Var in[] = {a, b};
  return a.tape->record(
      std::move(out), in,
      [a = a.id, b = b.id, na = std::move(na), nb = std::move(nb)](Tape& t, std::size_t self) {
        const Matrix& g = t.adjoint(self);
        const Matrix& c = t.value(Var{&t, self});
        const Matrix& av = t.value(Var{&t, a});
        const Matrix& bv = t.value(Var{&t, b});
        Matrix da(av.rows(), av.cols()), db(av.rows(), av.cols());
        for (std::size_t i = 0; i < av.rows(); ++i) {
          if (!(na[i] > 0 && nb[i] > 0)) continue;
          const double inv = 1.0 / (na[i] * nb[i]);
          const double ca = c(i, 0) / (na[i] * na[i]);
          const double cb = c(i, 0) / (nb[i] * nb[i]);
          for (std::size_t j = 0; j < av.cols(); ++j) {
            da(i, j) = g(i, 0) * (bv(i, j) * inv - ca * av(i, j));
            db(i, j) = g(i, 0) * (av(i, j) * inv - cb * bv(i, j));
          }
        }
        t.accumulate(a, da);
        t.accumulate(b, db);
      });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Matrix& z = logits.value();
  if (labels.size() != z.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     z.shape() + " logits");
  }
  const std::size_t n = z.rows(), k = z.cols();
  Matrix prob(n, k);
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) +
                       " out of range for " + std::to_string(k) + " classes");
    }
    auto r = z.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += prob(i, j) = std::exp(z(i, j) - mx);
    for (std::size_t j = 0; j < k; ++j) prob(i, j) /= s;
    loss += -(z(i, labels[i]) - mx - std::log(s));
  }
  logits.tape->meter().other_flops += 4 * z.size();
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const Var in[] = {logits};
  return logits.tape->record(
      Matrix(1, 1, loss / double(n)), in,
      [id = logits.id, prob = std::move(prob), lab = std::move(lab)](Tape& t, std::size_t self) {
        const double g = t.adjoint(self)(0, 0) / double(prob.rows());
        Matrix dz = prob;
        for (std::size_t i = 0; i < dz.rows(); ++i) dz(i, lab[i]) -= 1.0;
        t.accumulate(id, scale(dz, g));
      });
}

}  // namespace clora
