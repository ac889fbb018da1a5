#include "rapnet/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "rapnet/error.hpp"

namespace rapnet::nn {

// ---------------------------------------------------------------------------
// ParameterSet

Parameter& ParameterSet::add(std::string name, Tensor value) {
  if (find(name) != nullptr) {
    throw ContractError("duplicate parameter name '" + name + "'");
  }
  params_.push_back(Parameter{std::move(name), std::move(value), std::nullopt});
  return params_.back();
}

Parameter* ParameterSet::find(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const Parameter* ParameterSet::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

Parameter& ParameterSet::get(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw ContractError("unknown parameter '" + std::string(name) + "'");
}

const Parameter& ParameterSet::get(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw ContractError("unknown parameter '" + std::string(name) + "'");
}

std::size_t ParameterSet::numel() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.grad = Tensor(p.value.shape(), 0.0);
}

void ParameterSet::clear_grad() {
  for (auto& p : params_) p.grad.reset();
}

bool operator==(const ParameterSet& a, const ParameterSet& b) {
  if (a.params_.size() != b.params_.size()) return false;
  for (std::size_t i = 0; i < a.params_.size(); ++i) {
    if (a.params_[i].name != b.params_[i].name) return false;
    if (!(a.params_[i].value == b.params_[i].value)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ContractError("use of an unbound Var");
  return tape_->value(*this);
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite constant on tape");
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::parameter(Parameter& p) {
  if (!p.value.all_finite()) {
    throw NumericError("non-finite value in parameter '" + p.name + "'");
  }
  Node n;
  n.op = "parameter";
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  return push(std::move(n));
}

Var Tape::record(std::string_view op, Tensor value, const std::vector<Var>& inputs,
                 BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError("non-finite value produced by " + std::string(op));
  }
  Node n;
  n.op = std::string(op);
  n.value = std::move(value);
  for (const auto& in : inputs) {
    if (&in.tape() != this) {
      throw ContractError(std::string(op) + ": input recorded on another tape");
    }
    n.requires_grad = n.requires_grad || nodes_.at(in.index()).requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Tensor& Tape::grad_buffer(Var v) {
  auto& n = nodes_.at(v.index());
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  auto& n = nodes_.at(v.index());
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape()) {
    throw DimensionError("gradient shape " + shape_string(g.shape()) +
                         " does not match value shape " +
                         shape_string(n.value.shape()) + " in " + n.op);
  }
  auto& buf = grad_buffer(v);
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

const Tensor* Tape::grad(Var v) const {
  const auto& n = nodes_.at(v.index());
  return n.has_grad ? &n.grad : nullptr;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractError("backward: loss from another tape");
  const auto& out = nodes_.at(loss.index());
  if (out.value.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_string(out.value.shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  trace_.clear();
  if (nodes_[loss.index()].requires_grad) {
    grad_buffer(loss).fill(1.0);
  }
  for (std::size_t i = loss.index() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad) continue;
    trace_.push_back(i);
    if (n.param != nullptr) {
      auto& p = *n.param;
      if (!p.grad || p.grad->shape() != p.value.shape()) {
        p.grad = Tensor(p.value.shape(), 0.0);
      }
      if (n.has_grad) {
        auto dst = p.grad->data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
      continue;
    }
    if (!n.has_grad || !n.backward) continue;
    n.backward(n.grad, *this);
  }
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

void require_rank(Var v, std::size_t rank, const char* op) {
  if (v.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_string(v.shape()));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto& A = a.value();
  const auto& B = b.value();
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  if (B.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ for " +
                         shape_string(A.shape()) + " x " + shape_string(B.shape()));
  }
  Tensor C({m, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A.at(i, p);
      const double* brow = &B.data()[p * n];
      double* crow = &C.data()[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return a.tape().record("matmul", std::move(C), {a, b},
                         [a, b, m, k, n](const Tensor& g, Tape& tape) {
    const auto& A = a.value();
    const auto& B = b.value();
    if (tape.requires_grad(a)) {
      auto& ga = tape.grad_buffer(a);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g.at(i, j) * B.at(p, j);
          ga.at(i, p) += acc;
        }
      }
    }
    if (tape.requires_grad(b)) {
      auto& gb = tape.grad_buffer(b);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A.at(i, p);
          for (std::size_t j = 0; j < n; ++j) gb.at(p, j) += aip * g.at(i, j);
        }
      }
    }
  });
}

Var transpose(Var a) {
  require_rank(a, 2, "transpose");
  const auto& A = a.value();
  const std::size_t r = A.dim(0), c = A.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = A.at(i, j);
  return a.tape().record("transpose", std::move(out), {a},
                         [a, r, c](const Tensor& g, Tape& tape) {
    auto& ga = tape.grad_buffer(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga.at(i, j) += g.at(j, i);
  });
}

Var add(Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return a.tape().record("add", std::move(out), {a, b},
                         [a, b](const Tensor& g, Tape& tape) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= factor;
  return a.tape().record("scale", std::move(out), {a},
                         [a, factor](const Tensor& g, Tape& tape) {
    auto& ga = tape.grad_buffer(a);
    auto dst = ga.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.tape().record("relu", std::move(out), {a},
                         [a](const Tensor& g, Tape& tape) {
    const auto x = a.value().data();
    auto dst = tape.grad_buffer(a).data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (x[i] > 0.0) dst[i] += src[i];
    }
  });
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Var sigmoid(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = sigmoid(v);
  Var result;
  result = a.tape().record("sigmoid", out, {a},
                           [a, out](const Tensor& g, Tape& tape) {
    auto dst = tape.grad_buffer(a).data();
    auto y = out.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] += src[i] * y[i] * (1.0 - y[i]);
    }
  });
  return result;
}

Var exp(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::exp(v);
  return a.tape().record("exp", out, {a}, [a, out](const Tensor& g, Tape& tape) {
    auto dst = tape.grad_buffer(a).data();
    auto y = out.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i] * y[i];
  });
}

Var softmax_rows(Var a) {
  require_rank(a, 2, "softmax_rows");
  const auto& A = a.value();
  const std::size_t r = A.dim(0), c = A.dim(1);
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    double mx = A.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, A.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out.at(i, j) = std::exp(A.at(i, j) - mx);
      z += out.at(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= z;
  }
  return a.tape().record("softmax_rows", out, {a},
                         [a, out, r, c](const Tensor& g, Tape& tape) {
    auto& ga = tape.grad_buffer(a);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g.at(i, j) * out.at(i, j);
      for (std::size_t j = 0; j < c; ++j) {
        ga.at(i, j) += out.at(i, j) * (g.at(i, j) - dot);
      }
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  require_rank(a, 2, "slice_rows");
  const auto& A = a.value();
  const std::size_t c = A.dim(1);
  if (count == 0 || begin + count > A.dim(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " +
                         shape_string(A.shape()));
  }
  std::vector<double> vals(A.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                           A.data().begin() +
                               static_cast<std::ptrdiff_t>((begin + count) * c));
  return a.tape().record("slice_rows", Tensor({count, c}, std::move(vals)), {a},
                         [a, begin, count, c](const Tensor& g, Tape& tape) {
    auto dst = tape.grad_buffer(a).data();
    auto src = g.data();
    for (std::size_t i = 0; i < count * c; ++i) dst[begin * c + i] += src[i];
  });
}

Var upsample_nearest2x(Var a) {
  require_rank(a, 2, "upsample_nearest2x");
  const auto& A = a.value();
  const std::size_t r = A.dim(0), t = A.dim(1);
  Tensor out({r, 2 * t});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < 2 * t; ++j) out.at(i, j) = A.at(i, j / 2);
  }
  return a.tape().record("upsample_nearest2x", std::move(out), {a},
                         [a, r, t](const Tensor& g, Tape& tape) {
    auto& ga = tape.grad_buffer(a);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < 2 * t; ++j) ga.at(i, j / 2) += g.at(i, j);
    }
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record("sum", Tensor::scalar(s), {a},
                         [a](const Tensor& g, Tape& tape) {
    const double gv = g[0];
    for (auto& v : tape.grad_buffer(a).data()) v += gv;
  });
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw ContractError("weighted_sum: need one weight per term");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().size() != 1) {
      throw DimensionError("weighted_sum: term " + std::to_string(i) +
                           " is not scalar: " + shape_string(terms[i].shape()));
    }
    s += weights[i] * terms[i].value()[0];
  }
  return terms.front().tape().record(
      "weighted_sum", Tensor::scalar(s), terms,
      [terms, weights](const Tensor& g, Tape& tape) {
        for (std::size_t i = 0; i < terms.size(); ++i) {
          if (tape.requires_grad(terms[i])) {
            tape.grad_buffer(terms[i])[0] += weights[i] * g[0];
          }
        }
      });
}

Var conv1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding) {
  require_rank(x, 2, "conv1d");
  require_rank(weight, 3, "conv1d");
  require_rank(bias, 1, "conv1d");
  const auto& X = x.value();
  const auto& W = weight.value();
  const auto& B = bias.value();
  const std::size_t cin = X.dim(0), t = X.dim(1);
  const std::size_t cout = W.dim(0), k = W.dim(2);
  if (W.dim(1) != cin) {
    throw DimensionError("conv1d: weight " + shape_string(W.shape()) +
                         " does not match input " + shape_string(X.shape()));
  }
  if (B.dim(0) != cout) {
    throw DimensionError("conv1d: bias " + shape_string(B.shape()) +
                         " does not match weight " + shape_string(W.shape()));
  }
  if (stride < 1) throw DimensionError("conv1d: stride must be >= 1");
  if (t + 2 * padding < k) {
    throw DimensionError("conv1d: kernel width " + std::to_string(k) +
                         " exceeds padded input length " +
                         std::to_string(t + 2 * padding) + " for input " +
                         shape_string(X.shape()));
  }
  const std::size_t tout = (t + 2 * padding - k) / stride + 1;
  Tensor Y({cout, tout});
  for (std::size_t o = 0; o < cout; ++o) {
    double* yrow = &Y.data()[o * tout];
    for (std::size_t j = 0; j < tout; ++j) yrow[j] = B[o];
    for (std::size_t c = 0; c < cin; ++c) {
      const double* xrow = &X.data()[c * t];
      for (std::size_t q = 0; q < k; ++q) {
        const double w = W.at(o, c, q);
        for (std::size_t j = 0; j < tout; ++j) {
          // Input index j*stride + q - padding, skipped when it lands in padding.
          const std::size_t pos = j * stride + q;
          if (pos < padding || pos - padding >= t) continue;
          yrow[j] += w * xrow[pos - padding];
        }
      }
    }
  }
  return x.tape().record(
      "conv1d", std::move(Y), {x, weight, bias},
      [x, weight, bias, stride, padding, cin, t, cout, k, tout](const Tensor& g,
                                                                Tape& tape) {
        const auto& X = x.value();
        const auto& W = weight.value();
        const bool gx = tape.requires_grad(x);
        const bool gw = tape.requires_grad(weight);
        if (tape.requires_grad(bias)) {
          auto& gb = tape.grad_buffer(bias);
          for (std::size_t o = 0; o < cout; ++o) {
            double acc = 0.0;
            for (std::size_t j = 0; j < tout; ++j) acc += g.at(o, j);
            gb[o] += acc;
          }
        }
        Tensor* dx = gx ? &tape.grad_buffer(x) : nullptr;
        Tensor* dw = gw ? &tape.grad_buffer(weight) : nullptr;
        for (std::size_t o = 0; o < cout; ++o) {
          const double* grow = &g.data()[o * tout];
          for (std::size_t c = 0; c < cin; ++c) {
            const double* xrow = &X.data()[c * t];
            for (std::size_t q = 0; q < k; ++q) {
              const double w = W.at(o, c, q);
              double wacc = 0.0;
              double* dxrow = dx ? &dx->data()[c * t] : nullptr;
              for (std::size_t j = 0; j < tout; ++j) {
                const std::size_t pos = j * stride + q;
                if (pos < padding || pos - padding >= t) continue;
                const std::size_t src = pos - padding;
                wacc += grow[j] * xrow[src];
                if (dxrow) dxrow[src] += w * grow[j];
              }
              if (dw) dw->at(o, c, q) += wacc;
            }
          }
        }
      });
}

AttentionResult self_attention(Var x, Var wq, Var wk, Var wv, Var wo) {
  require_rank(x, 2, "self_attention");
  const std::size_t d = x.value().dim(1);
  for (Var w : {wq, wk, wv, wo}) {
    if (w.value().rank() != 2 || w.value().dim(0) != d || w.value().dim(1) != d) {
      throw DimensionError("self_attention: projection " + shape_string(w.shape()) +
                           " incompatible with input " + shape_string(x.shape()));
    }
  }
  Var q = matmul(x, wq);
  Var k = matmul(x, wk);
  Var v = matmul(x, wv);
  Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  Var attn = softmax_rows(scores);
  Var out = add(matmul(matmul(attn, v), wo), x);
  return {out, attn};
}

double bce_with_logits(double logit, double target) {
  if (!(target >= 0.0 && target <= 1.0)) {
    throw DomainError("bce_with_logits: target " + std::to_string(target) +
                      " outside [0, 1]");
  }
  return std::max(logit, 0.0) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

double smooth_l1(double pred, double target) {
  const double d = pred - target;
  const double ad = std::abs(d);
  return ad < 1.0 ? 0.5 * d * d : ad - 0.5;
}

Var bce_with_logits_sum(Var logits, const Tensor& targets, const Tensor& weights) {
  const auto& L = logits.value();
  if (targets.shape() != L.shape() || weights.shape() != L.shape()) {
    throw DimensionError("bce_with_logits_sum: logits " + shape_string(L.shape()) +
                         ", targets " + shape_string(targets.shape()) +
                         ", weights " + shape_string(weights.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < L.size(); ++i) {
    if (weights[i] != 0.0) s += weights[i] * bce_with_logits(L[i], targets[i]);
  }
  return logits.tape().record(
      "bce_with_logits_sum", Tensor::scalar(s), {logits},
      [logits, targets, weights](const Tensor& g, Tape& tape) {
        const auto& L = logits.value();
        auto dst = tape.grad_buffer(logits).data();
        for (std::size_t i = 0; i < dst.size(); ++i) {
          if (weights[i] != 0.0) {
            dst[i] += g[0] * weights[i] * (sigmoid(L[i]) - targets[i]);
          }
        }
      });
}

Var smooth_l1_sum(Var pred, const Tensor& targets, const Tensor& weights) {
  const auto& P = pred.value();
  if (targets.shape() != P.shape() || weights.shape() != P.shape()) {
    throw DimensionError("smooth_l1_sum: pred " + shape_string(P.shape()) +
                         ", targets " + shape_string(targets.shape()) +
                         ", weights " + shape_string(weights.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    if (weights[i] != 0.0) s += weights[i] * smooth_l1(P[i], targets[i]);
  }
  return pred.tape().record(
      "smooth_l1_sum", Tensor::scalar(s), {pred},
      [pred, targets, weights](const Tensor& g, Tape& tape) {
        const auto& P = pred.value();
        auto dst = tape.grad_buffer(pred).data();
        for (std::size_t i = 0; i < dst.size(); ++i) {
          if (weights[i] == 0.0) continue;
          const double d = P[i] - targets[i];
          const double dl = std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0);
          dst[i] += g[0] * weights[i] * dl;
        }
      });
}

}  // namespace rapnet::nn
