#pragma once

#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rapnet/tensor.hpp"

namespace rapnet::nn {

/// A named trainable tensor, e.g. "level3/lateral/weight".
struct Parameter {
  std::string name;
  Tensor value;
  std::optional<Tensor> grad;
};

/// Ordered collection of parameters. Insertion order is the serialization
/// order and the order gradients are reduced in.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor value);

  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  const Parameter* find(std::string_view name) const;
  Parameter* find(std::string_view name);

  std::vector<Parameter>& items() noexcept { return params_; }
  const std::vector<Parameter>& items() const noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t numel() const noexcept;

  /// Sets every gradient to an all-zero tensor of the parameter's shape.
  void zero_grad();
  /// Drops all gradients.
  void clear_grad();

  friend bool operator==(const ParameterSet& a, const ParameterSet& b);

 private:
  std::vector<Parameter> params_;
};

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t index() const noexcept { return index_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Receives the gradient of the loss with respect to a node's output and
/// pushes contributions to its inputs through Tape::accumulate.
using BackwardFn = std::function<void(const Tensor& out_grad, Tape& tape)>;

/// Records primitive operations for reverse-mode differentiation. A tape is a
/// single-threaded unit of work; separate tapes share nothing.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Binds a parameter as a tracked leaf. backward() adds into its gradient.
  Var parameter(Parameter& p);

  /// Appends an op node. Values must be finite; the backward function is kept
  /// only when some input is tracked.
  Var record(std::string_view op, Tensor value, const std::vector<Var>& inputs,
             BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.index()).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.index()).requires_grad; }
  std::string_view op_name(Var v) const { return nodes_.at(v.index()).op; }

  /// Gradient buffer of a tracked node, allocated as zeros on first use.
  Tensor& grad_buffer(Var v);
  /// Adds g into the gradient of v. No-op for untracked nodes.
  void accumulate(Var v, const Tensor& g);
  /// Gradient of the last backward pass, or nullptr if the node never received
  /// one.
  const Tensor* grad(Var v) const;

  /// Reverse pass from a one-element loss. Node gradients are recomputed from
  /// scratch each call; parameter gradients accumulate across calls.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Node indices visited by the last backward pass, in visit order.
  const std::vector<std::size_t>& backward_trace() const noexcept {
    return trace_;
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
    Tensor grad;
    bool has_grad = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
  std::vector<std::size_t> trace_;
};

// Differentiable primitives. All of them validate shapes and throw
// DimensionError naming the offending shapes.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var scale(Var a, double factor);
Var relu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
/// Row-wise softmax of a rank-2 tensor.
Var softmax_rows(Var a);
/// Rows [begin, begin + count) of a rank-2 tensor.
Var slice_rows(Var a, std::size_t begin, std::size_t count);
/// [C x T] -> [C x 2T], each column repeated twice.
Var upsample_nearest2x(Var a);
Var sum(Var a);
/// Sum of weights[i] * a[i]; weights are constants.
Var weighted_sum(const std::vector<Var>& terms,
                 const std::vector<double>& weights);

/// x [C_in x T], weight [C_out x C_in x k], bias [C_out] -> [C_out x T_out]
/// with T_out = floor((T + 2*padding - k) / stride) + 1. Cross-correlation,
/// zero padding.
Var conv1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding);

struct AttentionResult {
  Var output;
  Var weights;
};

/// Single-head scaled dot-product self-attention with output projection and
/// residual: softmax(x Wq (x Wk)^T / sqrt(D)) (x Wv) Wo + x.
AttentionResult self_attention(Var x, Var wq, Var wk, Var wv, Var wo);

/// Numerically stable binary cross-entropy with logits.
double bce_with_logits(double logit, double target);
double smooth_l1(double pred, double target);

/// sum_i weights[i] * bce_with_logits(logits[i], targets[i]).
Var bce_with_logits_sum(Var logits, const Tensor& targets, const Tensor& weights);
/// sum_i weights[i] * smooth_l1(pred[i], targets[i]).
Var smooth_l1_sum(Var pred, const Tensor& targets, const Tensor& weights);

double sigmoid(double x);

}  // namespace rapnet::nn
