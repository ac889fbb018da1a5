#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rapnet/autodiff.hpp"

namespace testing {

using rapnet::nn::ParameterSet;
using rapnet::nn::Tape;
using rapnet::nn::Tensor;
using rapnet::nn::Var;

inline Tensor random_tensor(rapnet::nn::Shape shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

/// Scalar built on a fresh tape from parameters bound as leaves.
using ScalarFn = std::function<Var(Tape&, std::vector<Var>&)>;

/// Reduces a matrix output to a scalar with fixed random row/column weights so
/// every element carries a distinct sensitivity.
inline Var project(Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed + 991);
  const auto& s = out.shape();
  Tape& tape = out.tape();
  Var a = tape.constant(random_tensor({1, s[0]}, rng, 0.5, 1.5));
  Var b = tape.constant(random_tensor({s[1], 1}, rng, 0.5, 1.5));
  return rapnet::nn::sum(rapnet::nn::matmul(rapnet::nn::matmul(a, out), b));
}

inline double eval_scalar(ParameterSet& ps, const ScalarFn& fn, bool with_grad) {
  Tape tape;
  std::vector<Var> leaves;
  for (auto& p : ps.items()) {
    leaves.push_back(with_grad ? tape.parameter(p) : tape.constant(p.value));
  }
  Var out = fn(tape, leaves);
  if (with_grad) tape.backward(out);
  return out.value()[0];
}

/// Largest per-element relative error between reverse-mode and central
/// finite-difference gradients.
inline double max_grad_error(ParameterSet& ps, const ScalarFn& fn, double eps = 1e-5,
                             double floor = 1e-6) {
  ps.zero_grad();
  eval_scalar(ps, fn, true);
  double worst = 0.0;
  for (auto& p : ps.items()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double keep = p.value[i];
      p.value[i] = keep + eps;
      const double up = eval_scalar(ps, fn, false);
      p.value[i] = keep - eps;
      const double down = eval_scalar(ps, fn, false);
      p.value[i] = keep;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = (*p.grad)[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace testing
