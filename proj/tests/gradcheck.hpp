#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pacn/autograd.hpp"
#include "pacn/model.hpp"
#include "pacn/ops.hpp"
#include "pacn/rng.hpp"
#include "pacn/tensor.hpp"

namespace pacn::testing {

using TensorD = BasicTensor<double>;
using LossBuilder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

inline TensorD random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so relu kinks sit outside the finite-difference step.
inline TensorD random_nonzero(Shape shape, Rng& rng) {
  TensorD t(std::move(shape));
  for (auto& v : t.data()) {
    const double mag = rng.uniform(0.05, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

// A shuffled grid: pairwise gaps of `gap`, so max-pool winners cannot swap.
inline TensorD random_distinct(Shape shape, Rng& rng, double gap = 0.01) {
  TensorD t(std::move(shape));
  std::vector<double> vals(static_cast<std::size_t>(t.size()));
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = gap * static_cast<double>(i);
  rng.shuffle(vals.begin(), vals.end());
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = vals[static_cast<std::size_t>(i)];
  return t;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t leaves_without_grad = 0;
};

// Central differences on every element of every input. The error per input is
// ||analytic - numeric||_inf / max(||analytic||_inf, ||numeric||_inf, kGradFloor);
// the floor keeps inputs whose true gradient is zero (a key bias under softmax,
// a bias ahead of a normalization) from dividing round-off by round-off.
inline constexpr double kGradFloor = 1e-6;

inline GradCheckResult grad_check(const LossBuilder& build, std::vector<TensorD> inputs,
                                  double step = 1e-4) {
  std::vector<TensorD> analytic;
  {
    Tape<double> tape;
    std::vector<Var> leaves;
    for (const auto& x : inputs) leaves.push_back(tape.leaf(x, true));
    Var loss = build(tape, leaves);
    tape.backward(loss);
    for (Var v : leaves) analytic.push_back(tape.has_grad(v) ? tape.grad(v) : TensorD(tape.value(v).shape()));
  }
  auto eval = [&](const std::vector<TensorD>& xs) {
    Tape<double> tape;
    std::vector<Var> leaves;
    for (const auto& x : xs) leaves.push_back(tape.leaf(x, true));
    return tape.value(build(tape, leaves))[0];
  };
  GradCheckResult out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    double diff = 0.0, scale = 0.0;
    for (std::int64_t k = 0; k < inputs[i].size(); ++k) {
      const double orig = inputs[i][k];
      inputs[i][k] = orig + step;
      const double up = eval(inputs);
      inputs[i][k] = orig - step;
      const double down = eval(inputs);
      inputs[i][k] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[i][k];
      diff = std::max(diff, std::abs(a - numeric));
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
    }
    if (scale < kGradFloor) ++out.leaves_without_grad;
    const double rel = diff / std::max(scale, kGradFloor);
    if (rel > out.max_rel_error) {
      out.max_rel_error = rel;
      out.worst_input = i;
    }
  }
  return out;
}

struct PrimitiveCase {
  std::string name;
  std::function<std::vector<TensorD>(Rng&)> inputs;
  LossBuilder build;
};

// Random projection to a scalar so every output element contributes.
inline Var project(Tape<double>& tape, Var y, std::uint64_t seed = 99) {
  Rng rng(seed);
  const TensorD w = random_tensor(tape.value(y).shape(), rng);
  return dot_const(tape, y, w);
}

std::vector<PrimitiveCase> primitive_cases();

/// Tiny PACN config (under 200 parameters) used for the end-to-end check.
PacnConfig tiny_config();

/// End-to-end check of the tiny model: every parameter and the input are
/// perturbed, loss is the training-mode cross entropy.
GradCheckResult model_grad_check(std::uint64_t seed, WiringMode mode = WiringMode::parallel);

}  // namespace pacn::testing
