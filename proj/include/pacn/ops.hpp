#pragma once

#include <cstdint>
#include <vector>

#include "pacn/autograd.hpp"
#include "pacn/tensor.hpp"

// Differentiable primitives. Every op reads its inputs from the tape, records
// its output and (when any input requires a gradient) its adjoint. All ops are
// explicitly instantiated for float and double.
//
// Layouts: feature maps are (n, c, f, t); linear weights are (out, in);
// point-wise weights (c_out, c_in); depth-wise weights (c, k, k).

namespace pacn {

struct Stride2 {
  std::int64_t f = 1;
  std::int64_t t = 1;
};

/// Epsilon shared by every normalization layer.
inline constexpr double kNormEps = 1e-5;

template <class T>
struct BatchNormStats {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  T momentum = T(0.1);
};

// Elementwise / shape ops.
template <class T> Var add(Tape<T>& tape, Var a, Var b);
template <class T> Var scale(Tape<T>& tape, Var a, T factor);
template <class T> Var add_scalar(Tape<T>& tape, Var a, T value);
template <class T> Var relu(Tape<T>& tape, Var x);
template <class T> Var sum(Tape<T>& tape, Var x);
template <class T> Var mean(Tape<T>& tape, Var x);
/// Weighted sum Σ w·x with a constant weight tensor; handy for gradient checks.
template <class T> Var dot_const(Tape<T>& tape, Var x, const BasicTensor<T>& weights);
template <class T> Var concat(Tape<T>& tape, const std::vector<Var>& xs, std::int64_t axis);
/// Reduces (removes) `axis` by averaging.
template <class T> Var mean_axis(Tape<T>& tape, Var x, std::int64_t axis);
/// Swaps axes 1 and 2 of a rank-3 tensor.
template <class T> Var transpose12(Tape<T>& tape, Var x);
/// map (n,c,f,t) + rows (n,c,t) broadcast over f.
template <class T> Var add_freq_broadcast(Tape<T>& tape, Var map, Var rows);
template <class T> Var channel_shuffle(Tape<T>& tape, Var x, std::int64_t groups);
template <class T> Var softmax(Tape<T>& tape, Var x, std::int64_t axis);

// Layers.
template <class T> Var linear(Tape<T>& tape, Var x, Var weight, Var bias);
template <class T> Var pointwise_conv(Tape<T>& tape, Var x, Var weight, Var bias);
/// "same" zero padding, output dims ceil(dim / stride).
template <class T>
Var depthwise_conv(Tape<T>& tape, Var x, Var weight, Var bias, Stride2 stride);
/// Blueprint separable convolution: point-wise 1x1 then depth-wise k x k.
template <class T>
Var bsconv(Tape<T>& tape, Var x, Var pw_weight, Var pw_bias, Var dw_weight, Var dw_bias,
           Stride2 stride);
template <class T> Var maxpool2d(Tape<T>& tape, Var x, Stride2 window, Stride2 stride);
template <class T> Var global_avg_pool(Tape<T>& tape, Var x);

// Normalizations.
/// Per-channel statistics over (n,f,t) in training (updating `stats`), running
/// statistics otherwise.
template <class T>
Var batch_norm(Tape<T>& tape, Var x, Var gamma, Var beta, BatchNormStats<T>& stats,
               bool training);
/// Normalizes over the last axis.
template <class T> Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta);
/// Global response normalization with residual: gamma*(x*N(x)) + beta + x.
template <class T> Var grn(Tape<T>& tape, Var x, Var gamma, Var beta);

// Attention.
struct MhaWeights {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};
/// Multi-head self-attention over x (n, L, d) or (L, d).
template <class T> Var mha(Tape<T>& tape, Var x, const MhaWeights& w, std::int64_t heads);
/// Attention probabilities (n, heads, L, L) for x (n, L, d), no tape.
template <class T>
BasicTensor<T> attention_probs(const BasicTensor<T>& x, const BasicTensor<T>& wq,
                               const BasicTensor<T>& bq, const BasicTensor<T>& wk,
                               const BasicTensor<T>& bk, std::int64_t heads);

// Losses on logits (n, k). Both return the batch mean.
/// -Σ p log softmax(z), p a row-stochastic target.
template <class T>
Var soft_cross_entropy(Tape<T>& tape, Var logits, const BasicTensor<T>& targets);
/// KL(softmax(teacher/T) || softmax(student/T)).
template <class T>
Var kl_div_temperature(Tape<T>& tape, Var student_logits, const BasicTensor<T>& teacher_logits,
                       T temperature);

}  // namespace pacn
