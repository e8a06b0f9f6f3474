#pragma once

#include "pacn/autograd.hpp"

namespace pacn {

/// Frequency instance normalization of x (n, c, f, t): for every retained
/// (n, f) pair, mean and variance are taken over (c, t).
template <class T> Var fin(Tape<T>& tape, Var x);

/// Adaptive residual normalization:
///   (rho * x + (1 - rho) * FIN(x)) * gamma_c + beta_c
/// rho has one element, gamma/beta one per channel.
template <class T> Var arn(Tape<T>& tape, Var x, Var rho, Var gamma, Var beta);

}  // namespace pacn
